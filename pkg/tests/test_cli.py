import json
import shutil

import pytest

from conftest import run_cli
from emosteer.config import load_config
from emosteer.testbed.toy import generate_batch

SMALL = ("--set", "testbed.num_speakers=3", "--set", "testbed.transcripts_per_speaker=4")


def _copy(run, tmp_path):
    dst = tmp_path / "run"
    shutil.copytree(run["dir"], dst, ignore=shutil.ignore_patterns(".*"))
    return dst


def _jsonl(path):
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    return lines[0]["_meta"], lines[1:]


# ---------------------------------------------------------------- fast paths


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        run_cli(tmp_path / name, "gen-data", *SMALL)
    a, b = (tmp_path / "a" / "corpus.jsonl").read_bytes(), (tmp_path / "b" / "corpus.jsonl").read_bytes()
    assert a == b
    meta, rows = _jsonl(tmp_path / "a" / "corpus.jsonl")
    assert len(rows) == 3 * 4 * 5 and meta["command"] == "gen-data"


def test_missing_inputs_exit_2(tmp_path):
    proc = run_cli(tmp_path, "train", check=False)
    assert proc.returncode == 2
    assert "error[input-error]" in proc.stderr and "emosteer gen-data" in proc.stderr


def test_bad_config_exit_2(tmp_path):
    proc = run_cli(tmp_path, "gen-data", "--set", "train.epochs=lots", check=False)
    assert proc.returncode == 2 and "config-error" in proc.stderr
    (tmp_path / "x.ini").write_text("[nosuch]\na = 1\n")
    assert run_cli(tmp_path, "gen-data", "-c", str(tmp_path / "x.ini"), check=False).returncode == 2


def test_config_command_round_trips(tmp_path):
    proc = run_cli(tmp_path, "config", "--set", "train.epochs=3")
    (tmp_path / "c.ini").write_text(proc.stdout)
    assert load_config(tmp_path / "c.ini").train.epochs == 3


def test_training_failure_exit_5(tmp_path):
    args = ("--set", "testbed.num_speakers=6", "--set", "testbed.transcripts_per_speaker=10",
            "--set", "model.n_layers=4", "--set", "model.d_model=32", "--set", "model.n_heads=2",
            "--set", "train.epochs=1", "--set", "train.max_wer=-1")
    run_cli(tmp_path, "gen-data", *args)
    proc = run_cli(tmp_path, "train", *args, check=False)
    assert proc.returncode == 5 and "training-failure" in proc.stderr
    assert not (tmp_path / "model.bin").exists()


# ---------------------------------------------------------------- on the default pipeline


def test_pipeline_outputs(pipeline_run):
    d = pipeline_run["dir"]
    for name in ("corpus.jsonl", "model.bin", "classifier.json", "scan.csv", "scan.json", "vectors.json",
                 "selection.json", "sweep.json", "gains.json", "diagnostic.json"):
        assert (d / name).exists(), name
    assert {p.name for p in (d / "report").iterdir()} >= {"scan_heatmap.png", "alpha_sweep.png", "summary.json"}
    assert len((d / "scan.csv").read_text().splitlines()) == 2 + 80


def test_selection_lists_nested_configs(pipeline_run):
    sel = json.loads((pipeline_run["dir"] / "selection.json").read_text())["selection"]
    sizes = sorted(len(c["sites"]) for c in sel["considered"])
    assert sizes == sorted(set(sizes)) and sizes[0] == 1 and sizes[-1] <= 5
    considered = [c["sites"] for c in sorted(sel["considered"], key=lambda c: len(c["sites"]))]
    for small, big in zip(considered, considered[1:]):
        assert set(small) < set(big)
    assert "chosen:" in pipeline_run["stdout"]["select"]


def test_eval_outputs(pipeline_run):
    d = pipeline_run["dir"]
    mixed = pipeline_run["stdout"]["eval --mode mixed --alphas 3"]
    assert "rho" in mixed and "hit" in mixed
    [path] = d.glob("eval_mismatch_*.json")
    doc = json.loads(path.read_text())
    for key, block in doc["blocks"].items():
        levels = doc["config"]["strata"][key]["levels"]
        assert set(levels) == {"low", "mid", "high"}
        assert sum(v["n"] for v in levels.values()) == sum(1 for r in block["rows"] if not r.get("failed"))


def test_diagnose_output(pipeline_run):
    doc = json.loads((pipeline_run["dir"] / "diagnostic.json").read_text())
    n = len(doc["groups"])
    assert n > 0
    for mode in ("slm_driven", "flow_driven"):
        assert doc["aggregate"][mode]["f0_ccc"]["count"] == n
    assert "N=" in pipeline_run["stdout"]["diagnose"]


def test_steer_files(pipeline_run):
    d = pipeline_run["dir"]
    [single] = d.glob("steer_single-happy_*.jsonl")
    [mix] = d.glob("steer_mixed-mix_*.jsonl")
    meta, rows = _jsonl(mix)
    assert meta["mix"] == pytest.approx({"happy": 0.667, "sad": 0.333})
    assert rows and all(r["tokens"] for r in rows)
    assert _jsonl(single)[0]["plan"]["entries"]


def test_steer_alpha_zero_equals_unsteered(pipeline_run, pipeline_model, tmp_path):
    d = _copy(pipeline_run, tmp_path)
    run_cli(d, "steer", "--emotion", "happy", "--alpha", "0")
    [path] = [p for p in d.glob("steer_single-happy_*.jsonl") if json.loads(p.open().readline())["_meta"]
              ["spec"]["alpha"] == 0.0]
    _, rows = _jsonl(path)
    plain = generate_batch(pipeline_model, [r["transcript"] for r in rows], [0] * len(rows))
    assert [r["tokens"] for r in rows] == [list(o.tokens) for o in plain]


def test_steer_notes_and_errors(pipeline_run, tmp_path):
    d = _copy(pipeline_run, tmp_path)
    assert "note: alpha 5" in run_cli(d, "steer", "--emotion", "sad", "--alpha", "5").stdout
    for bad in (("--mix", "happy=0.5,sad=0.2"), ("--emotion", "neutral"), ("--emotion", "bored"),
                ("--mix", "happy=0.5,bored=0.5")):
        proc = run_cli(d, "steer", *bad, "--alpha", "1", check=False)
        assert proc.returncode == 2, (bad, proc.stderr)


def test_tampered_corpus_exit_3(pipeline_run, tmp_path):
    d = _copy(pipeline_run, tmp_path)
    lines = (d / "corpus.jsonl").read_text().splitlines()
    row = json.loads(lines[1])
    row["prosody"] = [(p + 1) % 16 for p in row["prosody"]]
    lines[1] = json.dumps(row, sort_keys=True)
    (d / "corpus.jsonl").write_text("\n".join(lines) + "\n")
    proc = run_cli(d, "extract", "--all", check=False)
    assert proc.returncode == 3 and "integrity-error" in proc.stderr


def test_infeasible_selection_exit_4(pipeline_run, tmp_path):
    d = _copy(pipeline_run, tmp_path)
    proc = run_cli(d, "select", "--set", "steering.sweep=7", "--set", "steering.max_k=1", check=False)
    assert proc.returncode == 4, proc.stderr
    assert "infeasible-selection" in proc.stderr and "closest candidate" in proc.stderr
    # the sweep that led to the refusal is still on disk for inspection
    assert json.loads((d / "sweep.json").read_text())["rows"]
