import hashlib
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from emosteer.testbed.corpus import CorpusSpec, build_synthetic_corpus
from emosteer.testbed.model import ModelConfig
from emosteer.testbed.toy import init_model

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

CRITERIA = {
    1: "metric oracle equivalence",
    2: "injection algebra",
    3: "extraction correctness",
    4: "consensus and binning",
    5: "probe sanity",
    6: "cross-conditioning ordering",
    7: "layer discriminability and steering monotonicity",
    8: "mixed-emotion control",
    9: "intelligibility budget and selection re-check",
    10: "probe-steer correlation",
    11: "CLI determinism",
}
_outcomes: dict[int, list[tuple[str, str, float]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _outcomes.setdefault(n, []).append((item.name, rep.outcome, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        runs = _outcomes.get(n)
        if not runs:
            continue
        ok = all(o == "passed" for _, o, _ in runs)
        secs = sum(d for _, _, d in runs)
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {CRITERIA[n]}  ({secs:.1f}s)")


# ---------------------------------------------------------------- small fixtures


@pytest.fixture(scope="session")
def small_corpus():
    return build_synthetic_corpus(CorpusSpec(num_speakers=4, transcripts_per_speaker=3, rng_seed=3))


@pytest.fixture(scope="session")
def untrained_model():
    return init_model(ModelConfig(n_layers=4, d_model=32, n_heads=2, d_mlp=64), seed=0)


@pytest.fixture(scope="session")
def untrained_fused():
    return init_model(ModelConfig(n_layers=4, d_model=32, n_heads=2, d_mlp=64, fused_qkv=True), seed=0)


# ---------------------------------------------------------------- full CLI pipeline


def run_cli(workdir, *args, check=True):
    cmd = [sys.executable, "-m", "emosteer.cli", *args, "--workdir", str(workdir)]
    env = {**os.environ, "PYTHONWARNINGS": "ignore"}
    proc = subprocess.run(cmd, capture_output=True, text=True, env=env)
    if check and proc.returncode != 0:
        raise AssertionError(f"{' '.join(args)} failed ({proc.returncode}): {proc.stderr}")
    return proc


PIPELINE = (
    ("gen-data",),
    ("train",),
    ("scan",),
    ("extract", "--all"),
    ("select",),
    ("eval", "--mode", "single", "--alphas", "0,1,2,3,4"),
    ("eval", "--mode", "mixed", "--alphas", "3"),
    ("eval", "--mode", "mismatch", "--alphas", "3"),
    ("diagnose",),
    ("steer", "--emotion", "happy", "--alpha", "3"),
    ("steer", "--mix", "happy=0.667,sad=0.333", "--alpha", "3"),
    ("report",),
)


def run_pipeline(workdir: Path) -> dict:
    """Every command once; returns per-command wall time and stdout."""
    times, stdout = {}, {}
    for args in PIPELINE:
        t = time.perf_counter()
        proc = run_cli(workdir, *args)
        key = " ".join(args)
        times[key] = time.perf_counter() - t
        stdout[key] = proc.stdout
    return {"dir": workdir, "times": times, "stdout": stdout}


def tree_hashes(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and not p.name.startswith(".")}


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """The default toy pipeline (seed 0) run through the CLI."""
    return run_pipeline(tmp_path_factory.mktemp("run_a"))


@pytest.fixture(scope="session")
def pipeline_model(pipeline_run):
    from emosteer.testbed.checkpoint import load_checkpoint

    return load_checkpoint(pipeline_run["dir"] / "model.bin")


def finite(xs):
    return np.all(np.isfinite(np.asarray(xs, dtype=float)))
