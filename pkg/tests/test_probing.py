import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emosteer.errors import DegenerateProbeError, InputError, IntegrityError, SelectionError
from emosteer.instrumentation import ActivationRecord, HookSite, capture_tables
from emosteer.pipeline import recheck_selection, split_corpus
from emosteer.probing import (
    ProbeHyper,
    SiteScore,
    SweepRow,
    fit_probe,
    probe_steer_correlation,
    read_scan,
    scan_discriminability,
    scan_tables,
    select_sites,
    topk_configurations,
    train_probe,
    write_scan,
)
from emosteer.testbed.corpus import CorpusSpec, EmotionSet, build_synthetic_corpus
from emosteer.testbed.model import ModelConfig
from emosteer.testbed.toy import init_model

A, B, C = HookSite(1, "layer_output"), HookSite(2, "layer_output"), HookSite(3, "attn_output")


def _blobs(rng, E=3, n=40, d=5, sep=10.0):
    X = np.concatenate([rng.normal(size=(n, d)) + sep * np.eye(d)[e] for e in range(E)])
    y = np.repeat(np.arange(E), n)
    return X, y


def perceptron_separates(X, y, E, epochs=200):
    """Multiclass perceptron; True once it classifies every point correctly."""
    Xb = np.hstack([X, np.ones((len(X), 1))])
    W = np.zeros((E, Xb.shape[1]))
    for _ in range(epochs):
        errors = 0
        for x, t in zip(Xb, y):
            p = int(np.argmax(W @ x))
            if p != t:
                W[t] += x
                W[p] -= x
                errors += 1
        if errors == 0:
            return True
    return False


def test_probe_on_separable_blobs():
    rng = np.random.default_rng(0)
    X, y = _blobs(rng)
    assert perceptron_separates(X, y, 3)
    Xv, yv = _blobs(rng)
    probe = fit_probe(X, y, 3)
    assert np.mean(probe.predict(Xv) == yv) >= 0.99


def test_probe_duplication_invariance():
    X, y = _blobs(np.random.default_rng(1), n=15)
    p1 = fit_probe(X, y, 3)
    p2 = fit_probe(np.vstack([X, X]), np.concatenate([y, y]), 3)
    assert np.allclose(p1.weight, p2.weight, atol=1e-6) and np.allclose(p1.bias, p2.bias, atol=1e-6)


def test_probe_errors():
    X = np.ones((4, 2))
    with pytest.raises(DegenerateProbeError):
        fit_probe(X, np.zeros(4, dtype=int), 2)
    X[0, 0] = np.nan
    with pytest.raises(IntegrityError):
        fit_probe(X, np.array([0, 1, 0, 1]), 2)


def test_probe_is_deterministic():
    X, y = _blobs(np.random.default_rng(2), sep=1.0)
    a, b = fit_probe(X, y, 3), fit_probe(X, y, 3)
    assert np.array_equal(a.weight, b.weight)


def test_scan_one_site_equals_train_probe(untrained_model, small_corpus):
    tables = capture_tables(untrained_model, small_corpus.utterances, [B])
    scores, skipped = scan_tables(tables, 5, split_seed=0, hyper=ProbeHyper(steps=50))
    _, single = train_probe(tables[B].records(), 0, ProbeHyper(steps=50), 5)
    assert skipped == [] and scores == [single]


def test_scan_skips_single_class_sites():
    emos = EmotionSet(("neutral", "happy"))
    recs = [ActivationRecord(f"u{i}", f"s{i % 4}", emos["neutral"], A, np.ones(3) * i) for i in range(8)]
    with pytest.raises(DegenerateProbeError):
        train_probe(recs)


def test_scan_file_roundtrip(tmp_path):
    scores = [SiteScore(B, 0.5, 10, 5), SiteScore(A, 0.9, 10, 5), SiteScore(C, 0.5, 10, 5)]
    write_scan(tmp_path / "s.csv", scores, {"tool": "x"})
    write_scan(tmp_path / "s.json", scores, {"tool": "x"})
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("# ") and lines[1].startswith("layer,operator")
    # file rows in (layer, operator) order
    assert [ln.split(",")[0] for ln in lines[2:]] == ["1", "2", "3"]
    for name in ("s.csv", "s.json"):
        back = read_scan(tmp_path / name)
        assert [s.site for s in back] == [A, B, C]
        assert back[0].accuracy == 0.9


def test_fused_model_scan_has_64_rows(untrained_fused, small_corpus):
    fused = init_model(ModelConfig(fused_qkv=True), 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scores = scan_discriminability(fused, small_corpus.utterances, hyper=ProbeHyper(steps=5))
    assert len(scores) == 64


@pytest.mark.xfail(strict=True, reason="the condition token's embedding is linearly decodable at the last prompt "
                                       "position even through random weights; see the decisions log")
def test_untrained_model_scans_near_chance():
    corpus = build_synthetic_corpus(CorpusSpec())
    split = split_corpus(corpus.utterances, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scores = scan_discriminability(init_model(ModelConfig(), 0), split.probe_pool)
    assert max(s.accuracy for s in scores) <= 1 / 5 + 0.15


def test_trained_model_scan(pipeline_run):
    scores = read_scan(pipeline_run["dir"] / "scan.csv")
    acc = {s.site: s.accuracy for s in scores}
    assert max(acc.values()) >= 0.9
    mid_late = [a for s, a in acc.items() if s.layer >= 3 and s.operator in
                ("emb_post_mlp_residual", "layer_output", "attn_output", "W0_x_attn_output")]
    assert max(mid_late) > acc[HookSite(1, "emb_pre_attn_post_ln")]


# ---------------------------------------------------------------- selection


def _rows(table):
    return [SweepRow(sites, a, tep, 0.0, w) for sites, cells in table.items() for a, (tep, w) in cells.items()]


def test_select_singleton_and_higher_alpha_max():
    rows = _rows({(A,): {1.0: (0.3, 0.0), 2.0: (0.5, 0.001)}})
    sel = select_sites(rows, 0.0, 0.005)
    assert sel.chosen == (A,) and sel.summary.alpha_max == 2.0
    rows = _rows({(A,): {1.0: (0.9, 0.0), 2.0: (0.95, 0.1)}, (A, B): {1.0: (0.2, 0.0), 2.0: (0.3, 0.004)}})
    sel = select_sites(rows, 0.0, 0.005)
    assert sel.chosen == (A, B) and sel.summary.alpha_max == 2.0


def test_select_tie_breaks_on_control_then_layer():
    rows = _rows({(B,): {1.0: (0.5, 0.0)}, (A,): {1.0: (0.5, 0.0)}, (C,): {1.0: (0.4, 0.0)}})
    assert select_sites(rows, 0.0, 0.005).chosen == (A,)
    rows = _rows({(B,): {1.0: (0.6, 0.0)}, (A,): {1.0: (0.5, 0.0)}})
    assert select_sites(rows, 0.0, 0.005).chosen == (B,)


def test_select_infeasible_carries_closest():
    rows = _rows({(A,): {1.0: (0.9, 0.2)}, (B,): {1.0: (0.9, 0.1)}})
    with pytest.raises(SelectionError) as exc:
        select_sites(rows, 0.0, 0.005)
    assert exc.value.closest["sites"] == [str(B)]
    with pytest.raises(InputError):
        select_sites(rows, 0.0, -1)
    with pytest.raises(InputError):
        select_sites([], 0.0)


cell = st.tuples(st.floats(0, 1), st.sampled_from([0.0, 0.002, 0.004, 0.006, 0.02]))


@given(st.lists(st.lists(cell, min_size=4, max_size=4), min_size=1, max_size=5))
def test_select_matches_brute_force(configs):
    sites_pool = [A, B, C, HookSite(4, "layer_output"), HookSite(5, "layer_output")]
    grid = (0.5, 1.0, 1.5, 2.0)
    table = {tuple(sites_pool[:k + 1]): dict(zip(grid, cells)) for k, cells in enumerate(configs)}
    rows = _rows(table)
    budget, base = 0.005, 0.0

    def prefix(cells):
        best = None
        for a in grid:
            if cells[a][1] > base + budget:
                break
            best = a
        return best

    feasible = {s: prefix(c) for s, c in table.items() if prefix(c) is not None}
    if not feasible:
        with pytest.raises(SelectionError):
            select_sites(rows, base, budget, grid)
        return
    sel = select_sites(rows, base, budget, grid)
    top = max(feasible.values())
    assert sel.summary.alpha_max == top
    # control is the mean of (TEP + E-SIM) / 2; E-SIM is 0 in these rows
    control = {s: np.mean([table[s][a][0] / 2 for a in grid if a <= feasible[s]]) for s in feasible if feasible[s] == top}
    assert sel.summary.control == pytest.approx(max(control.values()))
    assert recheck_selection(sel.to_json(), rows, base)


def test_recheck_rejects_wrong_selection():
    rows = _rows({(A,): {1.0: (0.9, 0.0), 2.0: (0.9, 0.0)}, (B,): {1.0: (0.9, 0.0), 2.0: (0.9, 0.1)}})
    sel = select_sites(rows, 0.0, 0.005).to_json()
    assert recheck_selection(sel, rows, 0.0)
    forged = {**sel, "chosen": [str(B)], "alpha_max": 1.0}
    assert not recheck_selection(forged, rows, 0.0)


def test_topk_nested_and_correlation():
    gains = {A: 0.1, B: 0.5, C: 0.3}
    cfgs = topk_configurations(gains, 5)
    assert cfgs == [(B,), (B, C), (B, C, A)]
    scores = [SiteScore(A, 0.2, 1, 1), SiteScore(B, 0.9, 1, 1), SiteScore(C, 0.5, 1, 1)]
    assert probe_steer_correlation(scores, gains) == pytest.approx(1.0)
