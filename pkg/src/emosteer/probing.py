"""Linear emotion probes per site, the discriminability scan and site selection."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from emosteer.errors import DegenerateProbeError, InputError, IntegrityError, SelectionError
from emosteer.evaluation.metrics import spearman
from emosteer.instrumentation import ActivationRecord, ActivationTable, HookSite, capture_tables, list_sites
from emosteer.testbed.corpus import split_speakers

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeHyper:
    steps: int = 500
    lr: float = 0.1
    l2: float = 1e-3


@dataclass
class ProbeModel:
    weight: np.ndarray  # [E, width]
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    meta: dict = field(default_factory=dict)

    def logits(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return Z @ self.weight.T + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.logits(X).argmax(axis=1)


@dataclass(frozen=True)
class SiteScore:
    site: HookSite
    accuracy: float
    n_train: int
    n_val: int

    def row(self) -> dict:
        return {"layer": self.site.layer, "operator": self.site.operator, "accuracy": self.accuracy,
                "n_train": self.n_train, "n_val": self.n_val}


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_probe(X: np.ndarray, y: np.ndarray, num_classes: int, hyper: ProbeHyper = ProbeHyper(),
              seed: int = 0) -> ProbeModel:
    """Multinomial logistic regression, full-batch gradient descent.

    Objective: mean cross-entropy + ``l2/2 * |W|^2`` on standardized
    features. Using the per-sample mean keeps the fit unchanged when every
    row is duplicated. Parameters start at zero, so the fit is deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if not np.all(np.isfinite(X)):
        raise IntegrityError("non-finite probe features")
    if len(np.unique(y)) < 2:
        raise DegenerateProbeError("probe needs at least two classes")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    Z = (X - mean) / scale
    n, d = Z.shape
    Y = np.zeros((n, num_classes))
    Y[np.arange(n), y] = 1.0
    W = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    for t in range(hyper.steps):
        lr = hyper.lr * 0.5 * (1.0 + math.cos(math.pi * t / hyper.steps))
        G = (_softmax(Z @ W.T + b) - Y) / n
        W -= lr * (G.T @ Z + hyper.l2 * W)
        b -= lr * G.sum(axis=0)
    meta = {"seed": seed, "l2": hyper.l2, "steps": hyper.steps, "lr": hyper.lr}
    return ProbeModel(W, b, mean, scale, meta)


def speaker_split(speakers: Sequence[str], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of the train and validation speakers (test speakers unused)."""
    parts = split_speakers(set(speakers), seed)
    tr, va = set(parts["train"]), set(parts["val"])
    if not va:
        # fewer than two speakers: nothing to hold out by speaker
        raise InputError("speaker-disjoint split needs at least two speakers")
    idx = np.arange(len(speakers))
    spk = np.asarray(speakers)
    return idx[np.isin(spk, list(tr))], idx[np.isin(spk, list(va))]


def _score(site, X, y, num_classes, train_idx, val_idx, hyper, seed):
    if len(np.unique(y[train_idx])) < 2:
        raise DegenerateProbeError(f"{site}: training split holds a single class")
    probe = fit_probe(X[train_idx], y[train_idx], num_classes, hyper, seed)
    acc = float(np.mean(probe.predict(X[val_idx]) == y[val_idx])) if len(val_idx) else float("nan")
    return probe, SiteScore(site, acc, int(len(train_idx)), int(len(val_idx)))


def train_probe(records: Sequence[ActivationRecord], split_seed: int = 0, hyper: ProbeHyper = ProbeHyper(),
                num_classes: int | None = None) -> tuple[ProbeModel, SiteScore]:
    """Fit on the train speakers, score on the validation speakers."""
    if not records:
        raise InputError("no activation records")
    sites = {r.site for r in records}
    if len(sites) != 1:
        raise InputError(f"records span {len(sites)} sites; expected one")
    y = np.array([r.emotion.index for r in records])
    if len(np.unique(y)) < 2:
        raise DegenerateProbeError("probe needs at least two classes")
    X = np.stack([np.asarray(r.vector, dtype=np.float64) for r in records])
    E = num_classes or int(y.max()) + 1
    tr, va = speaker_split([r.speaker for r in records], split_seed)
    return _score(records[0].site, X, y, E, tr, va, hyper, split_seed)


def scan_tables(tables: Mapping[HookSite, ActivationTable], num_classes: int, split_seed: int = 0,
                hyper: ProbeHyper = ProbeHyper(), jobs: int = 1) -> tuple[list[SiteScore], list[dict]]:
    """Score every table with one shared split; returns (sorted scores, skipped sites)."""
    if not tables:
        raise InputError("no sites to scan")
    first = next(iter(tables.values()))
    for t in tables.values():
        if t.ids != first.ids:
            raise IntegrityError("site tables disagree on row order")
    y = np.array([e.index for e in first.emotions])
    if len(np.unique(y)) < 2:
        raise DegenerateProbeError("scan needs at least two emotion classes")
    tr, va = speaker_split(list(first.speakers), split_seed)

    def one(site):
        try:
            return _score(site, tables[site].matrix.astype(np.float64), y, num_classes, tr, va, hyper,
                          split_seed)[1]
        except (DegenerateProbeError, IntegrityError) as err:
            return err

    order = sorted(tables)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, order))
    else:
        results = [one(s) for s in order]
    scores, skipped = [], []
    for site, res in zip(order, results):
        if isinstance(res, Exception):
            warnings.warn(f"skipping {site}: {res}", UserWarning, stacklevel=2)
            skipped.append({"site": str(site), "reason": str(res)})
        else:
            scores.append(res)
    return sort_scores(scores), skipped


def sort_scores(scores: Sequence[SiteScore]) -> list[SiteScore]:
    """Descending accuracy; ties in (layer, operator) order."""
    return sorted(scores, key=lambda s: (-s.accuracy, s.site))


def scan_discriminability(model, utterances, sites: Sequence[HookSite] | None = None, split_seed: int = 0,
                          hyper: ProbeHyper = ProbeHyper(), jobs: int = 1) -> list[SiteScore]:
    """Capture last-prompt-token activations once and probe every site."""
    sites = list(sites) if sites is not None else list_sites(model)
    for s in sites:
        s.validate(model)
    tables = capture_tables(model, utterances, sites)
    scores, _ = scan_tables(tables, model.config.num_emotions, split_seed, hyper, jobs)
    return scores


def write_scan(path: str | Path, scores: Sequence[SiteScore], meta: Mapping | None = None) -> None:
    """CSV (``layer,operator,accuracy,n_train,n_val``) or, for ``.json``, the same rows plus meta.

    In the CSV the meta is a single leading ``#`` comment line.
    """
    path = Path(path)
    rows = [s.row() for s in sorted(scores, key=lambda s: s.site)]
    if path.suffix == ".json":
        path.write_text(json.dumps({"meta": dict(meta or {}), "scores": rows}, sort_keys=True, indent=1))
        return
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + json.dumps(dict(meta), sort_keys=True) + "\n")
        w = csv.DictWriter(fh, fieldnames=["layer", "operator", "accuracy", "n_train", "n_val"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "accuracy": repr(r["accuracy"])})


def read_scan(path: str | Path) -> list[SiteScore]:
    path = Path(path)
    if path.suffix == ".json":
        rows = json.loads(path.read_text())["scores"]
    else:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return sort_scores([SiteScore(HookSite(int(r["layer"]), r["operator"]), float(r["accuracy"]),
                                  int(r["n_train"]), int(r["n_val"])) for r in rows])


def accuracy_grid(scores: Sequence[SiteScore], num_layers: int, operators: Sequence[str]) -> np.ndarray:
    """``[layers, operators]`` accuracy matrix, NaN where a site was not scored."""
    grid = np.full((num_layers, len(operators)), np.nan)
    col = {op: j for j, op in enumerate(operators)}
    for s in scores:
        if s.site.operator in col:
            grid[s.site.layer - 1, col[s.site.operator]] = s.accuracy
    return grid


# ---- WER-constrained selection ---------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    """Steering outcome of one site configuration at one ``alpha``."""

    sites: tuple[HookSite, ...]
    alpha: float
    tep: float
    e_sim: float
    wer: float

    @property
    def control(self) -> float:
        return 0.5 * (self.tep + self.e_sim)

    def to_json(self) -> dict:
        return {"sites": [str(s) for s in self.sites], "alpha": self.alpha, "tep": self.tep,
                "e_sim": self.e_sim, "wer": self.wer}

    @classmethod
    def from_json(cls, d: dict) -> SweepRow:
        return cls(tuple(HookSite.parse(s) for s in d["sites"]), float(d["alpha"]), float(d["tep"]),
                   float(d["e_sim"]), float(d["wer"]))


@dataclass(frozen=True)
class ConfigSummary:
    sites: tuple[HookSite, ...]
    alpha_max: float
    control: float
    wer_at_alpha_max: float

    def to_json(self) -> dict:
        return {"sites": [str(s) for s in self.sites], "alpha_max": self.alpha_max, "control": self.control,
                "wer_at_alpha_max": self.wer_at_alpha_max}


@dataclass(frozen=True)
class SiteSelection:
    chosen: tuple[HookSite, ...]
    wer_budget: float
    baseline_wer: float
    alpha_grid: tuple[float, ...]
    considered: tuple[ConfigSummary, ...]
    rejected: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return len(self.chosen)

    @property
    def summary(self) -> ConfigSummary:
        return next(c for c in self.considered if c.sites == self.chosen)

    def to_json(self) -> dict:
        return {
            "chosen": [str(s) for s in self.chosen],
            "K": self.K,
            "wer_budget": self.wer_budget,
            "baseline_wer": self.baseline_wer,
            "alpha_grid": list(self.alpha_grid),
            "alpha_max": self.summary.alpha_max,
            "considered": [c.to_json() for c in self.considered],
            "rejected": list(self.rejected),
        }


def within_budget(row: SweepRow, baseline_wer: float, wer_budget: float) -> bool:
    return row.wer <= baseline_wer + wer_budget


def summarize_config(rows: Sequence[SweepRow], alpha_grid: Sequence[float], baseline_wer: float,
                     wer_budget: float) -> ConfigSummary | None:
    """Usable range = grid prefix (ascending alpha) whose WER stays within budget.

    ``alpha_max`` is the last alpha of that prefix and ``control`` the mean
    of (TEP + E-SIM)/2 over it. ``None`` when even the smallest alpha breaks
    the budget.
    """
    by_alpha = {r.alpha: r for r in rows}
    missing = [a for a in alpha_grid if a not in by_alpha]
    if missing:
        raise InputError(f"sweep for {[str(s) for s in rows[0].sites]} lacks alphas {missing}")
    usable = []
    for a in sorted(alpha_grid):
        if not within_budget(by_alpha[a], baseline_wer, wer_budget):
            break
        usable.append(by_alpha[a])
    if not usable:
        return None
    return ConfigSummary(rows[0].sites, usable[-1].alpha, float(np.mean([r.control for r in usable])),
                         usable[-1].wer)


def _rank_key(c: ConfigSummary):
    return (-c.alpha_max, -c.control, tuple(sorted(s.layer for s in c.sites)), len(c.sites),
            tuple(str(s) for s in c.sites))


def select_sites(rows: Sequence[SweepRow], baseline_wer: float, wer_budget: float = 0.005,
                 alpha_grid: Sequence[float] | None = None, K: int | None = None) -> SiteSelection:
    """Pick the configuration maximizing (alpha_max, mean control), then lower layers.

    ``K`` restricts the candidates to configurations of that many sites.
    Raises :class:`SelectionError` (carrying the least-violating candidate)
    when nothing meets the budget.
    """
    if wer_budget < 0:
        raise InputError(f"wer_budget must be >= 0, got {wer_budget}")
    if not rows:
        raise InputError("empty sweep table")
    grid = tuple(sorted(set(alpha_grid if alpha_grid is not None else (r.alpha for r in rows))))
    configs: dict[tuple, list[SweepRow]] = {}
    for r in rows:
        if K is None or len(r.sites) == K:
            configs.setdefault(r.sites, []).append(r)
    if not configs:
        raise InputError(f"no configuration with K={K} in the sweep")
    considered, rejected = [], []
    for sites, crow in configs.items():
        s = summarize_config([r for r in crow if r.alpha in grid], grid, baseline_wer, wer_budget)
        if s is None:
            rejected.append(",".join(map(str, sites)))
        else:
            considered.append(s)
    if not considered:
        first = min(grid)
        closest = min((r for r in rows if r.alpha == first and r.sites in configs), key=lambda r: (r.wer, r.sites))
        raise SelectionError(
            f"no configuration keeps WER within {baseline_wer:.4f} + {wer_budget}", closest.to_json())
    considered.sort(key=_rank_key)
    return SiteSelection(considered[0].sites, wer_budget, baseline_wer, grid, tuple(considered),
                         tuple(sorted(rejected)))


def topk_configurations(gains: Mapping[HookSite, float], max_k: int = 5) -> list[tuple[HookSite, ...]]:
    """Nested configurations from the sites ranked by descending per-site gain."""
    ranked = sorted(gains, key=lambda s: (-gains[s], s))
    return [tuple(ranked[:k]) for k in range(1, min(max_k, len(ranked)) + 1)]


def probe_steer_correlation(scores: Sequence[SiteScore], gains: Mapping[HookSite, float]) -> float:
    """Spearman rho between probe accuracy and steering gain over shared sites."""
    acc = {s.site: s.accuracy for s in scores}
    shared = sorted(set(acc) & set(gains))
    return spearman([acc[s] for s in shared], [gains[s] for s in shared])


def write_selection(path: str | Path, selection: SiteSelection, meta: Mapping | None = None) -> None:
    doc = {"meta": dict(meta or {}), "selection": selection.to_json()}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def read_selection(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())["selection"]


def score_dict(s: SiteScore) -> dict:
    d = asdict(s)
    d["site"] = str(s.site)
    return d
