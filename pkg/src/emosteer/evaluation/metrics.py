"""Scalar metrics and label processing.

All functions are pure. Sequences are accepted as any 1-D array-like.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

from emosteer.errors import InputError, UndefinedCorrelationError

LOW_THRESHOLD = 0.1 * math.sqrt(2.0)
HIGH_THRESHOLD = 0.3 * math.sqrt(2.0)
H_RATE_EPS = 1e-9


def _pair(x, y, min_len: int = 2) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InputError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise InputError(f"need at least {min_len} values, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InputError("non-finite values")
    return x, y


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population (1/n) moments.

    Degenerate cases: both sequences constant and equal gives 1, exactly one
    constant gives 0. Two different constants give 0 as well (the numerator
    vanishes while the mean gap keeps the denominator positive).
    """
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    if vx == 0.0 or vy == 0.0:
        return 0.0
    # 2 rho sx sy == 2 cov
    return float(np.clip(2.0 * np.mean(dx * dy) / denom, -1.0, 1.0))


def mean_pairwise_ccc(contours: Sequence) -> float:
    """Mean CCC over all ``k(k-1)/2`` unordered pairs."""
    if len(contours) < 2:
        raise InputError("need at least two contours")
    arrs = [np.asarray(c, dtype=np.float64) for c in contours]
    if len({a.shape for a in arrs}) != 1:
        raise InputError("contours differ in length")
    vals = [ccc(a, b) for a, b in combinations(arrs, 2)]
    return float(np.mean(vals))


def spearman(a, b) -> float:
    """Pearson correlation of average ranks."""
    a, b = _pair(a, b)
    ra, rb = rankdata(a), rankdata(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0.0:
        raise UndefinedCorrelationError("Spearman correlation undefined for constant input")
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def wer(ref: Sequence, hyp: Sequence) -> float:
    """Unit-cost Levenshtein distance over ``len(ref)``."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise InputError("empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


def relative_increase(baseline, steered, eps: float = H_RATE_EPS) -> np.ndarray:
    baseline = np.asarray(baseline, dtype=np.float64)
    steered = np.asarray(steered, dtype=np.float64)
    return (steered - baseline) / np.maximum(baseline, eps)


def h_rate(samples: Iterable[tuple], eps: float = H_RATE_EPS, mode: str = "relative") -> float:
    """Fraction of samples whose dominant-weight emotion gains the most.

    Each sample is ``(weights, baseline_probs, steered_probs)`` over one
    emotion axis. ``mode="absolute"`` ranks raw differences instead of
    relative ones. Argmax ties resolve to the lowest index.
    """
    samples = list(samples)
    if not samples:
        raise InputError("h_rate of an empty sample list")
    if mode not in ("relative", "absolute"):
        raise InputError(f"unknown h_rate mode {mode!r}")
    hits = 0
    for weights, base, steered in samples:
        weights = np.asarray(weights, dtype=np.float64)
        base = np.asarray(base, dtype=np.float64)
        steered = np.asarray(steered, dtype=np.float64)
        if not weights.shape == base.shape == steered.shape:
            raise InputError("weights and distributions differ in length")
        gain = relative_increase(base, steered, eps) if mode == "relative" else steered - base
        hits += int(np.argmax(gain) == np.argmax(weights))
    return hits / len(samples)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        from emosteer.errors import DegenerateEmbeddingError

        raise DegenerateEmbeddingError("zero embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class EmotionDistribution:
    probs: tuple[float, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if len(self.probs) != len(self.names):
            raise InputError("probabilities and emotion names differ in length")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise InputError(f"not a distribution: {list(self.probs)}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.probs))

    @property
    def dominant(self) -> str:
        return self.names[int(np.argmax(self.as_array()))]


def consensus(rater_labels: Sequence, emotion_set: Sequence) -> EmotionDistribution:
    """Average of the raters' one-hot labels.

    Labels and the emotion set may be names or objects with a ``name``.
    """
    names = tuple(getattr(e, "name", e) for e in emotion_set)
    labels = [getattr(x, "name", x) for x in rater_labels]
    if not labels:
        raise InputError("consensus needs at least one rater label")
    counts = dict.fromkeys(names, 0)
    for lab in labels:
        if lab not in counts:
            raise InputError(f"rater label {lab!r} not in emotion set {names}")
        counts[lab] += 1
    m = len(labels)
    return EmotionDistribution(tuple(counts[n] / m for n in names), names)


@dataclass(frozen=True)
class MismatchLevel:
    tag: str
    distance: float


def mismatch_level(text_va, audio_va) -> MismatchLevel:
    t = np.asarray(text_va, dtype=np.float64)
    a = np.asarray(audio_va, dtype=np.float64)
    if t.shape != (2,) or a.shape != (2,):
        raise InputError("valence-arousal points must have two components")
    if ((t < 0) | (t > 1) | (a < 0) | (a > 1)).any() or not (np.isfinite(t).all() and np.isfinite(a).all()):
        raise InputError(f"valence-arousal outside [0, 1]: {t.tolist()} / {a.tolist()}")
    d = float(math.hypot(*(t - a)))
    if d < LOW_THRESHOLD:
        tag = "low"
    elif d < HIGH_THRESHOLD:
        tag = "mid"
    else:
        tag = "high"
    return MismatchLevel(tag, d)
