"""Matched neutral/emotion pairs, mean-difference vectors, mixing and plans."""

from __future__ import annotations

import json
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from emosteer.errors import EmptyPairingError, InputError, IntegrityError, PlanValidationError
from emosteer.evaluation.metrics import EmotionDistribution
from emosteer.instrumentation import PER_STEP, ActivationTable, HookSite, PlanEntry, SteeringPlan
from emosteer.testbed.corpus import Emotion, Utterance

STRICT = "speaker+transcript"
SPEAKER_ONLY = "speaker-only"
STABLE_ALPHA = (0.0, 4.5)


@dataclass(frozen=True)
class PairedSubsets:
    emotion: Emotion
    emotional_ids: tuple[str, ...]
    neutral_ids: tuple[str, ...]
    pairing_mode: str
    pairs: tuple[tuple[str, str], ...] = ()
    dropped: int = 0


def build_pairs(utterances: Sequence[Utterance], emotion: Emotion, mode: str = STRICT) -> PairedSubsets:
    """Pair emotion-``e`` utterances with neutral ones of the same speaker.

    ``STRICT`` matches on (speaker, transcript) one-to-one. ``SPEAKER_ONLY``
    takes, per speaker, all emotional utterances and all neutral utterances.
    Utterances without a partner are dropped and counted.
    """
    if emotion.index == 0:
        raise InputError("cannot pair neutral with itself")
    if mode not in (STRICT, SPEAKER_ONLY):
        raise InputError(f"unknown pairing mode {mode!r}")
    emotional = [u for u in utterances if u.emotion.index == emotion.index]
    neutral = [u for u in utterances if u.emotion.index == 0]
    if not neutral:
        raise EmptyPairingError("corpus contains no neutral utterances")
    pairs = []
    dropped = 0
    if mode == STRICT:
        pool: dict[tuple, list[Utterance]] = {}
        for u in neutral:
            pool.setdefault(u.group_key, []).append(u)
        for u in emotional:
            cands = pool.get(u.group_key)
            if cands:
                pairs.append((u.id, cands.pop(0).id))
            else:
                dropped += 1
        emo_ids = tuple(a for a, _ in pairs)
        neu_ids = tuple(b for _, b in pairs)
    else:
        by_speaker: dict[str, list[str]] = {}
        for u in neutral:
            by_speaker.setdefault(u.speaker, []).append(u.id)
        kept = [u for u in emotional if u.speaker in by_speaker]
        dropped = len(emotional) - len(kept)
        emo_ids = tuple(u.id for u in kept)
        speakers = sorted({u.speaker for u in kept})
        neu_ids = tuple(i for s in speakers for i in by_speaker[s])
        pairs = tuple((u.id, n) for u in kept for n in by_speaker[u.speaker])
    if not emo_ids:
        raise EmptyPairingError(f"no {emotion.name} utterance could be paired with a neutral one")
    return PairedSubsets(emotion, emo_ids, neu_ids, mode, tuple(pairs), dropped)


@dataclass(frozen=True)
class SteeringVector:
    emotion_or_mix: str | EmotionDistribution
    site: HookSite
    vector: np.ndarray
    n_emotional: int
    n_neutral: int
    meta: Mapping = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))

    @property
    def label(self) -> str:
        if isinstance(self.emotion_or_mix, EmotionDistribution):
            return "mix(" + ",".join(f"{n}={p:.4g}" for n, p in self.emotion_or_mix.as_dict().items()) + ")"
        return self.emotion_or_mix

    def to_json(self) -> dict:
        out = {
            "layer": self.site.layer,
            "operator": self.site.operator,
            "n_emotional": self.n_emotional,
            "n_neutral": self.n_neutral,
            "norm": self.norm,
            "values": [float(x) for x in np.asarray(self.vector, dtype=np.float32)],
        }
        if isinstance(self.emotion_or_mix, EmotionDistribution):
            out["mix"] = self.emotion_or_mix.as_dict()
        else:
            out["emotion"] = self.emotion_or_mix
        if self.meta:
            out["meta"] = dict(self.meta)
        return out

    @classmethod
    def from_json(cls, d: dict) -> SteeringVector:
        if "mix" in d:
            names = tuple(d["mix"])
            label = EmotionDistribution(tuple(d["mix"][n] for n in names), names)
        else:
            label = d["emotion"]
        vec = np.asarray(d["values"], dtype=np.float32).astype(np.float64)
        sv = cls(label, HookSite(d["layer"], d["operator"]), vec, d["n_emotional"], d["n_neutral"],
                 d.get("meta", {}))
        if abs(sv.norm - d["norm"]) > 1e-6 * max(1.0, d["norm"]):
            raise IntegrityError(f"vector {sv.label} at {sv.site}: stored norm {d['norm']} != {sv.norm}")
        return sv


def extract_vector(table: ActivationTable, pairs: PairedSubsets) -> SteeringVector:
    """Mean of the emotional activations minus mean of the paired neutral ones."""
    index = table.row_index()
    for uid in (*pairs.emotional_ids, *pairs.neutral_ids):
        if uid not in index:
            raise IntegrityError(f"no activation for utterance {uid!r} at {table.site}")
    mat = table.matrix.astype(np.float64)
    emo = mat[[index[i] for i in pairs.emotional_ids]].mean(axis=0)
    neu = mat[[index[i] for i in pairs.neutral_ids]].mean(axis=0)
    return SteeringVector(pairs.emotion.name, table.site, emo - neu, len(pairs.emotional_ids),
                          len(pairs.neutral_ids), {"pairing_mode": pairs.pairing_mode, "dropped": pairs.dropped})


@dataclass(frozen=True)
class MixWeights:
    """Distribution over non-neutral emotions used as mixing weights."""

    weights: EmotionDistribution
    source: EmotionDistribution | None = None
    renormalized: bool = False

    @classmethod
    def from_distribution(cls, dist: EmotionDistribution) -> MixWeights:
        """Drop neutral mass and renormalize what remains."""
        d = dist.as_dict()
        if "neutral" not in d:
            return cls(dist)
        rest = {n: p for n, p in d.items() if n != "neutral"}
        total = sum(rest.values())
        if total <= 0:
            raise InputError("distribution puts all its mass on neutral; nothing to steer toward")
        names = tuple(rest)
        return cls(EmotionDistribution(tuple(rest[n] / total for n in names), names), dist, d["neutral"] > 0)

    @classmethod
    def parse(cls, text: str) -> MixWeights:
        """``"happy=0.667,sad=0.333"``; weights must already sum to 1 (1e-3 slack for rounding).

        Values are rescaled to sum to exactly 1 after the check.
        """
        items = {}
        for part in text.split(","):
            if not part.strip():
                continue
            try:
                name, val = part.split("=")
                items[name.strip()] = float(val)
            except ValueError:
                raise InputError(f"cannot parse mix weight {part!r} (expected name=value)") from None
        if not items or any(v < 0 for v in items.values()):
            raise InputError(f"mix weights must be non-negative: {text!r}")
        total = sum(items.values())
        if abs(total - 1.0) > 1e-3:
            raise InputError(f"mix weights sum to {total}, not 1")
        names = tuple(items)
        return cls.from_distribution(EmotionDistribution(tuple(items[n] / total for n in names), names))


def mix_vectors(vectors: Sequence[SteeringVector], weights: MixWeights) -> SteeringVector:
    """Weighted sum of single-emotion vectors sharing one site."""
    if not vectors:
        raise InputError("no vectors to mix")
    site = vectors[0].site
    if any(v.site != site for v in vectors):
        raise InputError("vectors to mix must share a site")
    by_name = {v.emotion_or_mix: v for v in vectors}
    wd = weights.weights.as_dict()
    if set(by_name) != set(wd):
        raise InputError(f"weights cover {sorted(wd)} but vectors cover {sorted(map(str, by_name))}")
    nonzero = [n for n in weights.weights.names if wd[n] != 0.0]
    if len(nonzero) == 1 and wd[nonzero[0]] == 1.0:
        # exact endpoint: no floating-point accumulation
        out = by_name[nonzero[0]].vector.copy()
    else:
        out = np.zeros_like(vectors[0].vector, dtype=np.float64)
        for n in weights.weights.names:
            out = out + wd[n] * by_name[n].vector
    meta = {"renormalized_weights": weights.renormalized}
    if weights.source is not None:
        meta["source_distribution"] = weights.source.as_dict()
    return SteeringVector(weights.weights, site, out, sum(v.n_emotional for v in vectors),
                          sum(v.n_neutral for v in vectors), meta)


def make_plan(vectors: Sequence[SteeringVector], alpha: float, position_policy: str = PER_STEP,
              model=None, label: str = "") -> SteeringPlan:
    """One entry per site, shared ``alpha``, renormalization on.

    Alphas outside the stable operating range ``[0, 4.5]`` produce a plan
    flagged ``alpha-above-stable-range`` and a warning.
    """
    if alpha < 0:
        raise PlanValidationError(f"alpha must be >= 0, got {alpha}")
    flags = ()
    if not STABLE_ALPHA[0] <= alpha <= STABLE_ALPHA[1]:
        flags = ("alpha-above-stable-range",)
        warnings.warn(f"alpha={alpha} is outside the stable range {list(STABLE_ALPHA)}", UserWarning, stacklevel=2)
    entries = tuple(PlanEntry(v.site, np.asarray(v.vector, dtype=np.float64), float(alpha)) for v in vectors)
    plan = SteeringPlan(entries, True, position_policy, flags, label)
    if model is not None:
        plan.validate(model)
    return plan


def write_vectors(path: str | Path, vectors: Sequence[SteeringVector], meta: Mapping | None = None) -> None:
    doc = {"format": "emosteer-vectors/1", "meta": dict(meta or {}), "vectors": [v.to_json() for v in vectors]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def read_vectors(path: str | Path) -> list[SteeringVector]:
    doc = json.loads(Path(path).read_text())
    return [SteeringVector.from_json(d) for d in doc["vectors"]]
