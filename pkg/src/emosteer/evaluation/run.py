"""Steered generation + scoring over an evaluation set.

A run evaluates several :class:`PlanSpec` blocks (always including the
unsteered baseline) on the same samples with the same decoding seed, so
blocks differ only in the injected vectors.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from emosteer.errors import EmosteerError, InputError
from emosteer.evaluation.classifier import ReferenceClassifier, SpeakerEmbedder
from emosteer.evaluation.metrics import (
    H_RATE_EPS,
    EmotionDistribution,
    consensus,
    cosine,
    h_rate,
    mismatch_level,
    spearman,
    wer,
)
from emosteer.instrumentation import NO_STEER, PER_STEP, HookSite, SteeringPlan
from emosteer.steering import MixWeights, SteeringVector, make_plan, mix_vectors
from emosteer.testbed.corpus import EmotionSet, Utterance
from emosteer.testbed.toy import generate_batch

log = logging.getLogger(__name__)

NONE, SINGLE, MIXED, DOMINANT, RANDOM = "none", "single", "mixed", "dominant", "random"
MODES = (NONE, SINGLE, MIXED, DOMINANT, RANDOM)


def tep(classifier: ReferenceClassifier, tokens, target: int) -> float:
    """Probability the reference classifier assigns to ``target``."""
    return float(classifier.predict_proba([tokens])[0, int(target)])


def e_sim(embedder: ReferenceClassifier, tokens_a, tokens_b) -> float:
    """Cosine similarity of the classifier's hidden-layer embeddings."""
    emb = embedder.embed([tokens_a, tokens_b])
    return cosine(emb[0], emb[1])


@dataclass(frozen=True)
class EvalSample:
    id: str
    speaker: str
    transcript: tuple[int, ...]
    target: int | None = None
    weights: EmotionDistribution | None = None
    reference_prosody: tuple[int, ...] | None = None
    reference_transcript: tuple[int, ...] | None = None
    text_va: tuple[float, float] | None = None
    audio_va: tuple[float, float] | None = None
    condition: int = 0

    def target_index(self, emotions: EmotionSet) -> int:
        if self.target is not None:
            return self.target
        if self.weights is None:
            raise InputError(f"sample {self.id} has neither a target nor weights")
        return emotions[self.weights.dominant].index


def single_eval_set(utterances: Sequence[Utterance], emotions: EmotionSet, targets=None,
                    limit: int | None = None) -> list[EvalSample]:
    """Neutral prompts paired with the same speaker/transcript's emotional rendition as reference."""
    by_key = {(u.group_key, u.emotion.index): u for u in utterances}
    neutral = sorted((u for u in utterances if u.emotion.index == 0), key=lambda u: u.id)
    if limit is not None:
        neutral = neutral[:limit]
    targets = [e.index for e in emotions.non_neutral] if targets is None else list(targets)
    out = []
    for e in targets:
        for u in neutral:
            ref = by_key.get((u.group_key, e))
            out.append(EvalSample(
                id=f"{u.id}->{emotions[e].name}", speaker=u.speaker, transcript=u.transcript, target=e,
                reference_prosody=ref.prosody if ref else None, reference_transcript=u.transcript,
                text_va=u.text_va, audio_va=ref.audio_va if ref else None))
    return out


def mixed_eval_set(utterances: Sequence[Utterance], emotions: EmotionSet) -> list[EvalSample]:
    """Samples with rater labels; weights are the consensus distribution."""
    out = []
    for u in utterances:
        if not u.rater_labels:
            continue
        dist = consensus(u.rater_labels, emotions)
        out.append(EvalSample(
            id=u.id, speaker=u.speaker, transcript=u.transcript, weights=dist, reference_prosody=u.prosody,
            reference_transcript=u.transcript, text_va=u.text_va, audio_va=u.audio_va))
    return out


@dataclass(frozen=True)
class PlanSpec:
    """How each sample's plan is built: which vectors, at which sites, how strong."""

    mode: str = NONE
    alpha: float = 0.0
    sites: tuple[HookSite, ...] = ()
    position_policy: str = PER_STEP
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"unknown plan mode {self.mode!r}")
        if self.mode != NONE and not self.sites:
            raise InputError(f"plan mode {self.mode!r} needs at least one site")

    def to_json(self) -> dict:
        return {"mode": self.mode, "alpha": self.alpha, "sites": [str(s) for s in self.sites],
                "position_policy": self.position_policy, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> PlanSpec:
        return cls(d["mode"], float(d["alpha"]), tuple(HookSite.parse(s) for s in d["sites"]),
                   d.get("position_policy", PER_STEP), int(d.get("seed", 0)))

    def key(self, vectors: Mapping | None = None) -> str:
        """Stable hash of this plan and the vectors it draws on."""
        doc = self.to_json()
        if vectors and self.mode != NONE:
            doc["vectors"] = sorted(
                (name, str(site), hashlib.sha256(np.asarray(v.vector, "<f8").tobytes()).hexdigest())
                for (name, site), v in vectors.items() if site in self.sites)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def label(self) -> str:
        if self.mode == NONE:
            return "no-steer"
        return f"{self.mode}@{self.alpha:g}[{','.join(map(str, self.sites))}]"

    def resolve(self, sample: EvalSample, vectors: Mapping[tuple[str, HookSite], SteeringVector],
                emotions: EmotionSet) -> SteeringPlan:
        if self.mode == NONE:
            return NO_STEER
        chosen = []
        for site in self.sites:
            if self.mode == SINGLE or self.mode == DOMINANT:
                name = emotions[sample.target_index(emotions)].name
                chosen.append(_vector(vectors, name, site))
            elif self.mode == MIXED:
                if sample.weights is None:
                    raise InputError(f"mixed steering needs weights on sample {sample.id}")
                w = MixWeights.from_distribution(sample.weights)
                chosen.append(mix_vectors([_vector(vectors, n, site) for n in w.weights.names], w))
            else:
                base = _vector(vectors, emotions[sample.target_index(emotions)].name, site)
                rng = np.random.default_rng([self.seed, zlib.crc32(f"{sample.id}|{site}".encode())])
                noise = rng.standard_normal(base.vector.shape)
                noise *= base.norm / max(np.linalg.norm(noise), 1e-12)
                chosen.append(SteeringVector("random", site, noise, 0, 0))
        return make_plan(chosen, self.alpha, self.position_policy, label=self.label)


def _vector(vectors, name, site):
    try:
        return vectors[(name, site)]
    except KeyError:
        raise InputError(f"no {name} vector at {site}") from None


def vector_index(vectors: Sequence[SteeringVector]) -> dict[tuple[str, HookSite], SteeringVector]:
    return {(v.label, v.site): v for v in vectors}


@dataclass(frozen=True)
class MetricsConfig:
    temperature: float = 0.0
    top_p: float = 1.0
    seed: int = 0
    h_rate_eps: float = H_RATE_EPS
    h_rate_mode: str = "relative"
    batch_size: int = 256


@dataclass
class EvalReport:
    blocks: dict  # plan key -> {"plan": ..., "rows": [...], "aggregates": {...}}
    config: dict
    order: list[str] = field(default_factory=list)

    def block(self, spec_or_key) -> dict:
        if isinstance(spec_or_key, str):
            return self.blocks[spec_or_key]
        for k in self.order:
            if self.blocks[k]["plan"] == spec_or_key.to_json():
                return self.blocks[k]
        raise KeyError(spec_or_key)

    def mean(self, spec_or_key, metric: str) -> float:
        return self.block(spec_or_key)["aggregates"][metric]["mean"]

    def to_json(self) -> dict:
        return {"config": self.config, "order": self.order, "blocks": {k: self.blocks[k] for k in self.order}}

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(_clean(self.to_json()), sort_keys=True, indent=1))
        if csv_path is not None:
            write_rows_csv(csv_path, self)


def _clean(obj):
    """NaN -> None so the JSON is standard."""
    if isinstance(obj, float):
        return None if not np.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


ROW_METRICS = ("tep", "e_sim", "s_sim", "wer", "rho", "hit")


def aggregate(rows: Sequence[dict]) -> dict:
    """Mean / population std / count per metric over non-failed rows with a value."""
    out = {}
    ok = [r for r in rows if not r.get("failed")]
    for m in ROW_METRICS:
        vals = np.array([r[m] for r in ok if r.get(m) is not None and np.isfinite(r[m])], dtype=float)
        if len(vals):
            out[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "count": int(len(vals))}
    levels = sorted({r["mismatch"] for r in ok if r.get("mismatch")})
    for lv in levels:
        vals = np.array([r["e_sim"] for r in ok if r.get("mismatch") == lv and r.get("e_sim") is not None])
        if len(vals):
            out[f"e_sim@{lv}"] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "count": int(len(vals))}
    out["failed"] = {"mean": float("nan"), "std": float("nan"), "count": sum(1 for r in rows if r.get("failed"))}
    return out


def evaluate_run(model, specs: Sequence[PlanSpec], samples: Sequence[EvalSample],
                 vectors: Mapping[tuple[str, HookSite], SteeringVector], classifier: ReferenceClassifier,
                 emotions: EmotionSet, config: MetricsConfig = MetricsConfig(),
                 speaker_embedder: SpeakerEmbedder | None = None, snapshot: Mapping | None = None) -> EvalReport:
    """Generate every sample under every spec (plus the baseline) and score it.

    Mixed-emotion rows carry ``rho``: Spearman between the consensus weights
    and the steered-minus-baseline classifier probabilities over the
    non-neutral emotions, and ``hit``: whether the dominant emotion got the
    largest relative increase.
    """
    if not samples:
        raise InputError("empty evaluation set")
    specs = list(specs)
    if not any(s.mode == NONE for s in specs):
        specs.insert(0, PlanSpec())
    specs.sort(key=lambda s: s.mode != NONE)
    transcripts = [s.transcript for s in samples]
    conditions = [s.condition for s in samples]
    baseline_probs = None
    blocks, order = {}, []
    for spec in specs:
        key = spec.key(vectors)
        if key in blocks:
            continue
        plans, fail = [], {}
        for i, s in enumerate(samples):
            try:
                plans.append(spec.resolve(s, vectors, emotions))
            except (EmosteerError, ValueError) as err:
                fail[i] = str(err)
                plans.append(NO_STEER)
        outs = generate_batch(model, transcripts, conditions, plans, seed=config.seed,
                              temperature=config.temperature, batch_size=config.batch_size, top_p=config.top_p)
        probs = classifier.predict_proba(outs)
        emb = classifier.embed(outs)
        if spec.mode == NONE:
            baseline_probs = probs
        rows = []
        hr_samples = []
        for i, (s, out) in enumerate(zip(samples, outs)):
            row = {"id": s.id, "speaker": s.speaker, "truncated": out.truncated,
                   "tokens": list(out.tokens)}
            if i in fail:
                row.update(failed=True, error=fail[i])
                rows.append(row)
                continue
            try:
                target = s.target_index(emotions) if (s.target is not None or s.weights is not None) else None
                row["target"] = emotions[target].name if target is not None else None
                row["tep"] = float(probs[i, target]) if target is not None else None
                row["wer"] = wer(s.transcript, out.content)
                if s.reference_prosody is not None:
                    ref_emb = classifier.embed([s.reference_prosody])[0]
                    row["e_sim"] = cosine(emb[i], ref_emb)
                if speaker_embedder is not None and s.reference_transcript is not None and out.content:
                    se = speaker_embedder.embed([out.content, s.reference_transcript])
                    row["s_sim"] = cosine(se[0], se[1])
                if s.text_va is not None and s.audio_va is not None:
                    row["mismatch"] = mismatch_level(s.text_va, s.audio_va).tag
                if s.weights is not None and baseline_probs is not None and spec.mode != NONE:
                    w = MixWeights.from_distribution(s.weights).weights
                    idx = [emotions[n].index for n in w.names]
                    delta = probs[i, idx] - baseline_probs[i, idx]
                    try:
                        row["rho"] = spearman(w.as_array(), delta)
                    except EmosteerError:
                        row["rho"] = None
                    hr = h_rate([(w.as_array(), baseline_probs[i, idx], probs[i, idx])], config.h_rate_eps,
                                config.h_rate_mode)
                    row["hit"] = hr
                    hr_samples.append(hr)
                row["probs"] = [float(x) for x in probs[i]]
            except EmosteerError as err:
                row.update(failed=True, error=str(err))
            rows.append(row)
        blocks[key] = {"plan": spec.to_json(), "label": spec.label, "rows": rows, "aggregates": aggregate(rows)}
        order.append(key)
    snap = {"metrics": asdict(config), "n_samples": len(samples),
            "classifier_heldout_accuracy": classifier.heldout_accuracy}
    if snapshot:
        snap.update(snapshot)
    return EvalReport(blocks, snap, order)


def write_rows_csv(path: str | Path, report: EvalReport) -> None:
    cols = ["plan_key", "label", "id", "speaker", "target", *ROW_METRICS, "mismatch", "truncated", "failed"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for k in report.order:
            b = report.blocks[k]
            for r in b["rows"]:
                vals = [k, b["label"]] + [r.get(c) for c in cols[2:]]
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in vals])
