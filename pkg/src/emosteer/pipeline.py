"""End-to-end toy pipeline: data split, probing scan, vectors, per-site gains and the alpha sweep.

The CLI commands and the acceptance suite both go through these functions,
so a run from the command line and a run from Python see the same numbers.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from emosteer.errors import EmptyPairingError
from emosteer.evaluation.classifier import ReferenceClassifier
from emosteer.evaluation.run import SINGLE, EvalSample, MetricsConfig, PlanSpec, evaluate_run, vector_index
from emosteer.instrumentation import PER_STEP, ActivationTable, HookSite, capture_tables
from emosteer.probing import SweepRow, topk_configurations, within_budget
from emosteer.steering import SteeringVector, build_pairs, extract_vector
from emosteer.testbed.corpus import EmotionSet, Utterance, select_speakers, split_speakers

log = logging.getLogger(__name__)

DEFAULT_SWEEP = tuple(float(a) for a in np.arange(0.5, 7.01, 0.5))
RANK_ALPHA = 3.0


@dataclass(frozen=True)
class Split:
    train: list[Utterance]
    val: list[Utterance]
    test: list[Utterance]

    @property
    def probe_pool(self) -> list[Utterance]:
        """Probes and vectors use train + val; test speakers are kept for evaluation."""
        return self.train + self.val


def split_corpus(utterances: Sequence[Utterance], seed: int = 0) -> Split:
    sp = split_speakers({u.speaker for u in utterances}, seed)
    return Split(select_speakers(utterances, sp["train"]), select_speakers(utterances, sp["val"]),
                 select_speakers(utterances, sp["test"]))


def extract_all(tables: Mapping[HookSite, ActivationTable], utterances: Sequence[Utterance],
                emotions: EmotionSet, sites: Sequence[HookSite] | None = None) -> list[SteeringVector]:
    """One vector per (non-neutral emotion, site), sites in the given order."""
    sites = list(sites) if sites is not None else list(tables)
    out = []
    for e in emotions.non_neutral:
        try:
            pairs = build_pairs(utterances, e)
        except EmptyPairingError:
            log.warning("no pairs for %s; skipped", e.name)
            continue
        for s in sites:
            out.append(extract_vector(tables[s], pairs))
    return out


def capture_and_extract(model, utterances, emotions, sites) -> list[SteeringVector]:
    return extract_all(capture_tables(model, utterances, sites), utterances, emotions, sites)


@dataclass(frozen=True)
class SiteGain:
    site: HookSite
    tep: float
    wer: float
    gain: float

    def to_json(self) -> dict:
        return {"site": str(self.site), "tep": self.tep, "wer": self.wer, "gain": self.gain}


def site_gains(model, sites: Sequence[HookSite], samples: Sequence[EvalSample], vectors: Sequence[SteeringVector],
               classifier: ReferenceClassifier, emotions: EmotionSet, alpha: float = RANK_ALPHA,
               config: MetricsConfig = MetricsConfig(),
               position_policy: str = PER_STEP) -> tuple[dict, list[SiteGain]]:
    """Single-emotion steering at each site alone; gain = mean TEP(alpha) - mean TEP(no steer)."""
    index = vector_index(vectors)
    specs = [PlanSpec(SINGLE, alpha, (s,), position_policy) for s in sites]
    report = evaluate_run(model, specs, samples, index, classifier, emotions, config)
    base_key = report.order[0]
    base = {"tep": report.mean(base_key, "tep"), "wer": report.mean(base_key, "wer")}
    gains = []
    for s, spec in zip(sites, specs):
        t, w = report.mean(spec, "tep"), report.mean(spec, "wer")
        gains.append(SiteGain(s, t, w, t - base["tep"]))
    return base, gains


def rank_sites(gains: Sequence[SiteGain], baseline_wer: float, wer_budget: float,
               max_k: int = 5) -> list[tuple[HookSite, ...]]:
    """Nested top-K configurations over the sites that stay within the WER budget at the ranking alpha.

    A site that breaks intelligibility on its own cannot be part of a usable
    configuration, so it is not ranked.
    """
    ok = {g.site: g.gain for g in gains if g.wer <= baseline_wer + wer_budget}
    if not ok:
        ok = {g.site: g.gain for g in gains}
    return topk_configurations(ok, max_k)


def sweep(model, configs: Sequence[tuple[HookSite, ...]], alphas: Sequence[float], samples: Sequence[EvalSample],
          vectors: Sequence[SteeringVector], classifier: ReferenceClassifier, emotions: EmotionSet,
          config: MetricsConfig = MetricsConfig(), position_policy: str = PER_STEP) -> tuple[float, list[SweepRow]]:
    """Baseline WER and one :class:`SweepRow` per (configuration, alpha)."""
    index = vector_index(vectors)
    specs = [PlanSpec(SINGLE, float(a), tuple(c), position_policy) for c in configs for a in alphas]
    report = evaluate_run(model, specs, samples, index, classifier, emotions, config)
    baseline_wer = report.mean(report.order[0], "wer")
    rows = [SweepRow(s.sites, s.alpha, report.mean(s, "tep"), report.mean(s, "e_sim"), report.mean(s, "wer"))
            for s in specs]
    return baseline_wer, rows


def recheck_selection(selection: dict, rows: Sequence[SweepRow], baseline_wer: float) -> bool:
    """Brute-force check of a selection record against the raw sweep rows.

    The chosen configuration's rows at every alpha up to ``alpha_max`` must be
    within budget, and no other configuration may have a larger usable prefix.
    """
    budget = selection["wer_budget"]
    grid = sorted(selection["alpha_grid"])
    chosen = tuple(HookSite.parse(s) for s in selection["chosen"])
    table: dict[tuple, dict[float, SweepRow]] = {}
    for r in rows:
        table.setdefault(r.sites, {})[r.alpha] = r

    def prefix(sites):
        best = None
        for a in grid:
            if not within_budget(table[sites][a], baseline_wer, budget):
                break
            best = a
        return best

    a_max = prefix(chosen)
    if a_max is None or a_max != selection["alpha_max"]:
        return False
    return all((prefix(s) or -1.0) <= a_max for s in table)
