"""``emosteer`` command line: gen-data, train, scan, extract, steer, eval, diagnose, select, report.

All commands share one working directory (``[paths] workdir``) and write
files whose names depend only on the command, mode, plan hash and seed, so
rerunning a command with the same config overwrites its outputs with
identical bytes. Errors exit nonzero with a single ``emosteer: error[kind]:``
line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from emosteer import __version__
from emosteer.config import RunConfig, dump_config, load_config
from emosteer.errors import EmosteerError, InputError, IntegrityError, SelectionError
from emosteer.evaluation.classifier import ReferenceClassifier, SpeakerEmbedder
from emosteer.evaluation.run import (
    DOMINANT,
    MIXED,
    SINGLE,
    MetricsConfig,
    PlanSpec,
    evaluate_run,
    mixed_eval_set,
    single_eval_set,
    vector_index,
)
from emosteer.instrumentation import HookSite, capture_tables, list_sites
from emosteer.pipeline import Split, extract_all, rank_sites, sweep, site_gains, split_corpus
from emosteer.probing import (
    ProbeHyper,
    SweepRow,
    probe_steer_correlation,
    read_scan,
    scan_tables,
    select_sites,
    write_scan,
    write_selection,
)
from emosteer.steering import STABLE_ALPHA, MixWeights, make_plan, mix_vectors, read_vectors, write_vectors
from emosteer.testbed.checkpoint import load_checkpoint, save_checkpoint
from emosteer.testbed.corpus import (
    CorpusSpec,
    build_mixed_eval_set,
    build_synthetic_corpus,
    read_corpus,
    read_corpus_meta,
    write_corpus,
)
from emosteer.testbed.diagnostic import FLOW_DRIVEN, METRICS, SLM_DRIVEN, DiagnosticSettings, cross_condition_diagnose
from emosteer.testbed.model import ModelConfig
from emosteer.testbed.toy import TrainConfig, generate_batch, train_toy_model

log = logging.getLogger("emosteer")

EXIT_OK, EXIT_INPUT, EXIT_INTEGRITY, EXIT_SELECTION, EXIT_TRAINING = 0, 2, 3, 4, 5

CORPUS = "corpus.jsonl"
CHECKPOINT = "model.bin"
CLASSIFIER = "classifier.json"
SCAN_CSV, SCAN_JSON = "scan.csv", "scan.json"
VECTORS = "vectors.json"
SELECTION, SWEEP, GAINS = "selection.json", "sweep.json", "gains.json"
DIAGNOSTIC = "diagnostic.json"
REPORT_DIR = "report"


class Context:
    """Config + lazily loaded artifacts of one working directory."""

    def __init__(self, config: RunConfig, jobs: int = 1):
        self.config = config
        self.jobs = jobs
        self.dir = config.workdir
        self._corpus = None

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise InputError(f"{p} not found; run `emosteer {producer}` first")
        return p

    def meta(self, command: str, **extra) -> dict:
        return {"tool": "emosteer", "version": __version__, "command": command,
                "config": self.config.snapshot(), **extra}

    def corpus_spec(self) -> CorpusSpec:
        tb = self.config.testbed
        return CorpusSpec(emotions=tb.emotions, num_speakers=tb.num_speakers,
                          transcripts_per_speaker=tb.transcripts_per_speaker, content_vocab=tb.content_vocab,
                          prosody_vocab=tb.prosody_vocab, transcript_length=tb.transcript_length,
                          num_raters=tb.num_raters, rater_agreement=tb.rater_agreement,
                          lexical_mass=tb.lexical_mass, rng_seed=tb.seed)

    def corpus(self):
        """Corpus rebuilt from its stored spec (for the generating tables) and checked against the file."""
        if self._corpus is None:
            path = self.require(CORPUS, "gen-data")
            meta = read_corpus_meta(path)
            if "corpus_spec" not in meta:
                raise IntegrityError(f"{path}: missing corpus spec header")
            corpus = build_synthetic_corpus(CorpusSpec.from_snapshot(meta["corpus_spec"]))
            on_disk = read_corpus(path, corpus.emotions)
            if [u.to_json() for u in on_disk] != [u.to_json() for u in corpus.utterances]:
                raise IntegrityError(f"{path}: utterances do not match the stored corpus spec")
            self._corpus = corpus
        return self._corpus

    def split(self) -> Split:
        return split_corpus(self.corpus().utterances, self.config.testbed.seed)

    def model(self):
        return load_checkpoint(self.require(CHECKPOINT, "train"))

    def classifier(self, model) -> ReferenceClassifier:
        """Reference classifier on the training speakers' ground truth; trained once and cached."""
        p = self.path(CLASSIFIER)
        if p.exists():
            return ReferenceClassifier.load(p)
        split = self.split()
        clf = ReferenceClassifier.fit_utterances(split.train, model.vocab, model.config.num_emotions,
                                                 seed=self.config.train.seed,
                                                 min_accuracy=self.config.evaluation.min_classifier_accuracy)
        clf.meta.update(self.meta("classifier"))
        clf.save(p)
        return clf

    def vectors(self):
        return read_vectors(self.require(VECTORS, "extract"))

    def chosen_sites(self, override: str | None = None) -> tuple[HookSite, ...]:
        if override:
            return tuple(HookSite.parse(s) for s in override.split(","))
        sel = json.loads(self.require(SELECTION, "select").read_text())["selection"]
        return tuple(HookSite.parse(s) for s in sel["chosen"])

    def metrics_config(self, seed: int | None = None) -> MetricsConfig:
        ev = self.config.evaluation
        return MetricsConfig(temperature=ev.temperature, top_p=ev.top_p, seed=ev.seed if seed is None else seed,
                             h_rate_eps=ev.h_rate_eps, h_rate_mode=ev.h_rate_mode)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _plan_hash(specs, vectors=None) -> str:
    keys = [s.key(vectors) for s in specs]
    return hashlib.sha256("|".join(keys).encode()).hexdigest()[:10]


def _out(text: str = "") -> None:
    print(text, flush=True)


# ---------------------------------------------------------------- commands


def cmd_gen_data(ctx: Context, args) -> int:
    spec = ctx.corpus_spec()
    corpus = build_synthetic_corpus(spec)
    path = ctx.path(CORPUS)
    write_corpus(path, corpus.utterances, ctx.meta("gen-data", corpus_spec=spec.snapshot()))
    counts = {e.name: sum(u.emotion == e for u in corpus.utterances) for e in corpus.emotions}
    _out(f"wrote {len(corpus.utterances)} utterances to {path}")
    _out(f"speakers={spec.num_speakers} transcripts/speaker={spec.transcripts_per_speaker} "
         f"emotions={len(corpus.emotions)}")
    _out("per emotion: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(ctx: Context, args) -> int:
    split = ctx.split()
    c, m, t = ctx.config.testbed, ctx.config.model, ctx.config.train
    mc = ModelConfig(n_layers=m.n_layers, d_model=m.d_model, n_heads=m.n_heads, d_mlp=m.d_mlp,
                     content_vocab=c.content_vocab, prosody_vocab=c.prosody_vocab, num_emotions=len(c.emotions),
                     max_len=max(64, 3 * c.transcript_length + 8), fused_qkv=m.fused_qkv,
                     condition_bottleneck=m.condition_bottleneck)
    tc = TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, seed=t.seed, max_wer=t.max_wer,
                     min_classifier_accuracy=t.min_classifier_accuracy)
    model = train_toy_model(split.train, mc, tc, heldout=split.test)
    save_checkpoint(model, ctx.path(CHECKPOINT), ctx.meta("train"))
    stale = ctx.path(CLASSIFIER)
    if stale.exists():
        stale.unlink()
    h = model.history
    _out(f"trained {mc.n_layers}-layer model on {len(split.train)} utterances: final loss {h['final_loss']:.4f}")
    _out(f"held-out copy WER {h['wer']:.4f}, reference-classifier accuracy {h['classifier_accuracy']:.4f}")
    return EXIT_OK


def cmd_scan(ctx: Context, args) -> int:
    model = ctx.model()
    split = ctx.split()
    sites = list_sites(model)
    tables = capture_tables(model, split.probe_pool, sites)
    p = ctx.config.probing
    scores, skipped = scan_tables(tables, model.config.num_emotions, p.split_seed,
                                  ProbeHyper(p.steps, p.lr, p.l2), jobs=ctx.jobs)
    meta = ctx.meta("scan", skipped=skipped, n_sites=len(sites))
    write_scan(ctx.path(SCAN_CSV), scores, meta)
    write_scan(ctx.path(SCAN_JSON), scores, meta)
    _out(f"scanned {len(scores)} sites ({len(skipped)} skipped); top 10:")
    for s in scores[:10]:
        _out(f"  {str(s.site):28s} {s.accuracy:.4f}  (train {s.n_train}, val {s.n_val})")
    return EXIT_OK


def cmd_extract(ctx: Context, args) -> int:
    model = ctx.model()
    corpus = ctx.corpus()
    split = ctx.split()
    if args.sites:
        sites = [HookSite.parse(s) for s in args.sites.split(",")]
    else:
        sites = [s.site for s in sorted(read_scan(ctx.require(SCAN_JSON, "scan")), key=lambda s: s.site)]
    for s in sites:
        s.validate(model)
    emotions = corpus.emotions
    if args.emotion:
        target = emotions[args.emotion]
        if target.index == 0:
            raise InputError("cannot extract a vector for neutral")
    tables = capture_tables(model, split.probe_pool, sites)
    vectors = extract_all(tables, split.probe_pool, emotions, sites)
    if args.emotion:
        vectors = [v for v in vectors if v.label == args.emotion]
    if not vectors:
        raise InputError("no vectors extracted (empty pairing for every emotion)")
    write_vectors(ctx.path(VECTORS), vectors, ctx.meta("extract", sites=[str(s) for s in sites]))
    _out(f"extracted {len(vectors)} vectors at {len(sites)} sites")
    for v in vectors:
        if v.site == sites[0] or len(sites) <= 3:
            _out(f"  {v.label:10s} {str(v.site):28s} norm {v.norm:.4f}  pairs {v.n_emotional}/{v.n_neutral}")
    zero = sorted({str(v.site) for v in vectors if v.norm == 0})
    if zero:
        # the condition token does not reach these sites at the capture position
        warnings.warn(f"zero-norm vectors at {len(zero)} site(s): {', '.join(zero)}", UserWarning, stacklevel=1)
    norms = np.array([v.norm for v in vectors])
    _out(f"norms: min {norms.min():.4f} median {np.median(norms):.4f} max {norms.max():.4f}")
    return EXIT_OK


def _steer_samples(split: Split, limit: int) -> list:
    neutral = sorted((u for u in split.test if u.emotion.index == 0), key=lambda u: u.id)[:limit]
    return neutral


def cmd_steer(ctx: Context, args) -> int:
    if bool(args.emotion) == bool(args.mix):
        raise InputError("give exactly one of --emotion or --mix")
    corpus = ctx.corpus()
    emotions = corpus.emotions
    if args.mix:
        weights = MixWeights.parse(args.mix)
        unknown = [n for n in weights.weights.names if n not in emotions.names]
        if unknown:
            raise InputError(f"unknown emotions in --mix: {unknown}")
        names = list(weights.weights.names)
        mode, tag = MIXED, "mix"
    else:
        if emotions[args.emotion].index == 0:
            raise InputError("steering toward neutral is the zero direction; pick another emotion")
        names, weights = [args.emotion], None
        mode, tag = SINGLE, args.emotion
    alpha = float(args.alpha)
    if alpha < 0:
        raise InputError(f"alpha must be >= 0, got {alpha}")
    model = ctx.model()
    sites = ctx.chosen_sites(args.sites)
    index = vector_index(ctx.vectors())
    chosen = []
    for site in sites:
        vs = []
        for n in names:
            if (n, site) not in index:
                raise InputError(f"no {n} vector at {site}; rerun extract for this site")
            vs.append(index[(n, site)])
        chosen.append(mix_vectors(vs, weights) if weights is not None else vs[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan = make_plan(chosen, alpha, ctx.config.steering.position_policy, model=model, label=tag)
    if not STABLE_ALPHA[0] <= alpha <= STABLE_ALPHA[1]:
        _out(f"note: alpha {alpha:g} is above the stable operating range {list(STABLE_ALPHA)}")
    prompts = _steer_samples(ctx.split(), ctx.config.steering.eval_limit)
    ev = ctx.config.evaluation
    outs = generate_batch(model, [u.transcript for u in prompts], [0] * len(prompts), plan, seed=ev.seed,
                          temperature=ev.temperature, top_p=ev.top_p)
    spec = PlanSpec(mode, alpha, sites, ctx.config.steering.position_policy, ev.seed)
    name = f"steer_{mode}-{tag}_{plan.hash()[:10]}_s{ev.seed}.jsonl"
    path = ctx.path(name)
    meta = ctx.meta("steer", plan=plan.to_json(), spec=spec.to_json(), flags=list(plan.flags),
                    mix=weights.weights.as_dict() if weights else None)
    with open(path, "w") as fh:
        fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for u, o in zip(prompts, outs):
            fh.write(json.dumps({"id": u.id, "speaker": u.speaker, "transcript": list(u.transcript),
                                 "tokens": list(o.tokens), "content": list(o.content),
                                 "prosody": list(o.prosody), "truncated": o.truncated}, sort_keys=True) + "\n")
    _out(f"wrote {len(outs)} steered outputs to {path}")
    return EXIT_OK


def _strata(report, emotions) -> dict:
    """Per plan block, per mismatch level: N and mean TEP / E-SIM / WER."""
    out = {}
    for key in report.order:
        block = report.blocks[key]
        rows = [r for r in block["rows"] if not r.get("failed")]
        levels = {}
        for lv in ("low", "mid", "high"):
            sel = [r for r in rows if r.get("mismatch") == lv]
            levels[lv] = {"n": len(sel)}
            for m in ("tep", "e_sim", "wer"):
                vals = [r[m] for r in sel if r.get(m) is not None]
                levels[lv][m] = float(np.mean(vals)) if vals else None
        if sum(v["n"] for v in levels.values()) != len(rows):
            raise InputError("mismatch mode needs valence-arousal annotations on every sample")
        out[key] = {"label": block["label"], "levels": levels}
    return out


def cmd_eval(ctx: Context, args) -> int:
    corpus = ctx.corpus()
    emotions = corpus.emotions
    split = ctx.split()
    model = ctx.model()
    clf = ctx.classifier(model)
    sites = ctx.chosen_sites(args.sites)
    vectors = vector_index(ctx.vectors())
    ev = ctx.config.evaluation
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(ev.alphas)
    pp = ctx.config.steering.position_policy
    if args.mode == "mixed":
        samples = mixed_eval_set(build_mixed_eval_set(corpus, split.test, seed=ev.mixed_seed), emotions)
        if not samples:
            raise InputError("mixed evaluation needs samples with rater labels; none found")
        specs = [PlanSpec(m, a, sites, pp, ev.seed) for a in alphas for m in (MIXED, DOMINANT)]
    else:
        samples = single_eval_set(split.test, emotions, limit=ctx.config.steering.eval_limit)
        specs = [PlanSpec(SINGLE, a, sites, pp, ev.seed) for a in alphas]
    speaker = SpeakerEmbedder.fit(split.train + split.test, corpus.spec.content_vocab) if ev.s_sim else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = evaluate_run(model, specs, samples, vectors, clf, emotions, ctx.metrics_config(),
                              speaker_embedder=speaker, snapshot=ctx.meta("eval", mode=args.mode))
    seed_tag = f"s{ev.seed}-m{ev.mixed_seed}" if args.mode == "mixed" else f"s{ev.seed}"
    stem = f"eval_{args.mode}_{_plan_hash(specs, vectors)}_{seed_tag}"
    if args.mode == "mismatch":
        strata = _strata(report, emotions)
        report.config["strata"] = strata
    report.write(ctx.path(stem + ".json"), ctx.path(stem + ".csv"))
    metrics = ["tep", "e_sim", "s_sim", "wer"] + (["rho", "hit"] if args.mode == "mixed" else [])
    _out(f"{args.mode} evaluation on {len(samples)} samples -> {stem}.json")
    _out("  " + f"{'plan':50s}" + "".join(f"{m:>9s}" for m in metrics))
    for key in report.order:
        agg = report.blocks[key]["aggregates"]
        vals = "".join(f"{agg[m]['mean']:9.4f}" if m in agg else f"{'-':>9s}" for m in metrics)
        _out(f"  {report.blocks[key]['label'][:50]:50s}{vals}")
    if args.mode == "mismatch":
        for key in report.order:
            lv = strata[key]["levels"]
            _out(f"  {strata[key]['label'][:50]:50s} " + " ".join(
                f"{k}: n={v['n']} tep={_fmt(v.get('tep'))}" for k, v in lv.items()))
    return EXIT_OK


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def cmd_diagnose(ctx: Context, args) -> int:
    model = ctx.model()
    split = ctx.split()
    d = ctx.config.diagnostic
    settings = DiagnosticSettings(d.lambda_render, d.frames, d.max_groups, ctx.config.evaluation.seed,
                                  ctx.config.evaluation.temperature)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = cross_condition_diagnose(model, split.test, settings)
    doc = report.to_json()
    doc["meta"] = ctx.meta("diagnose")
    _write_json(ctx.path(DIAGNOSTIC), _finite(doc))
    _out(f"cross-conditioning diagnostic over {len(report.groups)} groups (lambda_render={d.lambda_render})")
    _out(f"  {'condition':12s}" + "".join(f"{m:>22s}" for m in METRICS))
    for mode in (SLM_DRIVEN, FLOW_DRIVEN):
        cells = "".join(f"{report.aggregate[mode][m]['mean']:>12.4f} ± {report.aggregate[mode][m]['std']:<7.4f}"
                        for m in METRICS)
        _out(f"  {mode:12s}{cells}  N={report.aggregate[mode]['f0_ccc']['count']}")
    return EXIT_OK


def _finite(obj):
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def cmd_select(ctx: Context, args) -> int:
    model = ctx.model()
    corpus = ctx.corpus()
    split = ctx.split()
    clf = ctx.classifier(model)
    vectors = ctx.vectors()
    st = ctx.config.steering
    scores = read_scan(ctx.require(SCAN_JSON, "scan"))
    sites = sorted({v.site for v in vectors})
    samples = single_eval_set(split.test, corpus.emotions, limit=st.eval_limit)
    mc = ctx.metrics_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base, gains = site_gains(model, sites, samples, vectors, clf, corpus.emotions, st.rank_alpha, mc,
                                 st.position_policy)
        configs = rank_sites(gains, base["wer"], st.wer_budget, st.max_k)
        baseline_wer, rows = sweep(model, configs, st.sweep, samples, vectors, clf, corpus.emotions, mc,
                                     st.position_policy)
    gain_map = {g.site: g.gain for g in gains}
    try:
        rho = probe_steer_correlation(scores, gain_map)
    except EmosteerError:
        rho = None
    _write_json(ctx.path(GAINS), {"meta": ctx.meta("select"), "baseline": base, "rank_alpha": st.rank_alpha,
                                  "probe_steer_spearman": rho, "gains": [g.to_json() for g in gains]})
    _write_json(ctx.path(SWEEP), {"meta": ctx.meta("select"), "baseline_wer": baseline_wer,
                                  "rows": [r.to_json() for r in rows]})
    try:
        selection = select_sites(rows, baseline_wer, st.wer_budget, st.sweep)
    except SelectionError as err:
        raise SelectionError(f"{err}; closest candidate {json.dumps(err.closest, sort_keys=True)}",
                             err.closest) from None
    write_selection(ctx.path(SELECTION), selection, ctx.meta("select", probe_steer_spearman=rho))
    _out(f"baseline WER {baseline_wer:.4f}, budget +{st.wer_budget}; probe/steer Spearman {rho}")
    _out(f"  {'K':>2s}  {'sites':60s} {'alpha_max':>9s} {'control':>8s} {'WER':>7s}")
    for c in sorted(selection.considered, key=lambda c: len(c.sites)):
        mark = "*" if c.sites == selection.chosen else " "
        _out(f"{mark} {len(c.sites):2d}  {','.join(map(str, c.sites))[:60]:60s} {c.alpha_max:9.1f} "
             f"{c.control:8.4f} {c.wer_at_alpha_max:7.4f}")
    for r in selection.rejected:
        _out(f"  rejected (over budget at the smallest alpha): {r}")
    _out("chosen: " + ",".join(map(str, selection.chosen)))
    return EXIT_OK


def cmd_report(ctx: Context, args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = ctx.path(REPORT_DIR)
    out.mkdir(exist_ok=True)
    summary = {"meta": ctx.meta("report")}
    written = []
    save = {"metadata": {"Software": None}}

    scan_path = ctx.path(SCAN_JSON)
    if scan_path.exists():
        scores = read_scan(scan_path)
        model_ops = ctx.model().config.operators
        layers = max(s.site.layer for s in scores)
        grid = np.full((layers, len(model_ops)), np.nan)
        for s in scores:
            grid[s.site.layer - 1, model_ops.index(s.site.operator)] = s.accuracy
        fig, ax = plt.subplots(figsize=(9, 4.5))
        im = ax.imshow(grid.T, aspect="auto", cmap="viridis", vmin=0, vmax=1, origin="lower")
        ax.set_xticks(range(layers), [str(i + 1) for i in range(layers)])
        ax.set_yticks(range(len(model_ops)), model_ops, fontsize=7)
        ax.set_xlabel("layer")
        ax.set_title("probe accuracy per site")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(out / "scan_heatmap.png", **save)
        plt.close(fig)
        written.append("scan_heatmap.png")
        best = scores[0]
        summary["scan"] = {"best_site": str(best.site), "best_accuracy": best.accuracy,
                           "n_sites": len(scores)}

    sweep_path = ctx.path(SWEEP)
    if sweep_path.exists():
        doc = json.loads(sweep_path.read_text())
        rows = [SweepRow.from_json(r) for r in doc["rows"]]
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
        configs = sorted({r.sites for r in rows}, key=len)
        for sites in configs:
            rs = sorted((r for r in rows if r.sites == sites), key=lambda r: r.alpha)
            lab = f"K={len(sites)}"
            a1.plot([r.alpha for r in rs], [r.tep for r in rs], marker="o", ms=3, label=lab)
            a2.plot([r.alpha for r in rs], [r.wer for r in rs], marker="o", ms=3, label=lab)
        a1.set_xlabel("alpha")
        a1.set_ylabel("mean TEP")
        a2.set_xlabel("alpha")
        a2.set_ylabel("mean WER")
        a2.axhline(doc["baseline_wer"], color="k", lw=0.8, ls="--")
        a1.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "alpha_sweep.png", **save)
        plt.close(fig)
        written.append("alpha_sweep.png")

    for name, key in ((SELECTION, "selection"), (DIAGNOSTIC, "diagnostic"), (GAINS, "gains")):
        p = ctx.path(name)
        if p.exists():
            d = json.loads(p.read_text())
            d.pop("meta", None)
            if key == "gains":
                d = {"probe_steer_spearman": d["probe_steer_spearman"], "baseline": d["baseline"]}
            elif key == "diagnostic":
                d = d["aggregate"]
            summary[key] = d.get("selection", d)
    evals = sorted(p.name for p in ctx.dir.glob("eval_*.json"))
    summary["eval"] = {}
    for name in evals:
        d = json.loads(ctx.path(name).read_text())
        summary["eval"][name] = {d["blocks"][k]["label"]: {m: v["mean"] for m, v in
                                                           d["blocks"][k]["aggregates"].items() if m != "failed"}
                                 for k in d["order"]}
    if not written and len(summary) == 2 and not evals:
        raise InputError(f"nothing to report in {ctx.dir}; run scan/select/eval first")
    _write_json(out / "summary.json", summary)
    _out(f"report written to {out}: {', '.join(written + ['summary.json'])}")
    return EXIT_OK


def cmd_config(ctx: Context, args) -> int:
    """Print the effective configuration as INI."""
    sys.stdout.write(dump_config(ctx.config))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "scan": cmd_scan,
    "extract": cmd_extract,
    "steer": cmd_steer,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "select": cmd_select,
    "report": cmd_report,
    "config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")
    common.add_argument("--workdir", help="working directory (overrides [paths] workdir)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for scans and decoding")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emosteer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"emosteer {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="sample the synthetic parallel corpus")
    sub.add_parser("train", parents=[common], help="train the toy token model")
    sub.add_parser("scan", parents=[common], help="probe every hook site")
    s = sub.add_parser("extract", parents=[common], help="mean-difference steering vectors")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--emotion")
    g.add_argument("--all", action="store_true", help="every non-neutral emotion (default)")
    s.add_argument("--sites", help="comma-separated sites (default: every scanned site)")
    s = sub.add_parser("steer", parents=[common], help="generate steered outputs")
    s.add_argument("--emotion")
    s.add_argument("--mix", help='weights, e.g. "happy=0.667,sad=0.333"')
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--sites", help="comma-separated sites (default: the selection)")
    s = sub.add_parser("eval", parents=[common], help="evaluate steering on an eval set")
    s.add_argument("--mode", choices=("single", "mixed", "mismatch"), default="single")
    s.add_argument("--alphas", help="comma-separated alphas (default: [evaluation] alphas)")
    s.add_argument("--sites", help="comma-separated sites (default: the selection)")
    sub.add_parser("diagnose", parents=[common], help="cross-conditioning diagnostic")
    sub.add_parser("select", parents=[common], help="WER-constrained site selection with the alpha sweep")
    sub.add_parser("report", parents=[common], help="figures and a JSON summary of the run")
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.workdir:
            overrides.append(f"paths.workdir={args.workdir}")
        config = load_config(args.config, overrides)
        if args.jobs < 1:
            raise InputError("--jobs must be >= 1")
        torch.set_num_threads(args.jobs)
        ctx = Context(config, args.jobs)
        ctx.dir.mkdir(parents=True, exist_ok=True)
        with FileLock(str(ctx.dir / ".emosteer.lock")):
            return COMMANDS[args.command](ctx, args)
    except (EmosteerError, ValueError, KeyError, OSError, json.JSONDecodeError) as err:
        code, kind = (err.exit_code, err.tag) if isinstance(err, EmosteerError) else (EXIT_INPUT, "input-error")
        msg = str(err).replace("\n", " ")
        print(f"emosteer: error[{kind}]: {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
