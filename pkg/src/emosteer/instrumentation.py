"""Hook sites, last-token capture and norm-preserving steering injection."""

from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Iterable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from emosteer.errors import DegenerateInjectionError, InputError, IntegrityError, PlanValidationError
from emosteer.testbed.corpus import Emotion, Utterance
from emosteer.testbed.model import ALL_OPERATORS

LAST_PROMPT_TOKEN = "last-prompt-token"
PER_STEP = "per-step"
POSITION_POLICIES = (LAST_PROMPT_TOKEN, PER_STEP)


@dataclass(frozen=True, order=True)
class HookSite:
    layer: int
    operator: str

    def __post_init__(self):
        if self.operator not in ALL_OPERATORS:
            raise InputError(f"unknown operator {self.operator!r}")

    def __str__(self) -> str:
        return f"L{self.layer}.{self.operator}"

    @classmethod
    def parse(cls, text: str) -> HookSite:
        """Inverse of ``str``: ``"L3.attn_output"``."""
        try:
            layer, op = text.split(".", 1)
            return cls(int(layer.lstrip("Ll")), op)
        except ValueError:
            raise InputError(f"cannot parse hook site {text!r} (expected e.g. L3.attn_output)") from None

    def validate(self, model) -> None:
        cfg = model.config
        if not 1 <= self.layer <= cfg.n_layers:
            raise InputError(f"site {self}: layer outside [1, {cfg.n_layers}]")
        if self.operator not in cfg.operators:
            variant = "fused" if cfg.fused_qkv else "separate-q/k/v"
            raise InputError(f"site {self}: operator not available on a {variant} model")


def list_sites(model) -> list[HookSite]:
    """Full layer x operator grid, ordered by layer then by position in the block."""
    cfg = model.config
    return [HookSite(layer, op) for layer in range(1, cfg.n_layers + 1) for op in cfg.operators]


def site_width(model, site: HookSite) -> int:
    return model.config.site_width(site.operator)


# ---------------------------------------------------------------- injection

def apply_injection(h, v, alpha: float, renormalize: bool = True) -> np.ndarray:
    """``h + alpha * v``, rescaled to ``||h||`` when ``renormalize``."""
    h = np.asarray(h, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if h.shape != v.shape:
        raise InputError(f"width mismatch: activation {h.shape} vs vector {v.shape}")
    if alpha < 0:
        raise InputError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return h.copy()
    out = h + alpha * v
    if renormalize:
        norm = np.linalg.norm(out)
        if norm == 0:
            raise DegenerateInjectionError("steered activation has zero norm; cannot renormalize")
        out = out * (np.linalg.norm(h) / norm)
    return out


def _inject_rows(h: torch.Tensor, delta: torch.Tensor, renormalize: bool) -> torch.Tensor:
    """Row-wise injection on ``[..., W]`` with ``delta`` broadcast; float64 internally."""
    h64 = h.double()
    out = h64 + delta
    if renormalize:
        norm = out.norm(dim=-1, keepdim=True)
        if bool((norm == 0).any()):
            raise DegenerateInjectionError("steered activation has zero norm; cannot renormalize")
        out = out * (h64.norm(dim=-1, keepdim=True) / norm)
    return out.to(h.dtype)


# ---------------------------------------------------------------- plans

@dataclass(frozen=True)
class PlanEntry:
    site: HookSite
    vector: np.ndarray
    alpha: float


@dataclass(frozen=True)
class SteeringPlan:
    entries: tuple[PlanEntry, ...] = ()
    renormalize: bool = True
    position_policy: str = PER_STEP
    flags: tuple[str, ...] = ()
    label: str = ""

    def __post_init__(self):
        sites = [e.site for e in self.entries]
        if len(set(sites)) != len(sites):
            raise PlanValidationError(f"duplicate site in plan: {sorted(map(str, sites))}")
        if self.position_policy not in POSITION_POLICIES:
            raise PlanValidationError(f"unknown position policy {self.position_policy!r}")
        for e in self.entries:
            if e.alpha < 0:
                raise PlanValidationError(f"negative alpha {e.alpha} at {e.site}")

    @property
    def sites(self) -> tuple[HookSite, ...]:
        return tuple(e.site for e in self.entries)

    def validate(self, model) -> None:
        for e in self.entries:
            e.site.validate(model)
            if e.vector.shape != (site_width(model, e.site),):
                raise PlanValidationError(
                    f"vector width {e.vector.shape} does not match site {e.site} width {site_width(model, e.site)}"
                )

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "renormalize": self.renormalize,
            "position_policy": self.position_policy,
            "flags": list(self.flags),
            "entries": [
                {"layer": e.site.layer, "operator": e.site.operator, "alpha": e.alpha,
                 "vector": [float(x) for x in e.vector]}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> SteeringPlan:
        return cls(
            entries=tuple(
                PlanEntry(HookSite(int(e["layer"]), e["operator"]), np.asarray(e["vector"], dtype=np.float64),
                          float(e["alpha"]))
                for e in data["entries"]
            ),
            renormalize=bool(data["renormalize"]),
            position_policy=data["position_policy"],
            flags=tuple(data.get("flags", ())),
            label=data.get("label", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:12]


NO_STEER = SteeringPlan(label="no-steer")


class _PlanHooks:
    """Registers injection hooks for a batch whose rows may carry different plans."""

    def __init__(self, model, row_plans: Sequence[SteeringPlan | None]):
        self.model = model
        self.handles = []
        self.prompt_len = None
        plans = [p for p in row_plans if p is not None and p.entries]
        if not plans:
            return
        first = plans[0]
        for p in plans:
            p.validate(model)
            if set(p.sites) != set(first.sites) or p.renormalize != first.renormalize \
                    or p.position_policy != first.position_policy:
                raise PlanValidationError("plans in one batch must share sites, renormalize and position policy")
        self.renormalize = first.renormalize
        self.policy = first.position_policy
        for site in first.sites:
            width = site_width(model, site)
            deltas = torch.zeros(len(row_plans), width, dtype=torch.float64)
            for i, p in enumerate(row_plans):
                if p is None or not p.entries:
                    continue
                entry = next(e for e in p.entries if e.site == site)
                deltas[i] = entry.alpha * torch.as_tensor(entry.vector, dtype=torch.float64)
            if not bool(deltas.any()):
                # every row has zero strength: identity, skip the hook entirely
                continue
            hp = model.net.hook_point(site.layer, site.operator)
            self.handles.append(hp.register_forward_hook(self._make_hook(deltas)))

    def begin(self, prompt_len: int) -> None:
        self.prompt_len = prompt_len

    def _make_hook(self, deltas):
        def hook(module, inputs, output):
            if self.prompt_len is None:
                return None
            offset = self.model.net.position_offset
            first = self.prompt_len - 1
            last = offset + output.shape[1] if self.policy == PER_STEP else self.prompt_len
            start, stop = max(first, offset) - offset, min(last, offset + output.shape[1]) - offset
            if start >= stop:
                return None
            output = output.clone()
            output[:, start:stop] = _inject_rows(output[:, start:stop], deltas[:, None, :], self.renormalize)
            return output
        return hook

    def remove(self) -> None:
        for h in self.handles:
            h.remove()
        self.handles = []


@contextmanager
def _plan_hooks(model, row_plans):
    hooks = _PlanHooks(model, row_plans)
    try:
        yield hooks
    finally:
        hooks.remove()


class SteeredModel:
    """Generation context produced by :func:`install_plan`."""

    def __init__(self, model, plan: SteeringPlan):
        self.model = model
        self.plan = plan
        self.active = True

    def generate(self, transcripts, conditions, **kwargs):
        from emosteer.testbed.toy import generate_batch

        if not self.active:
            raise RuntimeError("steering context already closed")
        return generate_batch(self.model, transcripts, conditions, plans=self.plan, **kwargs)


@contextmanager
def install_plan(model, plan):
    """Context under which generation applies ``plan``.

    ``plan`` may also be a list of per-row plans; the low-level decoder uses
    that form and receives the hook registry, which it informs of the prompt
    length before decoding.
    """
    if isinstance(plan, SteeringPlan):
        plan.validate(model)
        ctx = SteeredModel(model, plan)
        try:
            yield ctx
        finally:
            ctx.active = False
        return
    with _plan_hooks(model, plan) as hooks:
        yield hooks


# ---------------------------------------------------------------- capture

@dataclass(frozen=True)
class ActivationRecord:
    utterance_id: str
    speaker: str
    emotion: Emotion
    site: HookSite
    vector: np.ndarray
    position_policy: str = LAST_PROMPT_TOKEN
    step: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.vector).all():
            raise IntegrityError(f"non-finite activation for {self.utterance_id} at {self.site}")


@dataclass
class ActivationTable:
    """All last-token activations at one site, one row per utterance."""

    site: HookSite
    ids: list[str]
    speakers: list[str]
    emotions: list[Emotion]
    matrix: np.ndarray
    steps: list[int | None] = field(default_factory=list)

    def records(self, policy: str = LAST_PROMPT_TOKEN) -> list[ActivationRecord]:
        steps = self.steps or [None] * len(self.ids)
        return [
            ActivationRecord(i, s, e, self.site, self.matrix[k], policy, steps[k])
            for k, (i, s, e) in enumerate(zip(self.ids, self.speakers, self.emotions))
        ]

    def row_index(self) -> dict[str, int]:
        return {uid: k for k, uid in enumerate(self.ids)}


@contextmanager
def record_activations(model, sites: Iterable[HookSite]):
    """Read-only hooks: yields a dict ``site -> list of [B, T, W] tensors`` per forward."""
    store: dict[HookSite, list[torch.Tensor]] = {}
    handles = []
    for site in sites:
        site.validate(model)
        store[site] = []

        def hook(module, inputs, output, site=site):
            store[site].append(output.detach().clone())

        handles.append(model.net.hook_point(site.layer, site.operator).register_forward_hook(hook))
    try:
        yield store
    finally:
        for h in handles:
            h.remove()


@torch.no_grad()
def capture_tables(model, utterances: Sequence[Utterance], sites: Sequence[HookSite],
                   batch_size: int = 512) -> dict[HookSite, ActivationTable]:
    """Last-prompt-token activations for every utterance at every site."""
    if not utterances:
        raise InputError("no utterances to capture")
    sites = list(sites)
    vocab = model.vocab
    rows: dict[HookSite, np.ndarray] = {
        s: np.zeros((len(utterances), site_width(model, s)), dtype=np.float32) for s in sites
    }
    groups: dict[int, list[int]] = {}
    for i, u in enumerate(utterances):
        groups.setdefault(len(u.transcript), []).append(i)
    with record_activations(model, sites) as store:
        for length in sorted(groups):
            idx = groups[length]
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                prompts = torch.tensor([vocab.prompt(utterances[i].transcript, utterances[i].emotion.index)
                                        for i in chunk])
                for s in sites:
                    store[s].clear()
                model.net(prompts)
                for s in sites:
                    act = store[s][0][:, -1]
                    if act.shape[-1] != rows[s].shape[1]:
                        raise IntegrityError(f"site {s}: captured width {act.shape[-1]} != {rows[s].shape[1]}")
                    rows[s][chunk] = act.numpy().astype(np.float32)
    ids = [u.id for u in utterances]
    speakers = [u.speaker for u in utterances]
    emotions = [u.emotion for u in utterances]
    for s in sites:
        if not np.isfinite(rows[s]).all():
            raise IntegrityError(f"non-finite activations at {s}")
    return {s: ActivationTable(s, ids, speakers, emotions, rows[s]) for s in sites}


@torch.no_grad()
def capture_activations(model, utterances: Sequence[Utterance], sites: Sequence[HookSite],
                        position_policy: str = LAST_PROMPT_TOKEN) -> list[ActivationRecord]:
    """Records ordered by utterance, then by site order (then by step for per-step)."""
    if position_policy not in POSITION_POLICIES:
        raise InputError(f"unknown position policy {position_policy!r}")
    sites = list(sites)
    for s in sites:
        s.validate(model)
    if position_policy == LAST_PROMPT_TOKEN:
        tables = capture_tables(model, utterances, sites)
        out = []
        for k in range(len(utterances)):
            for s in sites:
                t = tables[s]
                out.append(ActivationRecord(t.ids[k], t.speakers[k], t.emotions[k], s, t.matrix[k].copy()))
        return out

    from emosteer.testbed.toy import generate_batch

    vocab = model.vocab
    outputs = generate_batch(model, [u.transcript for u in utterances], [u.emotion.index for u in utterances])
    out = []
    with record_activations(model, sites) as store:
        for u, gen in zip(utterances, outputs):
            prompt = vocab.prompt(u.transcript, u.emotion.index)
            # the final token's activation never feeds a decode step
            seq = torch.tensor([prompt + list(gen.tokens[:-1])])
            for s in sites:
                store[s].clear()
            model.net(seq)
            for s in sites:
                acts = store[s][0][0, len(prompt) - 1:]
                for step, vec in enumerate(acts.numpy().astype(np.float32)):
                    out.append(ActivationRecord(u.id, u.speaker, u.emotion, s, vec, PER_STEP, step))
    return out


def tables_from_records(records: Iterable[ActivationRecord]) -> dict[HookSite, ActivationTable]:
    tables: dict[HookSite, ActivationTable] = {}
    vecs: dict[HookSite, list[np.ndarray]] = {}
    for r in records:
        t = tables.setdefault(r.site, ActivationTable(r.site, [], [], [], np.zeros((0, 0), np.float32)))
        t.ids.append(r.utterance_id)
        t.speakers.append(r.speaker)
        t.emotions.append(r.emotion)
        t.steps.append(r.step)
        vecs.setdefault(r.site, []).append(np.asarray(r.vector, dtype=np.float32))
    for s, t in tables.items():
        t.matrix = np.stack(vecs[s])
        if all(x is None for x in t.steps):
            t.steps = []
    return tables


# ---------------------------------------------------------------- activation store

_MAGIC = b"EMOACT01"


def write_activations(path: str | Path, records: Sequence[ActivationRecord]) -> None:
    """JSON-lines for ``.jsonl``, otherwise the columnar f32 binary."""
    path = Path(path)
    if path.suffix == ".jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps({
                    "utterance_id": r.utterance_id,
                    "speaker": r.speaker,
                    "emotion": r.emotion.name,
                    "emotion_index": r.emotion.index,
                    "layer": r.site.layer,
                    "operator": r.site.operator,
                    "position_policy": r.position_policy,
                    "step": r.step,
                    "vector": [float(x) for x in np.asarray(r.vector, dtype=np.float32)],
                }, sort_keys=True) + "\n")
        return
    blocks: dict[tuple, list[ActivationRecord]] = {}
    for r in records:
        blocks.setdefault((r.site, r.position_policy), []).append(r)
    header = {"format": "emosteer-activations", "version": 1, "blocks": []}
    bodies = []
    for (site, policy), rs in blocks.items():
        width = len(rs[0].vector)
        mat = np.stack([np.asarray(r.vector, dtype="<f4") for r in rs])
        if mat.shape[1] != width:
            raise IntegrityError(f"ragged widths at {site}")
        header["blocks"].append({
            "layer": site.layer, "operator": site.operator, "width": width, "count": len(rs),
            "position_policy": policy,
            "utterance_ids": [r.utterance_id for r in rs],
            "speakers": [r.speaker for r in rs],
            "emotions": [[r.emotion.index, r.emotion.name] for r in rs],
            "steps": [r.step for r in rs],
        })
        bodies.append(mat.astype("<f4").tobytes())
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in bodies:
            fh.write(b)


def read_activations(path: str | Path) -> list[ActivationRecord]:
    path = Path(path)
    out = []
    if path.suffix == ".jsonl":
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                out.append(ActivationRecord(
                    d["utterance_id"], d["speaker"], Emotion(d["emotion_index"], d["emotion"]),
                    HookSite(d["layer"], d["operator"]), np.asarray(d["vector"], dtype=np.float32),
                    d["position_policy"], d["step"],
                ))
        return out
    data = path.read_bytes()
    if data[:8] != _MAGIC:
        raise IntegrityError(f"{path}: not an activation store")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    offset = 16 + n
    for b in header["blocks"]:
        size = b["width"] * b["count"] * 4
        if offset + size > len(data):
            raise IntegrityError(f"{path}: truncated body for L{b['layer']}.{b['operator']}")
        mat = np.frombuffer(data[offset:offset + size], dtype="<f4").reshape(b["count"], b["width"])
        offset += size
        site = HookSite(b["layer"], b["operator"])
        for k in range(b["count"]):
            idx, name = b["emotions"][k]
            out.append(ActivationRecord(b["utterance_ids"][k], b["speakers"][k], Emotion(idx, name), site,
                                        mat[k].astype(np.float32), b["position_policy"], b["steps"][k]))
    return out
