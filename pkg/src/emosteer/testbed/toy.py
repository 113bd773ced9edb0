"""Training and autoregressive decoding for the toy speech-token LM."""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from emosteer.errors import InputError, TrainingFailure
from emosteer.testbed.corpus import Utterance
from emosteer.testbed.model import ModelConfig, ToyTransformer, Vocab

log = logging.getLogger(__name__)

torch.set_num_threads(1)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    vocab: Vocab
    truncated: bool = False

    def __post_init__(self):
        if not self.tokens:
            raise InputError("empty token sequence")

    @property
    def content(self) -> tuple[int, ...]:
        return tuple(t for t in self.tokens if self.vocab.is_content(t))

    @property
    def prosody(self) -> tuple[int, ...]:
        """Prosody symbols as indices in ``[0, P)``."""
        off = self.vocab.prosody_offset
        return tuple(t - off for t in self.tokens if self.vocab.is_prosody(t))


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    seed: int = 0
    max_wer: float = 0.05
    min_classifier_accuracy: float = 0.9
    check: bool = True


@dataclass
class ToyModel:
    net: ToyTransformer
    config: ModelConfig
    train_config: TrainConfig | None = None
    history: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def vocab(self) -> Vocab:
        return self.config.vocab

    @property
    def num_layers(self) -> int:
        return self.config.n_layers


def _training_rows(utterances: Sequence[Utterance], vocab: Vocab):
    rows = []
    for u in utterances:
        if u.prosody is None:
            raise InputError(f"utterance {u.id} has no prosody target")
        prompt = vocab.prompt(u.transcript, u.emotion.index)
        rows.append((prompt, vocab.target(u.transcript, u.prosody)))
    return rows


def _batch(rows):
    length = max(len(p) + len(t) for p, t in rows)
    tokens = torch.zeros(len(rows), length, dtype=torch.long)
    labels = torch.full((len(rows), length), -100, dtype=torch.long)
    for i, (prompt, target) in enumerate(rows):
        seq = prompt + target
        tokens[i, : len(seq)] = torch.tensor(seq)
        # predict every target token from its predecessor
        labels[i, len(prompt) - 1 : len(seq) - 1] = torch.tensor(target)
    return tokens, labels


def init_model(config: ModelConfig, seed: int = 0) -> ToyModel:
    torch.manual_seed(seed)
    net = ToyTransformer(config)
    net.eval()
    return ToyModel(net, config)


def train_toy_model(utterances: Sequence[Utterance], config: ModelConfig,
                    train_config: TrainConfig | None = None,
                    heldout: Sequence[Utterance] | None = None) -> ToyModel:
    """Next-token cross-entropy on the continuation, AdamW with warmup + cosine decay.

    When ``heldout`` is given and ``train_config.check`` is set, the trained
    model must copy held-out transcripts with WER <= ``max_wer`` and its
    greedy outputs must be recognised by a reference classifier trained on the
    ground-truth sampler; otherwise :class:`TrainingFailure` is raised.
    """
    tc = train_config or TrainConfig()
    vocab = config.vocab
    rows = _training_rows(utterances, vocab)
    if not rows:
        raise InputError("no training utterances")
    model = init_model(config, tc.seed)
    net = model.net
    gen = torch.Generator().manual_seed(tc.seed)
    opt = torch.optim.AdamW(net.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    steps_per_epoch = math.ceil(len(rows) / tc.batch_size)
    total = tc.epochs * steps_per_epoch

    def lr_at(step):
        if step < tc.warmup_steps:
            return (step + 1) / tc.warmup_steps
        progress = (step - tc.warmup_steps) / max(1, total - tc.warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    losses = []
    net.train()
    step = 0
    for epoch in range(tc.epochs):
        order = torch.randperm(len(rows), generator=gen).tolist()
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            tokens, labels = _batch([rows[i] for i in order[b * tc.batch_size:(b + 1) * tc.batch_size]])
            logits = net(tokens)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=-100)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
            opt.step()
            sched.step()
            step += 1
            epoch_loss += loss.item()
        losses.append(epoch_loss / steps_per_epoch)
        log.debug("epoch %d loss %.4f", epoch, losses[-1])
    net.eval()
    model.train_config = tc
    model.history = {"loss": losses, "final_loss": losses[-1]}

    if heldout is not None and tc.check:
        metrics = heldout_metrics(model, utterances, heldout)
        model.history.update(metrics)
        if metrics["wer"] > tc.max_wer or metrics["classifier_accuracy"] < tc.min_classifier_accuracy:
            raise TrainingFailure(
                f"toy model missed thresholds: WER {metrics['wer']:.4f} (max {tc.max_wer}), "
                f"classifier accuracy {metrics['classifier_accuracy']:.4f} (min {tc.min_classifier_accuracy})",
                metrics={**metrics, "final_loss": losses[-1]},
            )
    return model


def heldout_metrics(model: ToyModel, reference: Sequence[Utterance], heldout: Sequence[Utterance],
                    seed: int = 0) -> dict:
    """Copy WER and reference-classifier accuracy of greedy outputs on ``heldout``.

    The classifier is fit on the ground-truth targets of ``reference``.
    """
    from emosteer.evaluation.classifier import ReferenceClassifier
    from emosteer.evaluation.metrics import wer

    outputs = generate_batch(model, [u.transcript for u in heldout], [u.emotion.index for u in heldout])
    copy_wer = float(np.mean([wer(u.transcript, o.content) for u, o in zip(heldout, outputs)]))
    if len({u.emotion.index for u in reference}) < 2:
        return {"wer": copy_wer, "classifier_accuracy": 1.0, "degenerate": True}
    clf = ReferenceClassifier.fit_utterances(reference, model.vocab, model.config.num_emotions, seed=seed)
    acc = clf.accuracy(outputs, [u.emotion.index for u in heldout])
    return {"wer": copy_wer, "classifier_accuracy": float(acc), "degenerate": False}


def generate_batch(model: ToyModel, transcripts: Sequence[Sequence[int]], conditions: Sequence[int],
                   plans=None, seed: int = 0, temperature: float = 0.0,
                   max_new_tokens: int | None = None, batch_size: int = 256,
                   top_p: float = 1.0) -> list[TokenSequence]:
    """Decode continuations for many prompts.

    ``plans`` is ``None``, a single :class:`~emosteer.instrumentation.SteeringPlan`
    applied to every row, or one plan per row (all sharing sites). Sampling
    (``temperature > 0``) draws one uniform per row and step from a generator
    seeded with ``seed`` and inverts the CDF, so runs that differ only in the
    plan share random numbers. ``top_p < 1`` restricts sampling to the
    smallest set of tokens whose probability reaches ``top_p``. Decoding
    follows the output grammar: a prosody symbol (or EOS) and a content
    symbol alternate.
    """
    from emosteer.instrumentation import SteeringPlan, install_plan

    vocab = model.vocab
    n = len(transcripts)
    if not 0.0 < top_p <= 1.0:
        raise InputError(f"top_p must lie in (0, 1], got {top_p}")
    if len(conditions) != n:
        raise InputError("transcripts and conditions differ in length")
    for c in conditions:
        if not 0 <= c < model.config.num_emotions:
            raise InputError(f"unknown condition index {c}")
    for t in transcripts:
        if not t or not all(vocab.is_content(x) for x in t):
            raise InputError(f"transcript {tuple(t)} has tokens outside the content vocabulary")
    if plans is None or isinstance(plans, SteeringPlan):
        row_plans = [plans] * n
    else:
        row_plans = list(plans)
        if len(row_plans) != n:
            raise InputError("one plan per row required")

    # group rows by prompt length so each forward pass is rectangular
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(transcripts):
        groups.setdefault(len(t), []).append(i)
    out: list[TokenSequence | None] = [None] * n
    for length in sorted(groups):
        idx = groups[length]
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            prompts = [vocab.prompt(transcripts[i], conditions[i]) for i in chunk]
            limit = max_new_tokens if max_new_tokens is not None else 2 * length + 4
            limit = min(limit, model.config.max_len - len(prompts[0]))
            chunk_plans = [row_plans[i] for i in chunk]
            with install_plan(model, chunk_plans) as ctx:
                seqs = _decode(model, prompts, limit, seed + start, temperature, ctx, top_p)
            for i, s in zip(chunk, seqs):
                out[i] = s
    return out


def _slot_masks(vocab: Vocab) -> tuple[torch.Tensor, torch.Tensor]:
    """Allowed next tokens: prosody symbol or EOS, then a content symbol, alternating."""
    ids = torch.arange(vocab.size)
    prosody_slot = ((ids >= vocab.prosody_offset) & (ids < vocab.cond_offset)) | (ids == vocab.eos)
    content_slot = ids < vocab.content
    return prosody_slot, content_slot


@torch.no_grad()
def _nucleus(probs: torch.Tensor, top_p: float) -> torch.Tensor:
    """Zero out the tail beyond the ``top_p`` mass and renormalize (ties keep index order)."""
    sorted_p, order = probs.sort(dim=-1, descending=True, stable=True)
    keep = (sorted_p.cumsum(-1) - sorted_p) < top_p
    kept = torch.zeros_like(probs).scatter(-1, order, sorted_p * keep)
    return kept / kept.sum(-1, keepdim=True)


def _decode(model: ToyModel, prompts, limit, seed, temperature, ctx, top_p=1.0) -> list[TokenSequence]:
    vocab = model.vocab
    prompt_len = len(prompts[0])
    seq = torch.tensor(prompts, dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    done = torch.zeros(len(prompts), dtype=torch.bool)
    ctx.begin(prompt_len)
    slot_masks = _slot_masks(vocab)
    past = None
    step_input = seq
    for k in range(limit):
        logits, past = model.net(step_input, past=past, return_cache=True, prompt_len=prompt_len)
        logits = logits[:, -1].masked_fill(~slot_masks[k % 2], float("-inf"))
        if temperature > 0:
            probs = (logits.double() / temperature).softmax(-1)
            if top_p < 1.0:
                probs = _nucleus(probs, top_p)
            u = torch.rand(len(prompts), 1, generator=gen, dtype=torch.float64)
            nxt = torch.searchsorted(probs.cumsum(-1), u).squeeze(1).clamp_max(probs.shape[-1] - 1)
        else:
            nxt = logits.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, vocab.eos), nxt)
        seq = torch.cat([seq, nxt[:, None]], dim=1)
        step_input = nxt[:, None]
        done |= nxt == vocab.eos
        if bool(done.all()):
            break
    results = []
    for row in seq[:, prompt_len:].tolist():
        if vocab.eos in row:
            results.append(TokenSequence(tuple(row[: row.index(vocab.eos) + 1]), vocab, False))
        else:
            results.append(TokenSequence(tuple(row), vocab, True))
    return results


def generate(model: ToyModel, transcript: Sequence[int], condition: int, plan=None, seed: int = 0,
             temperature: float = 0.0, max_new_tokens: int | None = None) -> TokenSequence:
    out = generate_batch(model, [transcript], [condition], plan, seed, temperature, max_new_tokens)[0]
    if out.truncated:
        warnings.warn("generation hit max length without EOS", RuntimeWarning, stacklevel=2)
    return out


def training_summary(model: ToyModel) -> dict:
    return {
        "config": model.config.to_dict(),
        "train_config": asdict(model.train_config) if model.train_config else None,
        "final_loss": model.history.get("final_loss"),
    }
