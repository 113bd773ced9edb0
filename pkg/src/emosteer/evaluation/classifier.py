"""Internally trained scorers for generated token sequences.

:class:`ReferenceClassifier` maps prosody symbols (histogram + transition
counts) to an emotion distribution and exposes its hidden layer as an
emotion embedding. :class:`SpeakerEmbedder` does the same for speakers over
content-token unigram/bigram statistics.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from emosteer.errors import InputError, ReferenceQualityError
from emosteer.testbed.corpus import sample_prosody

HIDDEN = 32


def prosody_features(prosody: Sequence[int], num_symbols: int) -> np.ndarray:
    hist = np.zeros(num_symbols)
    trans = np.zeros((num_symbols, num_symbols))
    for p in prosody:
        hist[p] += 1
    for a, b in zip(prosody, prosody[1:]):
        trans[a, b] += 1
    if len(prosody):
        hist /= len(prosody)
    if len(prosody) > 1:
        trans /= len(prosody) - 1
    return np.concatenate([hist, trans.ravel()])


def content_features(content: Sequence[int], vocab_size: int) -> np.ndarray:
    uni = np.zeros(vocab_size)
    bi = np.zeros((vocab_size, vocab_size))
    for c in content:
        uni[c] += 1
    for a, b in zip(content, content[1:]):
        bi[a, b] += 1
    if len(content):
        uni /= len(content)
    if len(content) > 1:
        bi /= len(content) - 1
    return np.concatenate([uni, bi.ravel()])


def _prosody_of(x) -> tuple[int, ...]:
    return tuple(x.prosody) if hasattr(x, "prosody") else tuple(x)


def _content_of(x) -> tuple[int, ...]:
    if hasattr(x, "content"):
        return tuple(x.content)
    if hasattr(x, "transcript"):
        return tuple(x.transcript)
    return tuple(x)


@dataclass
class _MLP:
    """One tanh hidden layer; the hidden activations are the embedding."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def hidden(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.w1 + self.b1)

    def proba(self, X: np.ndarray) -> np.ndarray:
        z = self.hidden(X) @ self.w2 + self.b2
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("w1", "b1", "w2", "b2")}

    @classmethod
    def from_json(cls, d: dict) -> _MLP:
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("w1", "b1", "w2", "b2")))


def _fit_mlp(X: np.ndarray, y: np.ndarray, n_classes: int, seed: int, hidden: int = HIDDEN,
             steps: int = 300, lr: float = 0.02, weight_decay: float = 1e-4) -> _MLP:
    g = torch.Generator().manual_seed(seed)
    Xt = torch.as_tensor(X, dtype=torch.float64)
    yt = torch.as_tensor(y, dtype=torch.long)
    w1 = (torch.randn(X.shape[1], hidden, generator=g, dtype=torch.float64) / np.sqrt(X.shape[1])).requires_grad_()
    b1 = torch.zeros(hidden, dtype=torch.float64, requires_grad=True)
    w2 = (torch.randn(hidden, n_classes, generator=g, dtype=torch.float64) / np.sqrt(hidden)).requires_grad_()
    b2 = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    params = [w1, b1, w2, b2]
    opt = torch.optim.Adam(params, lr=lr)
    for _ in range(steps):
        logits = torch.tanh(Xt @ w1 + b1) @ w2 + b2
        loss = torch.nn.functional.cross_entropy(logits, yt) + weight_decay * (w1.square().sum() + w2.square().sum())
        opt.zero_grad()
        loss.backward()
        opt.step()
    return _MLP(*(p.detach().numpy().copy() for p in params))


def _holdout_split(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(frac * n))
    return order[n_hold:], order[:n_hold]


@dataclass
class _FeatureClassifier:
    mlp: _MLP | None
    num_classes: int
    input_size: int
    heldout_accuracy: float = float("nan")
    degenerate: bool = False
    constant_class: int | None = None
    meta: dict = field(default_factory=dict)

    featurize: Callable = field(default=None, repr=False)
    extract: Callable = field(default=None, repr=False)

    def features(self, items) -> np.ndarray:
        return np.stack([self.featurize(self.extract(x), self.input_size) for x in items])

    def predict_proba(self, items) -> np.ndarray:
        items = list(items)
        if self.constant_class is not None:
            out = np.zeros((len(items), self.num_classes))
            out[:, self.constant_class] = 1.0
            return out
        if self.mlp is None:
            return np.full((len(items), self.num_classes), 1.0 / self.num_classes)
        return self.mlp.proba(self.features(items))

    def embed(self, items) -> np.ndarray:
        items = list(items)
        if self.mlp is None:
            return np.zeros((len(items), HIDDEN))
        return self.mlp.hidden(self.features(items))

    def accuracy(self, items, labels) -> float:
        pred = self.predict_proba(items).argmax(axis=1)
        return float(np.mean(pred == np.asarray(labels)))

    def to_json(self) -> dict:
        return {
            "kind": type(self).__name__,
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "heldout_accuracy": self.heldout_accuracy,
            "degenerate": self.degenerate,
            "constant_class": self.constant_class,
            "meta": self.meta,
            "mlp": self.mlp.to_json() if self.mlp is not None else None,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))


class ReferenceClassifier(_FeatureClassifier):
    """Emotion scorer over prosody symbols."""

    def __init__(self, mlp, num_classes, input_size, **kw):
        super().__init__(mlp, num_classes, input_size, featurize=prosody_features, extract=_prosody_of, **kw)

    @classmethod
    def uniform(cls, num_symbols: int, num_emotions: int) -> ReferenceClassifier:
        return cls(None, num_emotions, num_symbols)

    @classmethod
    def fit(cls, sequences: Sequence[Sequence[int]], labels: Sequence[int], num_symbols: int,
            num_emotions: int, seed: int = 0, min_accuracy: float | None = 0.9,
            holdout: float = 0.2) -> ReferenceClassifier:
        """Fit on labelled prosody sequences; accuracy on a random hold-out is recorded.

        Raises :class:`ReferenceQualityError` when the held-out accuracy falls
        below ``min_accuracy``.
        """
        labels = np.asarray(labels, dtype=int)
        if len(sequences) != len(labels) or not len(labels):
            raise InputError("need equally many sequences and labels (at least one)")
        if len(set(labels.tolist())) == 1:
            return cls(None, num_emotions, num_symbols, heldout_accuracy=1.0, degenerate=True,
                       constant_class=int(labels[0]), meta={"seed": seed, "n": len(labels)})
        X = np.stack([prosody_features(tuple(s), num_symbols) for s in sequences])
        tr, ho = _holdout_split(len(labels), holdout, seed)
        mlp = _fit_mlp(X[tr], labels[tr], num_emotions, seed)
        acc = float(np.mean(mlp.proba(X[ho]).argmax(1) == labels[ho])) if len(ho) else float("nan")
        clf = cls(mlp, num_emotions, num_symbols, heldout_accuracy=acc,
                  meta={"seed": seed, "n_train": int(len(tr)), "n_heldout": int(len(ho))})
        if min_accuracy is not None and acc < min_accuracy:
            raise ReferenceQualityError(f"reference classifier held-out accuracy {acc:.3f} < {min_accuracy}", acc)
        return clf

    @classmethod
    def fit_utterances(cls, utterances, vocab, num_emotions: int, seed: int = 0,
                       min_accuracy: float | None = 0.9) -> ReferenceClassifier:
        utts = [u for u in utterances if u.prosody is not None]
        return cls.fit([u.prosody for u in utts], [u.emotion.index for u in utts], vocab.prosody,
                       num_emotions, seed=seed, min_accuracy=min_accuracy)

    @classmethod
    def load(cls, path: str | Path) -> ReferenceClassifier:
        d = json.loads(Path(path).read_text())
        mlp = _MLP.from_json(d["mlp"]) if d["mlp"] else None
        return cls(mlp, d["num_classes"], d["input_size"], heldout_accuracy=d["heldout_accuracy"],
                   degenerate=d["degenerate"], constant_class=d["constant_class"], meta=d["meta"])


class SpeakerEmbedder(_FeatureClassifier):
    """Speaker classifier over content unigram/bigram features."""

    def __init__(self, mlp, num_classes, input_size, **kw):
        super().__init__(mlp, num_classes, input_size, featurize=content_features, extract=_content_of, **kw)

    @classmethod
    def fit(cls, utterances, content_vocab: int, seed: int = 0) -> SpeakerEmbedder:
        speakers = sorted({u.speaker for u in utterances})
        index = {s: i for i, s in enumerate(speakers)}
        # one row per distinct (speaker, transcript): parallel copies add nothing
        seen = {}
        for u in utterances:
            seen.setdefault(u.group_key, u)
        rows = list(seen.values())
        X = np.stack([content_features(u.transcript, content_vocab) for u in rows])
        y = np.array([index[u.speaker] for u in rows])
        if len(speakers) == 1:
            return cls(None, 1, content_vocab, heldout_accuracy=1.0, degenerate=True, constant_class=0,
                       meta={"speakers": speakers})
        mlp = _fit_mlp(X, y, len(speakers), seed)
        return cls(mlp, len(speakers), content_vocab, meta={"speakers": speakers, "seed": seed})


def sample_ground_truth(prosody_probs: np.ndarray, emotion_indices: Sequence[int], length: int,
                        seed: int = 0, transcripts: Sequence[Sequence[int]] | None = None,
                        lexical_mass: float = 0.0) -> list[tuple[int, ...]]:
    """Draw prosody sequences from the generating process.

    Without ``transcripts`` the lexical component has nothing to tie to and
    only the emotion multinomials are used.
    """
    rng = np.random.default_rng(seed)
    if transcripts is None:
        transcripts, lexical_mass = [[0] * length] * len(emotion_indices), 0.0
    return [sample_prosody(rng, t, prosody_probs[e], lexical_mass) for t, e in zip(transcripts, emotion_indices)]
