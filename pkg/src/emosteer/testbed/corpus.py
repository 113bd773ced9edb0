"""Synthetic fully-parallel emotional corpus.

Every (speaker, transcript) pair is realized once per emotion, neutral
included. The target of an utterance is its transcript interleaved with
prosody symbols. Each symbol is, with probability ``lexical_mass``, tied to
the content token it accompanies (``content % P``) and otherwise drawn from
the emotion's multinomial, so prosody carries both a lexical and an emotional
component. The model in
:mod:`emosteer.testbed.model` learns to copy the content and to emit
emotion-conditional prosody.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from emosteer.errors import ConfigurationError, InputError

DEFAULT_EMOTIONS = ("neutral", "happy", "sad", "angry", "surprise")

# Valence/arousal anchors in [0, 1]; unknown names fall back to the centre.
EMOTION_VA = {
    "neutral": (0.5, 0.5),
    "happy": (0.85, 0.7),
    "sad": (0.2, 0.25),
    "angry": (0.15, 0.85),
    "surprise": (0.7, 0.85),
}


@dataclass(frozen=True, order=True)
class Emotion:
    index: int
    name: str


class EmotionSet:
    """Dense, ordered emotion inventory with ``neutral`` at index 0."""

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if not names or names[0] != "neutral":
            raise ConfigurationError("emotion index 0 must be 'neutral'")
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate emotion names in {names}")
        self.names = names
        self._by_name = {n: Emotion(i, n) for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return (self._by_name[n] for n in self.names)

    def __getitem__(self, key: int | str) -> Emotion:
        if isinstance(key, str):
            try:
                return self._by_name[key]
            except KeyError:
                raise InputError(f"unknown emotion {key!r}; known: {', '.join(self.names)}") from None
        if not 0 <= key < len(self.names):
            raise InputError(f"emotion index {key} outside [0, {len(self.names)})")
        return self._by_name[self.names[key]]

    def __eq__(self, other) -> bool:
        return isinstance(other, EmotionSet) and self.names == other.names

    def __repr__(self) -> str:
        return f"EmotionSet({list(self.names)})"

    @property
    def neutral(self) -> Emotion:
        return self[0]

    @property
    def non_neutral(self) -> list[Emotion]:
        return [e for e in self if e.index != 0]


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str
    transcript: tuple[int, ...]
    emotion: Emotion
    prosody: tuple[int, ...] | None = None
    rater_labels: tuple[Emotion, ...] | None = None
    text_va: tuple[float, float] | None = None
    audio_va: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.transcript:
            raise InputError(f"utterance {self.id}: empty transcript")
        if self.rater_labels is not None and len(self.rater_labels) < 1:
            raise InputError(f"utterance {self.id}: rater_labels present but empty")
        for name in ("text_va", "audio_va"):
            va = getattr(self, name)
            if va is not None and not all(0.0 <= c <= 1.0 for c in va):
                raise InputError(f"utterance {self.id}: {name} {va} outside [0, 1]")

    @property
    def group_key(self) -> tuple[str, tuple[int, ...]]:
        return (self.speaker, self.transcript)

    def to_json(self) -> dict:
        row = {
            "id": self.id,
            "speaker": self.speaker,
            "transcript": list(self.transcript),
            "emotion": self.emotion.name,
        }
        if self.prosody is not None:
            row["prosody"] = list(self.prosody)
        if self.rater_labels is not None:
            row["rater_labels"] = [e.name for e in self.rater_labels]
        if self.text_va is not None:
            row["text_va"] = list(self.text_va)
        if self.audio_va is not None:
            row["audio_va"] = list(self.audio_va)
        return row

    @classmethod
    def from_json(cls, row: dict, emotions: EmotionSet) -> Utterance:
        try:
            return cls(
                id=str(row["id"]),
                speaker=str(row["speaker"]),
                transcript=tuple(int(t) for t in row["transcript"]),
                emotion=emotions[row["emotion"]],
                prosody=tuple(int(p) for p in row["prosody"]) if row.get("prosody") is not None else None,
                rater_labels=(
                    tuple(emotions[r] for r in row["rater_labels"])
                    if row.get("rater_labels") is not None
                    else None
                ),
                text_va=tuple(float(x) for x in row["text_va"]) if row.get("text_va") is not None else None,
                audio_va=tuple(float(x) for x in row["audio_va"]) if row.get("audio_va") is not None else None,
            )
        except KeyError as exc:
            raise InputError(f"corpus row missing field {exc}") from None


def default_prosody_table(num_emotions: int, prosody_vocab: int, mode_mass: float = 0.5,
                          owned_mass: float = 0.85) -> np.ndarray:
    """Emotion ``e`` owns symbols ``s`` with ``s % E == e``; its mode is symbol ``e``."""
    table = np.zeros((num_emotions, prosody_vocab))
    for e in range(num_emotions):
        owned = [s for s in range(prosody_vocab) if s % num_emotions == e]
        others = [s for s in range(prosody_vocab) if s % num_emotions != e]
        rest = owned[1:]
        table[e, e] = mode_mass if rest else owned_mass
        for s in rest:
            table[e, s] = (owned_mass - mode_mass) / len(rest)
        for s in others:
            table[e, s] = (1.0 - owned_mass) / len(others)
    return table


def default_contour_table(num_emotions: int) -> np.ndarray:
    """Per-emotion (amplitude, period, rate multiplier) for the renderer condition."""
    rows = []
    for e in range(num_emotions):
        f1 = ((e * 3) % num_emotions) / max(num_emotions - 1, 1)
        f2 = ((e * 2 + 1) % num_emotions) / max(num_emotions - 1, 1)
        f3 = ((e * 4 + 2) % num_emotions) / max(num_emotions - 1, 1)
        rows.append((0.30 + 0.10 * f1, 20.0 + 8.0 * f2, 0.95 + 0.10 * f3))
    return np.array(rows)


@dataclass
class CorpusSpec:
    emotions: tuple[str, ...] = DEFAULT_EMOTIONS
    num_speakers: int = 10
    transcripts_per_speaker: int = 40
    content_vocab: int = 32
    prosody_vocab: int = 16
    transcript_length: int = 8
    prosody_probs: np.ndarray | None = None
    contour_params: np.ndarray | None = None
    num_raters: int = 3
    rater_agreement: float = 0.8
    text_emotion_bias: float = 2.0
    va_noise: float = 0.05
    lexical_mass: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        self.emotions = tuple(self.emotions)
        if self.prosody_vocab < len(self.emotions):
            raise ConfigurationError(f"prosody vocabulary {self.prosody_vocab} smaller than emotion count "
                                     f"{len(self.emotions)}")
        if self.prosody_probs is None:
            self.prosody_probs = default_prosody_table(len(self.emotions), self.prosody_vocab)
        if self.contour_params is None:
            self.contour_params = default_contour_table(len(self.emotions))
        self.prosody_probs = np.asarray(self.prosody_probs, dtype=float)
        self.contour_params = np.asarray(self.contour_params, dtype=float)

    @property
    def num_emotions(self) -> int:
        return len(self.emotions)

    def validate(self) -> None:
        E, P = self.num_emotions, self.prosody_vocab
        EmotionSet(self.emotions)
        if E < 2:
            raise ConfigurationError(f"need at least 2 emotions, got {E}")
        if self.content_vocab < 2:
            raise ConfigurationError(f"content vocabulary must be >= 2, got {self.content_vocab}")
        if P < E:
            raise ConfigurationError(f"prosody vocabulary {P} smaller than emotion count {E}")
        if self.num_speakers < 1 or self.transcripts_per_speaker < 1 or self.transcript_length < 1:
            raise ConfigurationError("speaker, transcript and length counts must be positive")
        probs = self.prosody_probs
        if probs.shape != (E, P):
            raise ConfigurationError(f"prosody table shape {probs.shape} != {(E, P)}")
        if (probs < 0).any() or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigurationError("prosody table rows must be non-negative and sum to 1")
        cp = self.contour_params
        if cp.shape != (E, 3):
            raise ConfigurationError(f"contour table shape {cp.shape} != {(E, 3)}")
        if (cp[:, 1] <= 0).any() or (cp[:, 2] <= 0).any() or not np.isfinite(cp).all():
            raise ConfigurationError("contour periods and rates must be finite and positive")
        if self.num_raters < 1:
            raise ConfigurationError("num_raters must be >= 1")
        if not 0.0 <= self.rater_agreement <= 1.0:
            raise ConfigurationError("rater_agreement must lie in [0, 1]")
        if not 0.0 <= self.lexical_mass < 1.0:
            raise ConfigurationError("lexical_mass must lie in [0, 1)")

    def snapshot(self) -> dict:
        return {
            "emotions": list(self.emotions),
            "num_speakers": self.num_speakers,
            "transcripts_per_speaker": self.transcripts_per_speaker,
            "content_vocab": self.content_vocab,
            "prosody_vocab": self.prosody_vocab,
            "transcript_length": self.transcript_length,
            "prosody_probs": self.prosody_probs.tolist(),
            "contour_params": self.contour_params.tolist(),
            "num_raters": self.num_raters,
            "rater_agreement": self.rater_agreement,
            "text_emotion_bias": self.text_emotion_bias,
            "va_noise": self.va_noise,
            "lexical_mass": self.lexical_mass,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> CorpusSpec:
        return cls(**{**snap, "emotions": tuple(snap["emotions"])})


@dataclass
class GenerationTables:
    """Ground truth the corpus was sampled from."""

    prosody_probs: np.ndarray
    contour_params: np.ndarray
    speaker_content: dict[str, np.ndarray]
    emotion_va: np.ndarray
    lexical_mass: float = 0.0
    transcript_emotion: dict[tuple[str, tuple[int, ...]], int] = field(default_factory=dict)


@dataclass
class Corpus:
    spec: CorpusSpec
    emotions: EmotionSet
    utterances: list[Utterance]
    tables: GenerationTables

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}


def _va_anchor(name: str) -> tuple[float, float]:
    return EMOTION_VA.get(name, (0.5, 0.5))


def _noisy_va(rng: np.random.Generator, anchor, noise: float) -> tuple[float, float]:
    v = np.clip(np.asarray(anchor) + rng.normal(0.0, noise, size=2), 0.0, 1.0)
    return (float(v[0]), float(v[1]))


def _rater_labels(rng, emotions: EmotionSet, true_index: int, n: int, agreement: float):
    E = len(emotions)
    labels = []
    for _ in range(n):
        if E == 1 or rng.random() < agreement:
            labels.append(emotions[true_index])
        else:
            other = int(rng.integers(E - 1))
            labels.append(emotions[other if other < true_index else other + 1])
    return tuple(labels)


def sample_prosody(rng: np.random.Generator, transcript: Sequence[int], probs: np.ndarray,
                   lexical_mass: float = 0.0) -> tuple[int, ...]:
    """One prosody symbol per content token: lexical with prob ``lexical_mass``, else from ``probs``."""
    P = len(probs)
    drawn = rng.choice(P, size=len(transcript), p=probs)
    lexical = rng.random(len(transcript)) < lexical_mass
    return tuple(int(c % P) if lex else int(d) for c, d, lex in zip(transcript, drawn, lexical))


def build_synthetic_corpus(spec: CorpusSpec) -> Corpus:
    """Sample a fully parallel corpus of ``speakers x transcripts x E`` utterances."""
    spec.validate()
    emotions = EmotionSet(spec.emotions)
    E, C = spec.num_emotions, spec.content_vocab
    rng = np.random.default_rng(spec.rng_seed)

    speaker_content = {}
    for s in range(spec.num_speakers):
        pref = rng.dirichlet(np.full(C, 0.5))
        speaker_content[f"spk{s:02d}"] = 0.5 * pref + 0.5 / C
    emotion_va = np.array([_va_anchor(n) for n in emotions.names])
    tables = GenerationTables(spec.prosody_probs.copy(), spec.contour_params.copy(), speaker_content, emotion_va,
                              spec.lexical_mass)

    utterances = []
    for speaker, content_dist in speaker_content.items():
        for t in range(spec.transcripts_per_speaker):
            implied = int(rng.integers(E))
            weights = content_dist * np.where(np.arange(C) % E == implied, spec.text_emotion_bias, 1.0)
            weights = weights / weights.sum()
            transcript = tuple(int(x) for x in rng.choice(C, size=spec.transcript_length, p=weights))
            tables.transcript_emotion[(speaker, transcript)] = implied
            text_va = _noisy_va(rng, emotion_va[implied], spec.va_noise)
            for emo in emotions:
                prosody = sample_prosody(rng, transcript, spec.prosody_probs[emo.index], spec.lexical_mass)
                utterances.append(Utterance(
                    id=f"{speaker}_t{t:03d}_{emo.name}",
                    speaker=speaker,
                    transcript=transcript,
                    emotion=emo,
                    prosody=prosody,
                    rater_labels=_rater_labels(rng, emotions, emo.index, spec.num_raters, spec.rater_agreement),
                    text_va=text_va,
                    audio_va=_noisy_va(rng, emotion_va[emo.index], spec.va_noise),
                ))
    return Corpus(spec, emotions, utterances, tables)


def build_mixed_eval_set(corpus: Corpus, utterances: Sequence[Utterance], num_raters: int = 5,
                         concentration: float = 1.0, seed: int = 0) -> list[Utterance]:
    """Blended-emotion targets with multi-rater labels.

    For each neutral utterance in ``utterances`` a latent mix over two or three
    non-neutral emotions is drawn; the target prosody is sampled from the
    mixed multinomial and each rater independently draws a label from the mix.
    Only samples whose rater consensus names at least two non-neutral emotions
    with a unique dominant label are kept.
    """
    emotions = corpus.emotions
    rng = np.random.default_rng(seed)
    probs = corpus.tables.prosody_probs
    out = []
    for u in utterances:
        if u.emotion.index != 0:
            continue
        support = rng.choice(np.arange(1, len(emotions)), size=min(len(emotions) - 1, int(rng.integers(2, 4))),
                             replace=False)
        mix = np.zeros(len(emotions))
        mix[support] = rng.dirichlet(np.full(len(support), concentration))
        labels = rng.choice(len(emotions), size=num_raters, p=mix)
        counts = np.bincount(labels, minlength=len(emotions))
        if (counts[1:] > 0).sum() < 2 or (counts == counts.max()).sum() > 1:
            continue
        prosody = sample_prosody(rng, u.transcript, mix @ probs, corpus.tables.lexical_mass)
        dominant = int(np.argmax(counts))
        audio_va = tuple(float(x) for x in np.clip(mix @ corpus.tables.emotion_va, 0.0, 1.0))
        out.append(Utterance(
            id=f"{u.id}_mix",
            speaker=u.speaker,
            transcript=u.transcript,
            emotion=emotions[dominant],
            prosody=prosody,
            rater_labels=tuple(emotions[int(i)] for i in labels),
            text_va=u.text_va,
            audio_va=audio_va,
        ))
    return out


def split_speakers(speakers: Iterable[str], seed: int = 0,
                   ratios: tuple[float, float, float] = (0.5, 0.2, 0.3)) -> dict[str, list[str]]:
    """Speaker-disjoint train/val/test partition."""
    speakers = sorted(set(speakers))
    order = [speakers[i] for i in np.random.default_rng(seed).permutation(len(speakers))]
    n = len(order)
    n_train = max(1, int(math.floor(ratios[0] * n + 0.5))) if n >= 1 else 0
    n_val = int(math.floor(ratios[1] * n + 0.5))
    if n >= 3:
        n_val = max(1, n_val)
        n_train = min(n_train, n - n_val - 1)
    n_val = min(n_val, n - n_train)
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


def select_speakers(utterances: Iterable[Utterance], speakers: Iterable[str]) -> list[Utterance]:
    keep = set(speakers)
    return [u for u in utterances if u.speaker in keep]


def group_parallel(utterances: Iterable[Utterance]) -> dict[tuple[str, tuple[int, ...]], list[Utterance]]:
    groups: dict = {}
    for u in utterances:
        groups.setdefault(u.group_key, []).append(u)
    return groups


def write_corpus(path: str | Path, utterances: Iterable[Utterance], meta: dict | None = None) -> None:
    """JSONL, one utterance per line; ``meta`` goes first as a ``{"_meta": ...}`` line."""
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for u in utterances:
            fh.write(json.dumps(u.to_json(), sort_keys=True) + "\n")


def read_corpus_meta(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    try:
        return json.loads(first).get("_meta", {}) if first else {}
    except json.JSONDecodeError:
        return {}


def read_corpus(path: str | Path, emotions: EmotionSet | None = None) -> list[Utterance]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "_meta" not in row:
                rows.append(row)
    if not rows:
        raise InputError(f"{path}: no utterances")
    if emotions is None and "emotions" in read_corpus_meta(path).get("corpus_spec", {}):
        emotions = EmotionSet(read_corpus_meta(path)["corpus_spec"]["emotions"])
    if emotions is None:
        names = sorted({r["emotion"] for r in rows} | {x for r in rows for x in r.get("rater_labels") or []})
        if "neutral" not in names:
            raise InputError(f"{path}: corpus has no neutral utterances and no emotion set was given")
        names.remove("neutral")
        emotions = EmotionSet(["neutral", *names])
    return [Utterance.from_json(r, emotions) for r in rows]
