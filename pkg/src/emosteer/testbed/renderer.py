"""Deterministic stage-2 renderer: token sequence + condition -> f0/energy/rate contours.

Frames are split into equal segments, one per prosody symbol. Within a
segment the oscillation amplitude and period are a convex blend of the
symbol's parameters and the condition's parameters::

    A_t = (1 - lam) * A_sym + lam * A_cond
    phase_t = phase_{t-1} + 2 pi / period_t
    f0_t = f0_base * (1 + A_t sin(phase_t))
    energy_t = e_base * (1 + A_t cos(phase_t))

and ``speaking_rate = base_rate * ((1 - lam) * mean(rate_sym) + lam * rate_cond)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from emosteer.errors import InputError
from emosteer.testbed.corpus import default_contour_table


@dataclass(frozen=True)
class ContourSet:
    f0: np.ndarray
    energy: np.ndarray
    speaking_rate: float

    def __post_init__(self):
        if len(self.f0) < 1 or len(self.f0) != len(self.energy):
            raise InputError("f0 and energy must have equal length >= 1")
        if not (np.isfinite(self.speaking_rate) and self.speaking_rate > 0):
            raise InputError(f"speaking rate must be finite and positive, got {self.speaking_rate}")


def default_symbol_table(num_emotions: int, prosody_vocab: int, contour_params: np.ndarray | None = None,
                         spread: float = 2.0, jitter: float = 0.1) -> np.ndarray:
    """Per-symbol (amplitude, period, rate): the owning emotion's parameters pushed away from neutral.

    Symbol ``s`` belongs to emotion ``s % E``. Its parameters are
    ``neutral + spread * (owner - neutral)`` plus a small deterministic
    per-symbol offset, so symbols of one emotion are similar but not equal.
    """
    cp = default_contour_table(num_emotions) if contour_params is None else np.asarray(contour_params, float)
    neutral = cp[0]
    rows = []
    for s in range(prosody_vocab):
        owner = cp[s % num_emotions]
        k = s // num_emotions
        wobble = jitter * np.array([0.1, 2.0, 0.02]) * np.sin([k + 1.0, 2.0 * k + 1.0, 3.0 * k + 1.0])
        rows.append(neutral + spread * (owner - neutral) + wobble)
    out = np.array(rows)
    out[:, 0] = np.clip(out[:, 0], 0.01, 0.9)
    out[:, 1] = np.maximum(out[:, 1], 4.0)
    out[:, 2] = np.maximum(out[:, 2], 0.2)
    return out


@dataclass(frozen=True)
class Renderer:
    symbol_params: np.ndarray  # [P, 3]
    condition_params: np.ndarray  # [E, 3]
    lambda_render: float = 0.5
    frames: int = 100
    f0_base: float = 120.0
    energy_base: float = 1.0
    base_rate: float = 4.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.lambda_render <= 1.0:
            raise InputError(f"lambda_render must be in [0, 1], got {self.lambda_render}")
        if self.frames < 1:
            raise InputError("frames must be >= 1")

    @classmethod
    def default(cls, num_emotions: int, prosody_vocab: int, contour_params: np.ndarray | None = None,
                **kw) -> Renderer:
        cp = default_contour_table(num_emotions) if contour_params is None else np.asarray(contour_params, float)
        return cls(default_symbol_table(num_emotions, prosody_vocab, cp), cp, **kw)

    def _token_params(self, prosody) -> np.ndarray:
        """``[frames, 3]`` symbol parameters, one segment per prosody symbol."""
        if not len(prosody):
            # no prosody symbols: fall back to the mean symbol
            return np.repeat(self.symbol_params.mean(axis=0, keepdims=True), self.frames, axis=0)
        seg = np.minimum((np.arange(self.frames) * len(prosody)) // self.frames, len(prosody) - 1)
        return self.symbol_params[np.asarray(prosody)[seg]]

    def render(self, tokens, condition: int) -> ContourSet:
        prosody = tuple(tokens.prosody) if hasattr(tokens, "prosody") else tuple(tokens)
        if hasattr(tokens, "tokens") and not len(tokens.tokens):
            raise InputError("empty token sequence")
        if not 0 <= int(condition) < len(self.condition_params):
            raise InputError(f"unknown renderer condition {condition}")
        if any(not 0 <= p < len(self.symbol_params) for p in prosody):
            raise InputError("prosody symbol outside the renderer table")
        lam = self.lambda_render
        sym = self._token_params(prosody)
        cond = self.condition_params[int(condition)]
        amp = (1 - lam) * sym[:, 0] + lam * cond[0]
        period = (1 - lam) * sym[:, 1] + lam * cond[1]
        phase = np.cumsum(2.0 * np.pi / period)
        f0 = self.f0_base * (1.0 + amp * np.sin(phase))
        energy = self.energy_base * (1.0 + amp * np.cos(phase))
        sym_rate = float(np.mean(self.symbol_params[list(prosody), 2])) if prosody else float(sym[0, 2])
        rate = self.base_rate * ((1 - lam) * sym_rate + lam * float(cond[2]))
        return ContourSet(f0, energy, rate)


def render_contours(tokens, condition, renderer: Renderer | None = None) -> ContourSet:
    """Render with ``renderer`` or the default tables for the sequence's vocabulary."""
    if renderer is None:
        vocab = tokens.vocab
        renderer = Renderer.default(vocab.emotions, vocab.prosody)
    return renderer.render(tokens, getattr(condition, "index", condition))
