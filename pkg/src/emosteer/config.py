"""Run configuration: one INI file, one section per pipeline stage.

Every value has a default, so an empty file (or none at all) gives the
default toy pipeline. ``--set section.key=value`` on the command line
overrides single entries.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from emosteer.errors import ConfigurationError
from emosteer.testbed.corpus import DEFAULT_EMOTIONS


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _names(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class PathsSection:
    workdir: str = "run"


@dataclass(frozen=True)
class TestbedSection:
    seed: int = 0
    emotions: tuple[str, ...] = DEFAULT_EMOTIONS
    num_speakers: int = 10
    transcripts_per_speaker: int = 40
    transcript_length: int = 8
    content_vocab: int = 32
    prosody_vocab: int = 16
    lexical_mass: float = 0.3
    num_raters: int = 3
    rater_agreement: float = 0.8


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_mlp: int = 256
    fused_qkv: bool = False
    condition_bottleneck: bool = True


@dataclass(frozen=True)
class TrainSection:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-3
    max_wer: float = 0.05
    min_classifier_accuracy: float = 0.9


@dataclass(frozen=True)
class ProbingSection:
    split_seed: int = 0
    steps: int = 500
    lr: float = 0.1
    l2: float = 1e-3


@dataclass(frozen=True)
class SteeringSection:
    sweep: tuple[float, ...] = tuple(float(a) for a in np.arange(0.5, 7.01, 0.5))
    rank_alpha: float = 3.0
    max_k: int = 5
    wer_budget: float = 0.005
    position_policy: str = "per-step"
    eval_limit: int = 25


@dataclass(frozen=True)
class EvaluationSection:
    alphas: tuple[float, ...] = (3.0, 5.0, 6.0)
    temperature: float = 0.0
    top_p: float = 1.0
    seed: int = 0
    mixed_seed: int = 0
    h_rate_eps: float = 1e-9
    h_rate_mode: str = "relative"
    s_sim: bool = True
    min_classifier_accuracy: float = 0.9


@dataclass(frozen=True)
class DiagnosticSection:
    lambda_render: float = 0.5
    frames: int = 100
    max_groups: int = 40


SECTIONS = {
    "paths": PathsSection,
    "testbed": TestbedSection,
    "model": ModelSection,
    "train": TrainSection,
    "probing": ProbingSection,
    "steering": SteeringSection,
    "evaluation": EvaluationSection,
    "diagnostic": DiagnosticSection,
}


@dataclass(frozen=True)
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    testbed: TestbedSection = field(default_factory=TestbedSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    probing: ProbingSection = field(default_factory=ProbingSection)
    steering: SteeringSection = field(default_factory=SteeringSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    diagnostic: DiagnosticSection = field(default_factory=DiagnosticSection)

    def validate(self) -> None:
        for name, grid in (("steering.sweep", self.steering.sweep), ("evaluation.alphas", self.evaluation.alphas)):
            if not grid:
                raise ConfigurationError(f"{name} is empty")
            if any(a < 0 or not np.isfinite(a) for a in grid):
                raise ConfigurationError(f"{name} must be finite and non-negative")
            if list(grid) != sorted(grid):
                raise ConfigurationError(f"{name} must be sorted ascending")
        if self.steering.wer_budget < 0:
            raise ConfigurationError("steering.wer_budget must be >= 0")
        if self.steering.max_k < 1:
            raise ConfigurationError("steering.max_k must be >= 1")
        if self.steering.position_policy not in ("per-step", "last-prompt-token"):
            raise ConfigurationError("steering.position_policy must be per-step or last-prompt-token")
        if self.evaluation.h_rate_mode not in ("relative", "absolute"):
            raise ConfigurationError("evaluation.h_rate_mode must be relative or absolute")
        if len(self.testbed.emotions) < 2 or self.testbed.emotions[0] != "neutral":
            raise ConfigurationError("testbed.emotions must start with neutral and name at least one other emotion")

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def snapshot(self) -> dict:
        """Plain dict of every section (paths excluded: moving a run must not change its outputs)."""
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS if name != "paths"}


def _convert(text: str, default, section: str, key: str):
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _floats(text) if default and isinstance(default[0], float) else _names(text)
        return text
    except (ValueError, KeyError):
        raise ConfigurationError(f"[{section}] {key} = {text!r} is not a valid {type(default).__name__}") from None


def _apply(config: RunConfig, section: str, key: str, text: str) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigurationError(f"unknown config section [{section}]")
    current = getattr(config, section)
    known = {f.name: f for f in fields(current)}
    if key not in known:
        raise ConfigurationError(f"unknown key {key!r} in [{section}]")
    value = _convert(text.strip(), getattr(current, key), section, key)
    return dataclasses.replace(config, **{section: dataclasses.replace(current, **{key: value})})


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides."""
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                config = _apply(config, section, key, text)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        lhs, text = item.split("=", 1)
        section, key = lhs.split(".", 1)
        config = _apply(config, section.strip(), key.strip(), text)
    config.validate()
    return config


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)


def dump_config(config: RunConfig) -> str:
    """INI text that :func:`load_config` reads back to ``config``."""
    lines = []
    for name in SECTIONS:
        sec = getattr(config, name)
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {_format(getattr(sec, f.name))}" for f in fields(sec)]
        lines.append("")
    return "\n".join(lines)
