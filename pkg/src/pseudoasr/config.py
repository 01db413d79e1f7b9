"""Run configuration: dataclasses per section, an INI-style text file, dotted overrides.

File format (``configparser`` syntax)::

    [data]
    seed = 1234
    frame_range = 6,18

    [model]
    model_dim = 64

    [train]
    regime = pseudo_direct
    text_ratio = 3.75

Sections are ``data``, ``model``, ``pseudo``, ``train`` and ``decode``; keys
are the dataclass field names. Overrides use ``section.key=value``. Unknown
sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .data import ToyCorpusConfig
from .model import ModelConfig
from .pseudo import PseudoSpeechConfig

REGIMES = ("paired_only", "pseudo_direct", "pseudo_modality_matching", "toy_tts")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    regime: str = "paired_only"
    steps: int = 1000
    lr: float = 1e-3
    warmup: int = 1000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 5.0
    paired_batch_tokens: int = 64
    text_ratio: float = 0.0
    w_ce: float = 1.0
    w_ctc: float = 1.0
    w_ictc: float = 0.3
    w_dur: float = 0.1
    w_mm: float = 1.0
    eval_every: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.text_ratio < 0:
            raise ValueError("text_ratio must be >= 0")
        for name in ("w_ce", "w_ctc", "w_ictc", "w_dur", "w_mm"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.regime == "paired_only" and self.text_ratio > 0:
            raise ValueError("paired_only training uses no text: text_ratio must be 0")
        if self.regime.startswith("pseudo") and self.text_ratio == 0:
            raise ValueError(f"{self.regime} needs text_ratio > 0")

    @property
    def text_batch_tokens(self) -> float:
        return self.text_ratio * self.paired_batch_tokens


@dataclass
class DecodeConfig:
    beam: int = 4
    lambda_ctc: float = 0.5
    lambda_aed: float = 0.5
    ctc_head: str = "final"
    length_reward: float = 0.0
    ctc_scoring: str = "sum"

    def __post_init__(self) -> None:
        if self.ctc_scoring not in ("sum", "viterbi"):
            raise ValueError("ctc_scoring must be sum or viterbi")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.lambda_ctc < 0 or self.lambda_aed < 0:
            raise ValueError("score weights must be >= 0")
        if self.ctc_head not in ("final", "speech"):
            raise ValueError("ctc_head must be final or speech")


@dataclass
class RunConfig:
    data: ToyCorpusConfig = field(default_factory=ToyCorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pseudo: PseudoSpeechConfig = field(default_factory=PseudoSpeechConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)


SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(value: str, typ: Any, key: str) -> Any:
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(inner(v.strip()) for v in value.split(","))
        return typ(value.strip())
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None


def _section_types(section: str) -> dict[str, Any]:
    cls = SECTIONS[section].default_factory
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def build_config(values: dict[str, dict[str, str]]) -> RunConfig:
    """Build a validated :class:`RunConfig` from raw ``{section: {key: text}}`` values."""
    kwargs = {}
    for section, raw in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        types = _section_types(section)
        parsed = {}
        for key, text in raw.items():
            if key not in types:
                raise ConfigError(f"unknown config key {section}.{key}")
            parsed[key] = _coerce(text, types[key], f"{section}.{key}")
        kwargs[section] = parsed
    try:
        return RunConfig(**{s: SECTIONS[s].default_factory(**kwargs.get(s, {})) for s in SECTIONS})
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def read_config_text(text: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def apply_overrides(values: dict[str, dict[str, str]], overrides: Sequence[str]) -> dict[str, dict[str, str]]:
    out = {s: dict(v) for s, v in values.items()}
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        dotted, val = ov.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in _section_types(section):
            raise ConfigError(f"unknown config key {section}.{key}")
        out.setdefault(section, {})[key] = val
    return out


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    values = {}
    if path is not None:
        try:
            values = read_config_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_config(apply_overrides(values, overrides))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, val in dataclasses.asdict(getattr(cfg, section)).items():
            if isinstance(val, (tuple, list)):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
