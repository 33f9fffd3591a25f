"""Experiment configuration: nested dataclasses with a flat ``section.key = value`` text form.

Every key has a default, so an empty file is a valid config. Values are parsed
according to the type of the default; lists are comma-separated and
``(t_l, t_s)`` pairs are written ``0.2:0.05``.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from hetpure.attack import AttackConfig
from hetpure.data import DatasetSpec
from hetpure.purifier import PurifyConfig


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class ClassifierConfig:
    checkpoint: str = ""
    train_inline: bool = True
    epochs: int = 20
    lr: float = 0.2
    batch: int = 32
    seed: int = 0


@dataclass(frozen=True)
class DenoiserConfig:
    checkpoint: str = ""
    train_inline: bool = True
    epochs: int = 150
    lr: float = 2e-3
    batch: int = 64
    base: int = 16
    seed: int = 0
    # highest training timestep; purification stays well below it
    t_max: int = 300


@dataclass(frozen=True)
class AttackSection(AttackConfig):
    # fgsm / pgd attack the bare classifier; bpda_eot / pgd_eot_adaptive attack each defense
    enabled: bool = True

    def attack_config(self) -> AttackConfig:
        names = {f.name for f in fields(AttackConfig)}
        return AttackConfig(**{k: getattr(self, k) for k in names})


@dataclass(frozen=True)
class EvalConfig:
    n_images: int = 128
    repeats: int = 3
    seed: int = 0
    # extra rows: undefended classifier, homogeneous purification at t_s and at t_l
    baselines: bool = True
    chunk: int = 32


@dataclass(frozen=True)
class SweepConfig:
    enabled: bool = False
    taus: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9)
    pairs: tuple[tuple[float, float], ...] = ((0.1, 0.05), (0.2, 0.05), (0.3, 0.05), (0.2, 0.1))
    # the sweep rows skip the attack unless this is set
    attack: bool = False


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"
    dump_images: int = 8
    plots: bool = True
    # wall_seconds in metrics.csv breaks byte-determinism, so it is opt-in
    timing: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    purify: PurifyConfig = field(default_factory=PurifyConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        for name, section in (("classifier", self.classifier), ("denoiser", self.denoiser)):
            if not section.train_inline:
                if not section.checkpoint:
                    raise ConfigError(f"{name}.checkpoint is required when {name}.train_inline = false")
                if not Path(section.checkpoint).is_file():
                    raise ConfigError(f"{name}.checkpoint {section.checkpoint!r} does not exist")
        if not 1 <= self.denoiser.t_max <= self.schedule.T:
            raise ConfigError(f"denoiser.t_max must lie in [1, schedule.T], got {self.denoiser.t_max}")
        if self.eval.n_images < 1 or self.eval.repeats < 1 or self.eval.chunk < 1:
            raise ConfigError("eval.n_images, eval.repeats and eval.chunk must be >= 1")
        if self.sweep.enabled and not (self.sweep.taus or self.sweep.pairs):
            raise ConfigError("sweep grids must be non-empty when sweep.enabled = true")
        self.attack.attack_config().validate()
        from hetpure.schedule import build_linear_schedule

        sched = build_linear_schedule(self.schedule.T, self.schedule.beta_start, self.schedule.beta_end)
        self.purify.validate(sched)
        for t_l, t_s in self.sweep.pairs if self.sweep.enabled else ():
            replace(self.purify, t_l_frac=t_l, t_s_frac=t_s).validate(sched)


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_scalar(text: str, tp):
    if tp is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text, 0)
    if tp is float:
        if "/" in text:  # allow budgets like 8/255
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    if tp is str:
        return text
    raise TypeError(f"unsupported config type {tp!r}")


def _parse_value(text: str, tp):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        return _parse_value(text, inner[0])
    if origin is tuple:
        items = [s.strip() for s in text.split(",") if s.strip()]
        inner = args[0]
        if typing.get_origin(inner) is tuple:
            k = len(typing.get_args(inner))
            out = []
            for item in items:
                parts = item.split(":")
                if len(parts) != k:
                    raise ValueError(f"expected {k} ':'-separated values in {item!r}")
                out.append(tuple(_parse_scalar(p.strip(), a) for p, a in zip(parts, typing.get_args(inner))))
            return tuple(out)
        return tuple(_parse_scalar(s, inner) for s in items)
    return _parse_scalar(text, tp)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(":".join(_format_value(p) for p in item) if isinstance(item, tuple) else _format_value(item) for item in v)
    return repr(v) if isinstance(v, float) else str(v)


def _section_types(section_cls) -> dict[str, object]:
    return typing.get_type_hints(section_cls)


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with dotted-key string values parsed and applied."""
    updates: dict[str, dict[str, object]] = {}
    top = {f.name: f for f in fields(ExperimentConfig)}
    for key, raw in pairs.items():
        if "." not in key:
            raise ConfigError(f"key {key!r} must have the form section.name")
        sec, name = key.split(".", 1)
        if sec not in top:
            raise ConfigError(f"unknown config section {sec!r}")
        types = _section_types(type(getattr(cfg, sec)))
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates.setdefault(sec, {})[name] = _parse_value(raw, types[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return replace(cfg, **{sec: replace(getattr(cfg, sec), **kv) for sec, kv in updates.items()})


def parse_lines(lines) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        with open(path) as fh:
            cfg = apply_overrides(cfg, parse_lines(fh))
    if overrides:
        cfg = apply_overrides(cfg, parse_lines(overrides))
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every key, sorted within sections; ``load_config`` reads it back unchanged."""
    out = []
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        out.append(f"# [{f.name}]")
        for sf in fields(section):
            out.append(f"{f.name}.{sf.name} = {_format_value(getattr(section, sf.name))}")
    return "\n".join(out) + "\n"


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
