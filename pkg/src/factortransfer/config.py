"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment; list values are
comma-separated.  Every key must be known: typos are errors, not warnings.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .losses import FactorConfig
from .training import TrainConfig


class UsageError(ConfigurationError):
    """Malformed command line or configuration file (exit code 2)."""


@dataclass
class RunConfig:
    # data
    dataset: str = "synthetic"
    data_path: str = ""
    train_subset: int = 5000
    test_subset: int = 0
    synth_per_class: int = 200
    synth_test_per_class: int = 50
    synth_classes: int = 4
    synth_size: int = 32
    synth_noise: float = 0.1
    data_seed: int = 0
    # architectures
    teacher_depth: int = 3
    teacher_width: int = 16
    student_depth: int = 1
    student_width: int = 16
    # optimisation
    teacher_epochs: int = 60
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drops: list = dataclasses.field(default_factory=list)
    lr_drop_factor: float = 0.1
    augment_pad: int = 4
    augment_flip: bool = True
    para_epochs: int = 10
    para_lr: float = 0.01
    para_grad_clip: float = 10.0
    para_max_steps: int = 0
    # method
    method: str = "ft"
    ablation: str = "both"
    k: float = 0.5
    beta: float = 500.0
    p: int = 1
    T: float = 4.0
    beta_at: float = 1000.0
    # run bookkeeping
    seed: int = 1
    seeds: list = dataclasses.field(default_factory=lambda: [1, 2, 3, 4, 5])
    methods: list = dataclasses.field(default_factory=lambda: ["scratch", "at", "kd", "ft", "at+kd", "ft+kd"])
    k_sweep: list = dataclasses.field(default_factory=list)
    out_dir: str = "runs"
    teacher: str = ""
    paraphraser: str = ""
    checkpoint: str = ""
    record_seconds: bool = False

    # -- conversions --------------------------------------------------------

    def factor(self, k=None) -> FactorConfig:
        return FactorConfig(k=self.k if k is None else k, beta=self.beta, p=self.p, T=self.T, beta_at=self.beta_at)

    def _drops(self, epochs: int):
        return tuple(int(d) for d in self.lr_drops) if self.lr_drops else None

    def teacher_train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.teacher_epochs, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           lr_drop_epochs=self._drops(self.teacher_epochs), lr_drop_factor=self.lr_drop_factor,
                           seed=self.seed, augment_pad=self.augment_pad, augment_flip=self.augment_flip)

    def paraphraser_train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.para_epochs, batch_size=self.batch_size, lr=self.para_lr,
                           momentum=self.momentum, weight_decay=self.weight_decay, lr_drop_epochs=(),
                           seed=self.seed, factor=self.factor(), augment_pad=self.augment_pad,
                           augment_flip=self.augment_flip, max_steps=self.para_max_steps or None,
                           grad_clip=self.para_grad_clip or None)

    def student_train_config(self, method=None, seed=None, k=None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, lr_drop_epochs=self._drops(self.epochs),
                           lr_drop_factor=self.lr_drop_factor, seed=self.seed if seed is None else seed,
                           method=method or self.method, factor=self.factor(k), ablation=self.ablation,
                           augment_pad=self.augment_pad, augment_flip=self.augment_flip)

    # -- text form ------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _default_of(name: str):
    f = FIELD_TYPES[name]
    return f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default


def coerce(name: str, raw: str):
    """Convert the text ``raw`` to the type of field ``name``."""
    if name not in FIELD_TYPES:
        raise UsageError(f"unknown configuration key {name!r}")
    default = _default_of(name)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [item.strip() for item in raw.split(",") if item.strip()]
            if name in ("seeds", "lr_drops"):
                return [int(i) for i in items]
            if name == "k_sweep":
                return [float(i) for i in items]
            return items
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip().replace("-", "_")
        if key not in FIELD_TYPES:
            raise UsageError(f"{source}:{lineno}: unknown configuration key {key!r}")
        values[key] = coerce(key, value)
    return values


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """File values first, then ``overrides`` (already-typed CLI values) on top."""
    values = {}
    if path:
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"configuration file not found: {path}")
        values.update(parse_text(path.read_text(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise UsageError(f"unknown configuration key {key!r}")
        values[key] = value
    return RunConfig(**values)
