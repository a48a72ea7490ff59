"""Optimisation, schedules and the three training stages (teacher, paraphraser, student)."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .data import Batch, Dataset, augment, batch_iter, channel_stats, normalize
from .errors import ConfigurationError, DivergenceError
from .losses import (METHODS, FactorConfig, at_loss, compose_total, cross_entropy, factor_transfer_loss,
                     kd_loss, reconstruction_loss)
from .nn import (Network, build_paraphraser, build_student, build_teacher, build_translator, extract_factor,
                 factor_channels)
from .tensor import Tensor, backward, no_grad

ABLATIONS = ("both", "para_only", "trans_only", "neither")
CSV_FIELDS = ("epoch", "lr", "l_cls", "l_ft", "l_kd", "l_at", "l_rec", "train_err", "test_err", "seconds")


def derive_seed(seed: int, label: str) -> int:
    """Independent 64-bit seed for a named random stream."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: tuple[int, ...] | None = None  # None: 50% and 75% of epochs
    lr_drop_factor: float = 0.1
    seed: int = 0
    method: str = "scratch"
    factor: FactorConfig = field(default_factory=FactorConfig)
    ablation: str = "both"
    augment_pad: int = 4
    augment_flip: bool = True
    max_steps: int | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigurationError("grad_clip must be positive when set")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        drops = self.drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigurationError(f"lr drop epochs must be strictly increasing, got {list(drops)}")
        if drops and (drops[0] < 0 or drops[-1] >= max(self.epochs, 1)):
            raise ConfigurationError(f"lr drop epochs must lie in [0, {self.epochs}), got {list(drops)}")

    @property
    def drop_epochs(self) -> tuple[int, ...]:
        if self.lr_drop_epochs is not None:
            return tuple(self.lr_drop_epochs)
        marks = sorted({self.epochs // 2, (3 * self.epochs) // 4} - {0})
        return tuple(m for m in marks if m < self.epochs)


def lr_at(epoch: int, config: TrainConfig) -> float:
    drops = sum(1 for d in config.drop_epochs if d <= epoch)
    return config.lr * config.lr_drop_factor ** drops


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], velocity: dict[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float, no_decay=frozenset()) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v (in place)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        wd = 0.0 if name in no_decay else weight_decay
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        if wd:
            v += wd * p.data
        p.data -= p.data.dtype.type(lr) * v


class SGD:
    """Momentum SGD; batchnorm scale/shift are exempt from weight decay."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 5e-4,
                 grad_clip: float | None = None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity: dict[str, np.ndarray] = {}
        self.no_decay = frozenset(n for n in params if n.endswith((".gamma", ".beta")))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {n: None if g is None else g * g.dtype.type(scale) for n, g in grads.items()}
        sgd_step(self.params, grads, self.velocity, lr, self.momentum, self.weight_decay, self.no_decay)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_cls: float | None = None
    l_ft: float | None = None
    l_kd: float | None = None
    l_at: float | None = None
    l_rec: float | None = None
    train_err: float | None = None
    test_err: float | None = None
    seconds: float | None = None


@dataclass
class Metrics:
    records: list[EpochRecord] = field(default_factory=list)
    steps: list[dict[str, float]] = field(default_factory=list)
    rng_state: dict | None = None

    def to_csv(self, include_seconds: bool = False) -> str:
        """CSV text; wall time is left blank unless requested so reruns are byte-identical."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.records:
            row = []
            for name in CSV_FIELDS:
                value = getattr(r, name)
                if name == "seconds" and not include_seconds:
                    value = None
                row.append("" if value is None else (str(value) if name == "epoch" else repr(float(value))))
            writer.writerow(row)
        return out.getvalue()

    def write_csv(self, path: str | Path, include_seconds: bool = False) -> None:
        Path(path).write_text(self.to_csv(include_seconds))

    def write_timing(self, path: str | Path) -> None:
        lines = [f"epoch={r.epoch} seconds={r.seconds:.3f}" for r in self.records]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @property
    def final_test_err(self) -> float | None:
        return self.records[-1].test_err if self.records else None


# ---------------------------------------------------------------------------
# shared loop


@dataclass
class Preprocess:
    mean: np.ndarray
    std: np.ndarray
    pad: int = 0
    flip: bool = False

    @classmethod
    def for_training(cls, train: Dataset, config: TrainConfig, norm=None) -> Preprocess:
        mean, std = norm if norm is not None else channel_stats(train)
        return cls(np.asarray(mean), np.asarray(std), config.augment_pad, config.augment_flip)

    def __call__(self, batch: Batch, rng: np.random.Generator | None) -> Batch:
        if rng is not None and (self.pad or self.flip):
            batch = augment(batch, self.pad, self.flip, rng)
        return normalize(batch, self.mean, self.std)


def error_percent(net: Network, dataset: Dataset, prep: Preprocess, batch_size: int = 256) -> float:
    classes = net.group_shapes[list(net.groups)[-1]][0]
    if classes != dataset.class_count:
        raise ConfigurationError(f"network predicts {classes} classes but dataset has {dataset.class_count}")
    was_training = net.training
    net.eval()
    wrong = 0
    with no_grad():
        for batch in batch_iter(dataset, batch_size):
            logits = net(prep(batch, None).x)
            wrong += int((logits.data.argmax(axis=1) != batch.y).sum())
    net.training = was_training
    return 100.0 * wrong / len(dataset)


StepFn = Callable[[Batch], tuple[Tensor, dict[str, float], Tensor | None]]


def _fit(step_fn: StepFn, params: dict[str, Tensor], config: TrainConfig, train: Dataset,
         prep: Preprocess, evaluate_fn: Callable[[], float] | None, set_train: Callable[[], None]) -> Metrics:
    opt = SGD(params, config.momentum, config.weight_decay, config.grad_clip)
    shuffle_rng = derive_rng(config.seed, "shuffle")
    aug_rng = derive_rng(config.seed, "augment")
    metrics = Metrics()
    step = 0
    for epoch in range(config.epochs):
        if config.max_steps is not None and step >= config.max_steps:
            break
        start = time.perf_counter()
        lr = lr_at(epoch, config)
        set_train()
        sums: dict[str, float] = {}
        seen = wrong = 0
        with_logits = False
        for batch in batch_iter(train, config.batch_size, shuffle=True, seed=shuffle_rng):
            batch = prep(batch, aug_rng)
            opt.zero_grad()
            total, parts, logits = step_fn(batch)
            value = float(total.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {step}, lr {lr}")
            backward(total)
            opt.step(lr)
            n = len(batch)
            for key, v in parts.items():
                sums[key] = sums.get(key, 0.0) + v * n
            seen += n
            if logits is not None:
                with_logits = True
                wrong += int((logits.data.argmax(axis=1) != batch.y).sum())
            metrics.steps.append({"epoch": epoch, "total": value, **parts})
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        record = EpochRecord(epoch, lr, **{k: sums[k] / seen for k in sums})
        if with_logits:
            record.train_err = 100.0 * wrong / seen
        if evaluate_fn is not None:
            record.test_err = evaluate_fn()
        record.seconds = time.perf_counter() - start
        metrics.records.append(record)
    metrics.rng_state = {"shuffle": shuffle_rng.bit_generator.state, "augment": aug_rng.bit_generator.state}
    return metrics


def _arch_args(arch) -> tuple[int, int]:
    if isinstance(arch, dict):
        return int(arch["depth_blocks"]), int(arch["width"])
    depth, width = arch
    return int(depth), int(width)


# ---------------------------------------------------------------------------
# stage 0: teacher


def train_teacher(data: tuple[Dataset, Dataset], arch, config: TrainConfig, norm=None,
                  builder=build_teacher) -> tuple[Checkpoint, Metrics]:
    """Cross-entropy training; ``arch`` is (depth_blocks, width) or a dict with those keys."""
    train, test = data
    depth, width = _arch_args(arch)
    net = builder(depth, width, train.class_count, train.image_shape, seed=derive_seed(config.seed, "teacher_init"))
    prep = Preprocess.for_training(train, config, norm)

    def step_fn(batch):
        logits = net(batch.x)
        loss = cross_entropy(logits, batch.y)
        return loss, {"l_cls": float(loss.data)}, logits

    metrics = _fit(step_fn, net.parameters(), config, train, prep,
                   lambda: error_percent(net, test, prep), net.train)
    net.eval()
    ckpt = Checkpoint.from_network(net, len(metrics.steps), metrics.rng_state)
    ckpt.norm = (prep.mean, prep.std)
    return ckpt, metrics


# ---------------------------------------------------------------------------
# stage 1: paraphraser


def _teacher_net(teacher_ckpt) -> Network:
    net = teacher_ckpt.to_network() if isinstance(teacher_ckpt, Checkpoint) else teacher_ckpt
    net.eval()
    for p in net.parameters().values():
        p.requires_grad = False
    return net


def train_paraphraser(teacher_ckpt, data: tuple[Dataset, Dataset], factor: FactorConfig, config: TrainConfig,
                      norm=None) -> tuple[Checkpoint, Metrics]:
    """Unsupervised reconstruction of the frozen teacher's last-group features; labels are never read."""
    train, _ = data
    teacher = _teacher_net(teacher_ckpt)
    norm = norm if norm is not None else getattr(teacher_ckpt, "norm", None)
    m, h, w = teacher.group_shapes["g3"]
    para = build_paraphraser(m, factor.k, (h, w), seed=derive_seed(config.seed, "paraphraser_init"))
    prep = Preprocess.for_training(train, config, norm)

    def step_fn(batch):
        with no_grad():
            feat = teacher.run_until("g3", batch.x)
        loss = reconstruction_loss(feat, para(feat))
        return loss, {"l_rec": float(loss.data)}, None

    metrics = _fit(step_fn, para.parameters(), config, train, prep, None, para.train)
    para.eval()
    ckpt = Checkpoint.from_network(para, len(metrics.steps), metrics.rng_state)
    ckpt.norm = (prep.mean, prep.std)
    return ckpt, metrics


# ---------------------------------------------------------------------------
# stage 2: student (+ translator)


class StudentObjective:
    """Per-batch stage-2 objective for any method / ablation mode.

    The teacher and paraphraser only ever run without recording a tape, so
    gradients reach exactly the student and (when present) the translator.
    """

    def __init__(self, student: Network, config: TrainConfig, teacher: Network | None = None,
                 paraphraser: Network | None = None):
        self.student = student
        self.config = config
        self.method = config.method
        self.factor = config.factor
        self.teacher = teacher
        self.paraphraser = None
        self.translator = None
        uses_ft = "ft" in self.method
        if self.method != "scratch" and teacher is None:
            raise ConfigurationError(f"method {self.method!r} requires a teacher checkpoint")
        if teacher is not None and self.method != "scratch":
            t_shape = teacher.group_shapes["g3"]
            s_shape = student.group_shapes["g3"]
            if t_shape[1:] != s_shape[1:]:
                raise ConfigurationError(
                    f"student last-group spatial size {s_shape[1:]} differs from teacher's {t_shape[1:]}")
            if self.method.startswith("at"):
                for g in student.feature_groups:
                    if teacher.group_shapes[g][1:] != student.group_shapes[g][1:]:
                        raise ConfigurationError(f"AT group {g}: spatial sizes differ")
        if uses_ft:
            self._setup_ft(paraphraser)

    def _setup_ft(self, paraphraser):
        ablation = self.config.ablation
        m, h, w = self.teacher.group_shapes["g3"]
        s = self.student.group_shapes["g3"][0]
        seed = derive_seed(self.config.seed, "translator_init")
        if ablation in ("both", "para_only"):
            if paraphraser is None:
                raise ConfigurationError(f"ft (ablation {ablation}) requires a paraphraser checkpoint")
            if paraphraser.arch["m"] != m:
                raise ConfigurationError(f"paraphraser expects {paraphraser.arch['m']} channels, teacher has {m}")
            self.paraphraser = paraphraser.eval()
            for p in paraphraser.parameters().values():
                p.requires_grad = False
            fc = factor_channels(m, paraphraser.arch["k"])
        else:
            fc = m
        if ablation == "both":
            self.translator = build_translator(s, m, paraphraser.arch["k"], (h, w), seed=seed)
        elif ablation == "trans_only":
            self.translator = build_translator(s, m, 1, (h, w), seed=seed)
        elif s != fc:
            raise ConfigurationError(
                f"ablation {ablation!r} matches raw student features ({s} channels) to a {fc}-channel "
                "target; channel counts must be equal")

    def trainable(self) -> dict[str, Tensor]:
        params = {f"student.{n}": p for n, p in self.student.named_parameters()}
        if self.translator is not None:
            params.update({f"translator.{n}": p for n, p in self.translator.named_parameters()})
        return params

    def set_train(self) -> None:
        self.student.train()
        if self.translator is not None:
            self.translator.train()

    def __call__(self, batch: Batch):
        logits, s_feats = self.student.forward_collect(batch.x)
        cls = cross_entropy(logits, batch.y)
        parts = {"cls": cls}
        t_logits = t_feats = None
        if self.method != "scratch":
            with no_grad():
                t_logits, t_feats = self.teacher.forward_collect(batch.x)
        if "ft" in self.method:
            target = t_feats["g3"]
            if self.paraphraser is not None:
                target = extract_factor(self.paraphraser, target, frozen=True)
            source = s_feats["g3"]
            if self.translator is not None:
                source = extract_factor(self.translator, source, frozen=False)
            parts["ft"] = factor_transfer_loss(target, source, self.factor.p)
        if "kd" in self.method:
            parts["kd"] = kd_loss(logits, t_logits, self.factor.T)
        if self.method.startswith("at"):
            parts["at"] = at_loss(s_feats, t_feats)
        total = compose_total(self.method, parts, self.factor)
        logged = {f"l_{k}": float(v.data) for k, v in parts.items()}
        return total, logged, logits


def train_student(teacher_ckpt, paraphraser_ckpt, data: tuple[Dataset, Dataset], config: TrainConfig,
                  arch=(1, 16), norm=None, return_objective: bool = False):
    """Stage-2 training of student (+ translator) under ``config.method``.

    Returns (student Checkpoint, Metrics), plus the objective when
    ``return_objective`` is set.
    """
    train, test = data
    teacher = _teacher_net(teacher_ckpt) if teacher_ckpt is not None and config.method != "scratch" else None
    if config.method == "scratch":
        teacher = None
    para = None
    if paraphraser_ckpt is not None and "ft" in config.method and config.ablation in ("both", "para_only"):
        para = paraphraser_ckpt.to_network() if isinstance(paraphraser_ckpt, Checkpoint) else paraphraser_ckpt
    if norm is None and teacher_ckpt is not None:
        norm = getattr(teacher_ckpt, "norm", None)
    depth, width = _arch_args(arch)
    student = build_student(depth, width, train.class_count, train.image_shape,
                            seed=derive_seed(config.seed, "student_init"))
    objective = StudentObjective(student, config, teacher, para)
    prep = Preprocess.for_training(train, config, norm)
    metrics = _fit(objective, objective.trainable(), config, train, prep,
                   lambda: error_percent(student, test, prep), objective.set_train)
    student.eval()
    ckpt = Checkpoint.from_network(student, len(metrics.steps), metrics.rng_state)
    ckpt.norm = (prep.mean, prep.std)
    if return_objective:
        return ckpt, metrics, objective
    return ckpt, metrics


def evaluate(ckpt, data: Dataset, norm=None) -> float:
    """Test error in percent (argmax rule, eval mode)."""
    net = ckpt.to_network() if isinstance(ckpt, Checkpoint) else ckpt
    if norm is None:
        norm = getattr(ckpt, "norm", None)
    if norm is None:
        raise ConfigurationError("evaluate needs normalisation statistics (none stored in the checkpoint)")
    prep = Preprocess(np.asarray(norm[0]), np.asarray(norm[1]))
    return error_percent(net, data, prep)
