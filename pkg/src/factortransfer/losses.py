"""Training objectives: reconstruction, cross-entropy, factor transfer, KD and AT."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DataFormatError, DimensionError
from .tensor import Tensor, flatten, mean, mul, pick, row_pnorm, square, tsum

METHODS = ("scratch", "ft", "kd", "at", "ft+kd", "at+kd")

# column headers of the usual comparison table
METHOD_LABELS = {"scratch": "Student", "at": "AT", "kd": "KD", "ft": "FT", "at+kd": "AT+KD", "ft+kd": "FT+KD"}


@dataclass(frozen=True)
class FactorConfig:
    """Factor-transfer hyperparameters.

    k is the paraphrase rate, beta the FT weight, p the norm used between
    normalised factors, T the KD temperature and beta_at the AT weight.
    """

    k: float = 0.5
    beta: float = 500.0
    p: int = 1
    T: float = 4.0
    beta_at: float = 1000.0

    def __post_init__(self):
        if self.beta < 0 or self.beta_at < 0:
            raise ConfigurationError("beta must be non-negative")
        if not self.T > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.T}")
        if self.p not in (1, 2):
            raise ConfigurationError(f"p must be 1 or 2, got {self.p}")
        if not self.k > 0:
            raise ConfigurationError(f"paraphrase rate must be positive, got {self.k}")


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def reconstruction_loss(x: Tensor, px: Tensor) -> Tensor:
    """Batch mean of the per-sample squared Euclidean distance ||x - P(x)||^2."""
    _same_shape(x, px, "reconstruction_loss")
    diff = flatten(x - px)
    return mean(tsum(square(diff), axis=1))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataFormatError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return -mean(pick(F.log_softmax(logits), labels))


def factor_transfer_loss(ft: Tensor, fs: Tensor, p: int = 1) -> Tensor:
    """Batch mean of || ft/||ft|| - fs/||fs|| ||_p over flattened per-sample factors.

    ``ft`` is treated as a constant.
    """
    _same_shape(ft, fs, "factor_transfer_loss")
    target = F.l2_normalize(flatten(ft.detach()))
    diff = F.l2_normalize(flatten(fs)) - target
    return mean(row_pnorm(diff, p))


def student_loss(cls: Tensor, ft: Tensor, beta: float) -> Tensor:
    if beta < 0:
        raise ConfigurationError("beta must be non-negative")
    return cls + mul(ft, beta)


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, T: float = 4.0) -> Tensor:
    """T^2 * KL(softmax(teacher/T) || softmax(student/T)), batch mean."""
    _same_shape(student_logits, teacher_logits, "kd_loss")
    if not T > 0:
        raise ConfigurationError(f"temperature must be positive, got {T}")
    teacher = teacher_logits.detach()
    log_pt = F.log_softmax(teacher, T).data
    pt = np.exp(log_pt)
    log_ps = F.log_softmax(student_logits, T)
    # sum_k pt * (log pt - log ps); the entropy part is a constant
    const = (pt * log_pt).sum(axis=1)
    cross = tsum(mul(log_ps, Tensor(pt, dtype=pt.dtype)), axis=1)
    per_sample = Tensor(const, dtype=const.dtype) - cross
    return mul(mean(per_sample), T * T)


def attention_map(feature: Tensor) -> Tensor:
    """Channel-wise sum of squared activations, flattened to [N, H*W] and l2-normalised."""
    if feature.ndim != 4:
        raise DimensionError(f"attention_map expects [N,C,H,W], got {feature.shape}")
    energy = tsum(square(feature), axis=1)
    return F.l2_normalize(flatten(energy))


def at_loss(student_groups, teacher_groups, beta: float = 1.0) -> Tensor:
    """Sum over paired groups of the batch-mean l2 distance between attention maps, times beta."""
    student_groups = list(student_groups.values() if isinstance(student_groups, Mapping) else student_groups)
    teacher_groups = list(teacher_groups.values() if isinstance(teacher_groups, Mapping) else teacher_groups)
    if len(student_groups) != len(teacher_groups) or not student_groups:
        raise DimensionError("at_loss needs the same non-zero number of student and teacher groups")
    total = None
    for i, (fs, ft) in enumerate(zip(student_groups, teacher_groups)):
        if fs.shape[0] != ft.shape[0] or fs.shape[2:] != ft.shape[2:]:
            raise DimensionError(f"at_loss group {i}: spatial shapes {fs.shape} and {ft.shape} differ")
        target = attention_map(ft.detach()).detach()
        term = mean(row_pnorm(attention_map(fs) - target, 2))
        total = term if total is None else total + term
    return mul(total, beta)


def compose_total(method: str, parts: Mapping[str, Tensor], factor: FactorConfig) -> Tensor:
    """Total student objective for ``method`` from named loss parts.

    ``parts`` holds any of ``cls``, ``ft``, ``kd``, ``at`` (unweighted).
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    needed = {"cls"}
    if "ft" in method:
        needed.add("ft")
    if "kd" in method:
        needed.add("kd")
    if method.startswith("at"):
        needed.add("at")
    missing = sorted(needed - set(parts))
    if missing:
        raise ConfigurationError(f"method {method!r} needs loss parts: {', '.join(missing)}")
    total = parts["cls"]
    if "ft" in needed:
        total = student_loss(total, parts["ft"], factor.beta)
    if "at" in needed:
        total = total + mul(parts["at"], factor.beta_at)
    if "kd" in needed:
        total = total + parts["kd"]
    return total
