"""Finite-difference and oracle-equivalence checks for every differentiable op.

Each check draws random float64 instances, reduces the op output to a
scalar with a fixed random projection, and compares autodiff gradients with
central differences.  The error of one instance is the normwise relative
error ``max|a - n| / max(max|a|, max|n|)``; a check reports its worst
instance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import losses as L
from . import nn
from . import tensor as T
from .tensor import Tensor, backward, precision

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4
ORACLE_TOL = 1e-5
STEP = 1e-5


def numerical_grad(f: Callable[[], float], arr: np.ndarray, coords, h: float = STEP) -> np.ndarray:
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        old = arr[c]
        arr[c] = old + h
        up = f()
        arr[c] = old - h
        down = f()
        arr[c] = old
        out[i] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _coords(shape, rng, limit: int):
    total = int(np.prod(shape))
    flat = np.arange(total) if total <= limit else rng.choice(total, limit, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check_function(build: Callable[[], Tensor], inputs: list[Tensor], rng: np.random.Generator,
                   limit: int = 40) -> float:
    """Worst relative error over ``inputs`` for the scalar ``build()``."""
    for t in inputs:
        t.grad = None
    backward(build())
    worst = 0.0

    def value() -> float:
        with T.no_grad():
            return float(build().data)

    for t in inputs:
        coords = _coords(t.shape, rng, limit)
        numeric = numerical_grad(value, t.data, coords)
        analytic = np.array([t.grad[c] for c in coords]) if t.grad is not None else np.zeros(len(coords))
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _project(out: Tensor, proj: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(proj)))


def _op_instance(make_out, inputs, rng, limit=40):
    out_shape = make_out().shape
    proj = rng.standard_normal(out_shape)
    return check_function(lambda: _project(make_out(), proj), inputs, rng, limit)


# -- primitive instances ---------------------------------------------------


def _conv2d(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2))
    size = k + stride * int(rng.integers(1, 4)) - 2 * pad
    x, w, b = _param(rng, n, c, size, size), _param(rng, o, c, k, k), _param(rng, o)
    return _op_instance(lambda: F.conv2d(x, w, b, stride, pad), [x, w, b], rng)


def _conv_transpose2d(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2)) if k > 1 else 0
    size = int(rng.integers(2, 5))
    x, w, b = _param(rng, n, c, size, size), _param(rng, c, o, k, k), _param(rng, o)
    return _op_instance(lambda: F.conv_transpose2d(x, w, b, stride, pad), [x, w, b], rng)


def _leaky_relu(rng):
    x = _param(rng, 3, 4)
    slope = float(rng.uniform(0, 0.5))
    return _op_instance(lambda: F.leaky_relu(x, slope), [x], rng)


def _batchnorm(training: bool):
    def run(rng):
        x = _param(rng, 3, 2, 3, 3)
        gamma, beta = _param(rng, 2), _param(rng, 2)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)

        def make():
            return F.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), 0.1, 1e-5, training)

        return _op_instance(make, [x, gamma, beta], rng)

    return run


def _linear(rng):
    x, w, b = _param(rng, 3, 5), _param(rng, 4, 5), _param(rng, 4)
    return _op_instance(lambda: F.linear(x, w, b), [x, w, b], rng)


def _avg_pool(rng):
    k = int(rng.choice([1, 2]))
    x = _param(rng, 2, 2, 2 * k, 2 * k)
    return _op_instance(lambda: F.avg_pool2d(x, k), [x], rng)


def _global_pool(rng):
    x = _param(rng, 2, 3, 3, 2)
    return _op_instance(lambda: F.global_avg_pool(x), [x], rng)


def _l2_normalize(rng):
    x = _param(rng, 3, 2, 2, 2)
    return _op_instance(lambda: F.l2_normalize(x), [x], rng)


def _softmax(rng):
    x = _param(rng, 3, 5)
    t = float(rng.uniform(0.5, 5))
    return _op_instance(lambda: F.softmax_t(x, t), [x], rng)


def _log_softmax(rng):
    x = _param(rng, 3, 5)
    t = float(rng.uniform(0.5, 5))
    return _op_instance(lambda: F.log_softmax(x, t), [x], rng)


def _elementwise(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    return _op_instance(lambda: T.square(a * b - a) + T.tabs(b) * 0.5, [a, b], rng)


def _reductions(rng):
    a = _param(rng, 3, 4)
    labels = rng.integers(0, 4, 3)
    return _op_instance(lambda: T.row_pnorm(a, 1) + T.row_pnorm(a, 2) + T.pick(a, labels) + T.mean(a, axis=1),
                        [a], rng)


# -- composite instances (losses through three-layer networks) ------------


def _paraphraser_rec(rng):
    m = int(rng.integers(2, 5))
    para = nn.build_paraphraser(m, 0.5, (3, 3), seed=int(rng.integers(1 << 31)))
    x = _param(rng, 2, m, 3, 3)
    params = list(para.parameters().values())
    return check_function(lambda: L.reconstruction_loss(x, para(x)), params + [x], rng, limit=8)


def _translator_ft(p: int):
    def run(rng):
        s, m = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        trans = nn.build_translator(s, m, 1, (3, 3), seed=int(rng.integers(1 << 31)))
        fs = _param(rng, 2, s, 3, 3)
        ft = Tensor(rng.standard_normal((2, m, 3, 3)))
        params = list(trans.parameters().values())

        def build():
            return L.student_loss(T.tsum(fs) * 0.01, L.factor_transfer_loss(ft, trans(fs), p), 5.0)

        return check_function(build, params + [fs], rng, limit=8)

    return run


def _mlp_logits(rng, x: Tensor, k: int):
    w1, w2, w3 = _param(rng, 6, x.shape[1], scale=0.5), _param(rng, 6, 6, scale=0.5), _param(rng, k, 6)
    b1 = _param(rng, 6)

    def logits():
        h = F.leaky_relu(F.linear(x, w1, b1), 0.1)
        h = F.leaky_relu(F.linear(h, w2), 0.1)
        return F.linear(h, w3)

    return logits, [w1, w2, w3, b1, x]


def _cross_entropy(rng):
    x = _param(rng, 4, 5)
    logits, params = _mlp_logits(rng, x, 3)
    labels = rng.integers(0, 3, 4)
    return check_function(lambda: L.cross_entropy(logits(), labels), params, rng, limit=10)


def _kd(rng):
    x = _param(rng, 4, 5)
    logits, params = _mlp_logits(rng, x, 4)
    teacher = Tensor(rng.standard_normal((4, 4)) * 2)
    T_ = float(rng.uniform(1, 5))
    return check_function(lambda: L.kd_loss(logits(), teacher, T_), params, rng, limit=10)


def _at(rng):
    x = _param(rng, 2, 2, 4, 4)
    w1, w2, w3 = _param(rng, 3, 2, 3, 3), _param(rng, 3, 3, 3, 3), _param(rng, 4, 3, 3, 3)
    targets = [Tensor(rng.standard_normal((2, c, 4, 4))) for c in (5, 2, 3)]

    def build():
        h1 = F.leaky_relu(F.conv2d(x, w1, None, 1, 1), 0.1)
        h2 = F.leaky_relu(F.conv2d(h1, w2, None, 1, 1), 0.1)
        h3 = F.conv2d(h2, w3, None, 1, 1)
        return L.at_loss([h1, h2, h3], targets, 3.0)

    return check_function(build, [w1, w2, w3, x], rng, limit=10)


# -- oracle equivalence ------------------------------------------------------


def conv2d_loop_oracle(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int) -> np.ndarray:
    """Direct six-loop cross-correlation (reference only; slow)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, ci, yi * stride + i, xi * stride + j] * w[oi, ci, i, j]
                    out[ni, oi, yi, xi] = acc
    return out


def random_conv_config(rng, max_batch=4, max_ch=8, max_size=16):
    n = int(rng.integers(1, max_batch + 1))
    c = int(rng.integers(1, max_ch + 1))
    o = int(rng.integers(1, max_ch + 1))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    steps = int(rng.integers(0, (max_size + 2 * pad - k) // stride + 1))
    size = k - 2 * pad + stride * steps
    if size < 1:
        size += stride * ((1 - size + stride - 1) // stride)
    return n, c, o, k, stride, pad, size


def _conv_oracle(rng):
    n, c, o, k, stride, pad, size = random_conv_config(rng, 2, 3, 6)
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    return float(np.abs(got - conv2d_loop_oracle(x, w, b, stride, pad)).max())


def _conv_transpose_adjoint(rng):
    """conv_transpose2d(y) against the autodiff input-gradient of conv2d."""
    n, c, o, k, stride, pad, size = random_conv_config(rng, 2, 4, 8)
    w = rng.standard_normal((o, c, k, k))
    u = Tensor(np.zeros((n, c, size, size)), requires_grad=True)
    out = F.conv2d(u, Tensor(w), None, stride, pad)
    y = rng.standard_normal(out.shape)
    backward(T.tsum(T.mul(out, Tensor(y))))
    got = F.conv_transpose2d(Tensor(y), Tensor(w), None, stride, pad).data
    return float(np.abs(got - u.grad).max())


@dataclass(frozen=True)
class Check:
    name: str
    kind: str  # "primitive", "composite" or "oracle"
    tolerance: float
    instance: Callable[[np.random.Generator], float]


CHECKS: tuple[Check, ...] = (
    Check("conv2d", "primitive", PRIMITIVE_TOL, _conv2d),
    Check("conv_transpose2d", "primitive", PRIMITIVE_TOL, _conv_transpose2d),
    Check("leaky_relu", "primitive", PRIMITIVE_TOL, _leaky_relu),
    Check("batchnorm2d_train", "primitive", PRIMITIVE_TOL, _batchnorm(True)),
    Check("batchnorm2d_eval", "primitive", PRIMITIVE_TOL, _batchnorm(False)),
    Check("linear", "primitive", PRIMITIVE_TOL, _linear),
    Check("avg_pool2d", "primitive", PRIMITIVE_TOL, _avg_pool),
    Check("global_avg_pool", "primitive", PRIMITIVE_TOL, _global_pool),
    Check("l2_normalize", "primitive", PRIMITIVE_TOL, _l2_normalize),
    Check("softmax_t", "primitive", PRIMITIVE_TOL, _softmax),
    Check("log_softmax", "primitive", PRIMITIVE_TOL, _log_softmax),
    Check("elementwise", "primitive", PRIMITIVE_TOL, _elementwise),
    Check("reductions", "primitive", PRIMITIVE_TOL, _reductions),
    Check("reconstruction_loss", "composite", COMPOSITE_TOL, _paraphraser_rec),
    Check("factor_transfer_loss_p1", "composite", COMPOSITE_TOL, _translator_ft(1)),
    Check("factor_transfer_loss_p2", "composite", COMPOSITE_TOL, _translator_ft(2)),
    Check("cross_entropy", "composite", COMPOSITE_TOL, _cross_entropy),
    Check("kd_loss", "composite", COMPOSITE_TOL, _kd),
    Check("at_loss", "composite", COMPOSITE_TOL, _at),
    Check("conv2d_loop_oracle", "oracle", ORACLE_TOL, _conv_oracle),
    Check("conv_transpose_adjoint", "oracle", ORACLE_TOL, _conv_transpose_adjoint),
)


@dataclass
class CheckResult:
    name: str
    kind: str
    worst: float
    tolerance: float
    instances: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst < self.tolerance


def run_checks(ops=None, instances: int = 50, seed: int = 0) -> list[CheckResult]:
    """Run the selected checks (all by default) in float64."""
    selected = [c for c in CHECKS if ops is None or c.name in ops or c.name.split("_p")[0] in ops]
    if ops is not None:
        unknown = set(ops) - {c.name for c in CHECKS} - {c.name.split("_p")[0] for c in CHECKS}
        if unknown:
            raise KeyError(f"unknown gradcheck op(s): {', '.join(sorted(unknown))}")
    results = []
    with precision(np.float64):
        for check in selected:
            rng = np.random.default_rng([seed, sum(map(ord, check.name))])
            start = time.perf_counter()
            worst = 0.0
            for _ in range(instances):
                err = check.instance(rng)
                worst = max(worst, err) if np.isfinite(err) else float("inf")
            results.append(CheckResult(check.name, check.kind, worst, check.tolerance, instances,
                                       time.perf_counter() - start))
    return results
