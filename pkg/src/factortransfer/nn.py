"""Layer composition and the four architectures: teacher, student, paraphraser, translator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, default_dtype, flatten, no_grad

LEAKY_SLOPE = 0.1
KINDS = ("conv", "conv_transpose", "batchnorm", "leaky_relu", "relu", "avg_pool",
         "global_avg_pool", "linear", "residual_block", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; unused fields keep their defaults."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    slope: float = 0.0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")


def conv(cin, cout, kernel=3, stride=1, padding=1, bias=True) -> LayerSpec:
    return LayerSpec("conv", cin, cout, kernel, stride, padding, bias=bias)


def conv_transpose(cin, cout, kernel=3, stride=1, padding=1, bias=True) -> LayerSpec:
    return LayerSpec("conv_transpose", cin, cout, kernel, stride, padding, bias=bias)


def residual_block(cin, cout, stride=1) -> LayerSpec:
    return LayerSpec("residual_block", cin, cout, stride=stride)


def factor_channels(m: int, k) -> int:
    """round(m * k) with round-half-up; ``k`` may be a float, str or Fraction."""
    k = k if isinstance(k, Fraction) else Fraction(str(k))
    c = int((Decimal(m * k.numerator) / Decimal(k.denominator)).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    if c < 1:
        raise ConfigurationError(f"paraphrase rate k={k} gives {c} factor channels for m={m}; need >= 1")
    return c


# ---------------------------------------------------------------------------
# layers


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


class Layer:
    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Layer] = {}

    def named_parameters(self, prefix: str):
        for name, p in self.params.items():
            yield f"{prefix}.{name}", p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}.{cname}")

    def named_buffers(self, prefix: str):
        for name, b in self.buffers.items():
            yield f"{prefix}.{name}", b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}.{cname}")

    def output_shape(self, shape):
        return shape

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, spec: LayerSpec, rng):
        super().__init__()
        self.spec = spec
        k = spec.kernel
        self.params["weight"] = _he_normal(rng, (spec.out_channels, spec.in_channels, k, k),
                                           spec.in_channels * k * k)
        if spec.bias:
            self.params["bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def output_shape(self, shape):
        c, h, w = shape
        s = self.spec
        if c != s.in_channels:
            raise DimensionError(f"conv expects {s.in_channels} input channels, got {c}")
        return (s.out_channels, F.conv_output_size(h, s.kernel, s.stride, s.padding),
                F.conv_output_size(w, s.kernel, s.stride, s.padding))

    def __call__(self, x, training):
        return F.conv2d(x, self.params["weight"], self.params.get("bias"), self.spec.stride, self.spec.padding)


class ConvTranspose(Layer):
    def __init__(self, spec: LayerSpec, rng):
        super().__init__()
        self.spec = spec
        k = spec.kernel
        self.params["weight"] = _he_normal(rng, (spec.in_channels, spec.out_channels, k, k),
                                           spec.in_channels * k * k)
        if spec.bias:
            self.params["bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def output_shape(self, shape):
        c, h, w = shape
        s = self.spec
        if c != s.in_channels:
            raise DimensionError(f"conv_transpose expects {s.in_channels} input channels, got {c}")
        ho = (h - 1) * s.stride - 2 * s.padding + s.kernel
        wo = (w - 1) * s.stride - 2 * s.padding + s.kernel
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"conv_transpose output {ho}x{wo} is not positive")
        return (s.out_channels, ho, wo)

    def __call__(self, x, training):
        return F.conv_transpose2d(x, self.params["weight"], self.params.get("bias"),
                                  self.spec.stride, self.spec.padding)


class BatchNorm(Layer):
    momentum = 0.1
    eps = 1e-5

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = Tensor(np.ones(channels), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(channels), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels, dtype=default_dtype())
        self.buffers["running_var"] = np.ones(channels, dtype=default_dtype())

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise DimensionError(f"batchnorm expects {self.channels} channels, got {shape[0]}")
        return shape

    def __call__(self, x, training):
        return F.batchnorm2d(x, self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
                             self.buffers["running_var"], self.momentum, self.eps, training)


class Activation(Layer):
    def __init__(self, slope: float):
        super().__init__()
        self.slope = slope

    def __call__(self, x, training):
        return F.leaky_relu(x, self.slope)


class AvgPool(Layer):
    def __init__(self, kernel: int):
        super().__init__()
        self.kernel = kernel

    def output_shape(self, shape):
        c, h, w = shape
        if h % self.kernel or w % self.kernel:
            raise ConfigurationError(f"avg_pool: {h}x{w} not divisible by {self.kernel}")
        return (c, h // self.kernel, w // self.kernel)

    def __call__(self, x, training):
        return F.avg_pool2d(x, self.kernel)


class GlobalAvgPool(Layer):
    def output_shape(self, shape):
        return (shape[0], 1, 1)

    def __call__(self, x, training):
        return F.global_avg_pool(x)


class Flatten(Layer):
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def __call__(self, x, training):
        return flatten(x)


class Linear(Layer):
    def __init__(self, spec: LayerSpec, rng):
        super().__init__()
        self.spec = spec
        self.params["weight"] = _he_normal(rng, (spec.out_channels, spec.in_channels), spec.in_channels)
        if spec.bias:
            self.params["bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def output_shape(self, shape):
        if shape != (self.spec.in_channels,):
            raise DimensionError(f"linear expects ({self.spec.in_channels},) features, got {shape}")
        return (self.spec.out_channels,)

    def __call__(self, x, training):
        return F.linear(x, self.params["weight"], self.params.get("bias"))


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus shortcut, then relu.

    A downsampling block (stride 2) uses a 4x4/stride-2/pad-1 first conv so
    even spatial sizes halve exactly; its projection shortcut is a 2x2 average
    pool followed by a 1x1 conv and batchnorm.
    """

    def __init__(self, spec: LayerSpec, rng):
        super().__init__()
        self.spec = spec
        cin, cout, s = spec.in_channels, spec.out_channels, spec.stride
        if s not in (1, 2):
            raise ConfigurationError(f"residual block stride must be 1 or 2, got {s}")
        first = conv(cin, cout, 3, 1, 1, bias=False) if s == 1 else conv(cin, cout, 4, 2, 1, bias=False)
        self.children["conv1"] = Conv(first, rng)
        self.children["bn1"] = BatchNorm(cout)
        self.children["conv2"] = Conv(conv(cout, cout, 3, 1, 1, bias=False), rng)
        self.children["bn2"] = BatchNorm(cout)
        self.project = cin != cout or s != 1
        if self.project:
            if s == 2:
                self.children["pool"] = AvgPool(2)
            self.children["proj"] = Conv(conv(cin, cout, 1, 1, 0, bias=False), rng)
            self.children["proj_bn"] = BatchNorm(cout)

    def output_shape(self, shape):
        main = shape
        for name in ("conv1", "bn1", "conv2", "bn2"):
            main = self.children[name].output_shape(main)
        skip = shape
        if self.project:
            for name in ("pool", "proj", "proj_bn"):
                if name in self.children:
                    skip = self.children[name].output_shape(skip)
        if skip != main:
            raise DimensionError(f"residual skip shape {skip} != main path shape {main}")
        return main

    def __call__(self, x, training):
        ch = self.children
        h = F.relu(ch["bn1"](ch["conv1"](x, training), training))
        h = ch["bn2"](ch["conv2"](h, training), training)
        skip = x
        if self.project:
            if "pool" in ch:
                skip = ch["pool"](skip, training)
            skip = ch["proj_bn"](ch["proj"](skip, training), training)
        return F.relu(h + skip)


def make_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    if spec.kind == "conv":
        return Conv(spec, rng)
    if spec.kind == "conv_transpose":
        return ConvTranspose(spec, rng)
    if spec.kind == "batchnorm":
        return BatchNorm(spec.out_channels or spec.in_channels)
    if spec.kind == "leaky_relu":
        return Activation(spec.slope)
    if spec.kind == "relu":
        return Activation(0.0)
    if spec.kind == "avg_pool":
        return AvgPool(spec.kernel)
    if spec.kind == "global_avg_pool":
        return GlobalAvgPool()
    if spec.kind == "linear":
        return Linear(spec, rng)
    if spec.kind == "residual_block":
        return ResidualBlock(spec, rng)
    return Flatten()


# ---------------------------------------------------------------------------
# networks


@dataclass(eq=False)
class Network:
    """Ordered named groups of layers built for a fixed per-sample input shape.

    ``arch`` is a JSON-serialisable descriptor sufficient to rebuild the
    network (see :func:`build_from_arch`).  ``feature_groups`` names the
    groups whose outputs :meth:`forward_collect` reports.
    """

    arch: dict
    group_specs: dict[str, list[LayerSpec]]
    input_shape: tuple[int, int, int]
    seed: int = 0
    feature_groups: tuple[str, ...] = ()
    training: bool = True
    groups: dict[str, list[Layer]] = field(init=False)
    group_shapes: dict[str, tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.groups = {name: [make_layer(s, rng) for s in specs] for name, specs in self.group_specs.items()}
        shape = tuple(self.input_shape)
        self.group_shapes = {}
        for name, layers in self.groups.items():
            for layer in layers:
                shape = layer.output_shape(shape)
            self.group_shapes[name] = shape
        names = [n for n, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise ConfigurationError("duplicate parameter names")

    @property
    def identifier(self) -> str:
        return json.dumps(self.arch, sort_keys=True, separators=(",", ":"))

    def named_parameters(self):
        for gname, layers in self.groups.items():
            for i, layer in enumerate(layers):
                yield from layer.named_parameters(f"{gname}.{i}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for gname, layers in self.groups.items():
            for i, layer in enumerate(layers):
                out.update(layer.named_buffers(f"{gname}.{i}"))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def train(self) -> Network:
        self.training = True
        return self

    def eval(self) -> Network:
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def run_group(self, name: str, x: Tensor) -> Tensor:
        for layer in self.groups[name]:
            x = layer(x, self.training)
        return x

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.input_shape[0]:
            raise DimensionError(f"network expects [N,{self.input_shape[0]},H,W] input, got {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        for name in self.groups:
            x = self.run_group(name, x)
        return x

    __call__ = forward

    def forward_collect(self, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        """Return the final output and every feature group's output."""
        self._check_input(x)
        feats = {}
        for name in self.groups:
            x = self.run_group(name, x)
            if name in self.feature_groups:
                feats[name] = x
        return x, feats

    def run_until(self, last_group: str, x: Tensor) -> Tensor:
        self._check_input(x)
        for name in self.groups:
            x = self.run_group(name, x)
            if name == last_group:
                return x
        raise KeyError(last_group)


def forward_collect(net: Network, batch: Tensor):
    return net.forward_collect(batch)


def _resnet(kind: str, depth_blocks: int, width: int, classes: int, input_shape, seed: int) -> Network:
    if depth_blocks < 1 or width < 8 or classes < 2:
        raise ConfigurationError(
            f"{kind}: need depth_blocks >= 1, width >= 8, classes >= 2 (got {depth_blocks}, {width}, {classes})")
    c_in, h, w = input_shape
    if h % 4 or w % 4:
        raise ConfigurationError(f"{kind}: input spatial size {h}x{w} must be divisible by 4")
    widths = (width, 2 * width, 4 * width)
    specs: dict[str, list[LayerSpec]] = {
        "stem": [conv(c_in, width, 3, 1, 1, bias=False), LayerSpec("batchnorm", out_channels=width),
                 LayerSpec("relu")]}
    prev = width
    for g, (cw, stride) in enumerate(zip(widths, (1, 2, 2)), start=1):
        blocks = []
        for b in range(depth_blocks):
            blocks.append(residual_block(prev, cw, stride if b == 0 else 1))
            prev = cw
        specs[f"g{g}"] = blocks
    specs["head"] = [LayerSpec("global_avg_pool"), LayerSpec("flatten"), LayerSpec("linear", prev, classes)]
    arch = {"kind": kind, "depth_blocks": depth_blocks, "width": width, "classes": classes,
            "input_shape": list(input_shape)}
    return Network(arch, specs, tuple(input_shape), seed, ("g1", "g2", "g3"))


def build_teacher(depth_blocks: int, width: int, classes: int, input_shape=(3, 32, 32), seed: int = 0) -> Network:
    return _resnet("teacher", depth_blocks, width, classes, input_shape, seed)


def build_student(depth_blocks: int, width: int, classes: int, input_shape=(3, 32, 32), seed: int = 0) -> Network:
    return _resnet("student", depth_blocks, width, classes, input_shape, seed)


def build_paraphraser(m: int, k, spatial=(8, 8), seed: int = 0) -> Network:
    """Stride-1 conv encoder (output = factor) and transposed-conv decoder."""
    fc = factor_channels(m, k)
    a = LayerSpec("leaky_relu", slope=LEAKY_SLOPE)
    encoder = [conv(m, m), a, conv(m, fc), a, conv(fc, fc), a]
    decoder = [conv_transpose(fc, m), a, conv_transpose(m, m), a, conv_transpose(m, m)]
    arch = {"kind": "paraphraser", "m": m, "k": str(k), "spatial": list(spatial)}
    return Network(arch, {"encoder": encoder, "decoder": decoder}, (m, *spatial), seed, ("encoder", "decoder"))


def build_translator(s: int, m: int, k, spatial=(8, 8), teacher_spatial=None, seed: int = 0) -> Network:
    """Stride-1 conv stack mapping student features to the teacher-factor shape."""
    if teacher_spatial is not None and tuple(teacher_spatial) != tuple(spatial):
        raise ConfigurationError(
            f"student last-group spatial size {tuple(spatial)} differs from teacher's {tuple(teacher_spatial)}; "
            "change the architectures so both share a stride plan")
    fc = factor_channels(m, k)
    a = LayerSpec("leaky_relu", slope=LEAKY_SLOPE)
    layers = [conv(s, s), a, conv(s, fc), a, conv(fc, fc)]
    arch = {"kind": "translator", "s": s, "m": m, "k": str(k), "spatial": list(spatial)}
    return Network(arch, {"translator": layers}, (s, *spatial), seed, ("translator",))


def extract_factor(net: Network, feature: Tensor, frozen: bool) -> Tensor:
    """Run a paraphraser's encoder or a translator on ``feature``.

    A frozen extraction records nothing on the tape, so neither the module
    nor anything upstream of ``feature`` receives gradient.
    """
    group = "encoder" if "encoder" in net.groups else "translator"
    if frozen:
        with no_grad():
            return net.run_until(group, feature.detach())
    return net.run_until(group, feature)


def build_from_arch(arch: dict, seed: int = 0) -> Network:
    kind = arch["kind"]
    if kind in ("teacher", "student"):
        return _resnet(kind, arch["depth_blocks"], arch["width"], arch["classes"], tuple(arch["input_shape"]), seed)
    if kind == "paraphraser":
        return build_paraphraser(arch["m"], arch["k"], tuple(arch["spatial"]), seed)
    if kind == "translator":
        return build_translator(arch["s"], arch["m"], arch["k"], tuple(arch["spatial"]), seed=seed)
    raise ConfigurationError(f"unknown architecture kind {kind!r}")
