"""Binary checkpoint container for network parameters and training state.

Layout (all integers little-endian)::

    b"FTCK" | u32 version | u32 entry count
    per entry: u16 name length | name (utf-8) | u8 dtype tag | u8 ndim | u32 dims... | raw payload

Reserved entries: ``__arch__`` (utf-8 JSON architecture descriptor),
``__step__`` (int64 step counter), ``__rng__`` (utf-8 JSON generator state)
and ``__norm__`` (float64 [2, C]: per-channel input mean and std).
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import Network, build_from_arch

MAGIC = b"FTCK"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
TAG_OF = {np.dtype(v).str: k for k, v in DTYPE_TAGS.items()}
ARCH_KEY = "__arch__"
STEP_KEY = "__step__"
RNG_KEY = "__rng__"
NORM_KEY = "__norm__"


@dataclass
class Checkpoint:
    identifier: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None
    version: int = VERSION
    norm: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def arch(self) -> dict:
        return json.loads(self.identifier)

    @classmethod
    def from_network(cls, net: Network, step: int = 0, rng_state: dict | None = None) -> Checkpoint:
        tensors = {name: p.data.copy() for name, p in net.named_parameters()}
        tensors.update({name: b.copy() for name, b in net.buffers().items()})
        return cls(net.identifier, tensors, step, rng_state)

    def to_network(self) -> Network:
        net = build_from_arch(self.arch)
        self.load_into(net)
        return net

    def load_into(self, net: Network) -> Network:
        """Copy stored values into ``net``; every parameter and buffer must match by name and shape."""
        targets = {name: p.data for name, p in net.named_parameters()}
        targets.update(net.buffers())
        for name, dest in targets.items():
            if name not in self.tensors:
                raise CheckpointError(f"checkpoint has no entry for parameter {name!r}")
            src = self.tensors[name]
            if src.shape != dest.shape:
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {src.shape} != network shape {dest.shape}")
        extra = sorted(set(self.tensors) - set(targets))
        if extra:
            raise CheckpointError(f"checkpoint entry {extra[0]!r} has no matching network parameter")
        for name, dest in targets.items():
            dest[...] = self.tensors[name]
        net.eval()
        return net

    # -- serialisation ----------------------------------------------------

    def to_bytes(self) -> bytes:
        entries: list[tuple[str, np.ndarray]] = [(ARCH_KEY, _text(self.identifier)),
                                                 (STEP_KEY, np.array([self.step], dtype="<i8"))]
        if self.rng_state is not None:
            entries.append((RNG_KEY, _text(json.dumps(self.rng_state, sort_keys=True))))
        if self.norm is not None:
            entries.append((NORM_KEY, np.stack([np.asarray(v, dtype="<f8") for v in self.norm])))
        entries.extend(self.tensors.items())
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", self.version, len(entries)))
        for name, arr in entries:
            raw_name = name.encode("utf-8")
            arr = np.asarray(arr)
            tag = TAG_OF.get(arr.dtype.newbyteorder("<").str if arr.dtype.itemsize > 1 else arr.dtype.str)
            if tag is None:
                raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
            buf.write(struct.pack("<H", len(raw_name)))
            buf.write(raw_name)
            buf.write(struct.pack("<BB", tag, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> Checkpoint:
        reader = _Reader(raw, source)
        magic = reader.take(4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
        version, count = reader.unpack("<II", "header")
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
        tensors: dict[str, np.ndarray] = {}
        identifier = None
        step = 0
        rng_state = None
        norm = None
        for i in range(count):
            (name_len,) = reader.unpack("<H", f"entry {i} name length")
            name = reader.take(name_len, f"entry {i} name").decode("utf-8")
            tag, ndim = reader.unpack("<BB", f"entry {name!r} header")
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"{source}: entry {name!r} has unknown dtype tag {tag}")
            dims = reader.unpack(f"<{ndim}I", f"entry {name!r} dims")
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(reader.take(nbytes, f"entry {name!r} payload"), dtype=dtype).reshape(dims)
            if name == ARCH_KEY:
                identifier = arr.tobytes().decode("utf-8")
            elif name == STEP_KEY:
                step = int(arr[0])
            elif name == RNG_KEY:
                rng_state = json.loads(arr.tobytes().decode("utf-8"))
            elif name == NORM_KEY:
                norm = (arr[0].astype(np.float64), arr[1].astype(np.float64))
            else:
                if name in tensors:
                    raise CheckpointError(f"{source}: duplicate entry {name!r}")
                tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
        if reader.remaining:
            raise CheckpointError(f"{source}: {reader.remaining} trailing bytes after {count} entries")
        if identifier is None:
            raise CheckpointError(f"{source}: missing {ARCH_KEY} entry")
        return cls(identifier, tensors, step, rng_state, version, norm)

    def save(self, path: str | Path) -> None:
        """Write atomically (temporary file in the same directory, then rename)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes(), str(path))


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    @property
    def remaining(self) -> int:
        return len(self.raw) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"{self.source}: truncated while reading {what} at offset {self.pos} "
                f"(need {n} bytes, {self.remaining} left)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def save_checkpoint(net: Network, path: str | Path, step: int = 0, rng_state: dict | None = None) -> None:
    Checkpoint.from_network(net, step, rng_state).save(path)


def load_checkpoint(path: str | Path) -> Network:
    return Checkpoint.load(path).to_network()
