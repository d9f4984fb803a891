"""The patch-classification CNN: profiles, parameters, forward/backward, checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import ConfigurationError, FormatError, InputError, StateError
from .layers import Layer, LayerSpec
from .tensor import Tensor, get_dtype

PATCH_SIDE = 32
MAGIC = b"ECNPATCH"
FORMAT_VERSION = 1
MOMENTUM_PREFIX = "momentum/"
META_VAL_ACC = "meta/patch_val_accuracy"

_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _stack(convs, fcs, num_classes):
    c1, c2, c3, c4 = convs
    f5, f6 = fcs
    return [
        L.conv("conv1", c1, 5), L.relu("relu1"), L.lrn("norm1"), L.pool("pool1"),
        L.conv("conv2", c2, 3), L.relu("relu2"), L.lrn("norm2"), L.pool("pool2"),
        L.conv("conv3", c3, 3), L.relu("relu3"), L.pool("pool3"),
        L.conv("conv4", c4, 1), L.relu("relu4"),
        L.fc("fc5", f5), L.relu("relu5"), L.dropout("drop5"),
        L.fc("fc6", f6), L.relu("relu6"), L.dropout("drop6"),
        L.fc("fc7", num_classes),
    ]


PROFILES = {
    "paper": ((96, 256, 384, 512), (4096, 1024)),
    "mini": ((8, 16, 32, 32), (64, 32)),
}


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_side: int = PATCH_SIDE

    @classmethod
    def profile(cls, name: str, num_classes: int) -> "ArchitectureSpec":
        if name not in PROFILES:
            raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        if num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        convs, fcs = PROFILES[name]
        return cls(name, tuple(_stack(convs, fcs, num_classes)), num_classes)

    def shapes(self) -> list[tuple[str, tuple]]:
        """Per-layer output shape for one patch, validating the chain."""
        shape = (1, self.input_side, self.input_side)
        out = []
        for spec in self.layers:
            shape = L.output_shape(spec, shape)
            out.append((spec.name, shape))
        if shape != (self.num_classes,):
            raise ConfigurationError(f"final layer emits {shape}, expected ({self.num_classes},)")
        return out

    def param_shapes(self) -> list[tuple[str, tuple]]:
        shape = (1, self.input_side, self.input_side)
        out = []
        for spec in self.layers:
            ps = L.param_shapes(spec, shape)
            if ps is not None:
                out.append((f"{spec.name}.weight", ps[0]))
                out.append((f"{spec.name}.bias", ps[1]))
            shape = L.output_shape(spec, shape)
        return out


@dataclass
class ForwardTrace:
    """Activations of one forward pass; ``logits`` is the fc7 output."""

    logits: np.ndarray
    fc5: np.ndarray
    fc6: np.ndarray
    mode: str
    layers: list[Layer] = field(repr=False, default_factory=list)
    consumed: bool = False


class NetworkParams:
    """All learnable tensors of one network plus training bookkeeping."""

    def __init__(self, arch: ArchitectureSpec, tensors: dict[str, Tensor], iteration: int = 0):
        self.arch = arch
        self.tensors = tensors
        self.iteration = iteration
        self.velocity: dict[str, np.ndarray] | None = None
        self.patch_val_accuracy: float | None = None

    @property
    def profile(self) -> str:
        return self.arch.name

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.tensors.items()}

    def copy(self) -> "NetworkParams":
        out = NetworkParams(self.arch, {k: Tensor(t.data.copy(), dtype=t.data.dtype)
                                        for k, t in self.tensors.items()}, self.iteration)
        if self.velocity is not None:
            out.velocity = {k: v.copy() for k, v in self.velocity.items()}
        out.patch_val_accuracy = self.patch_val_accuracy
        return out

    def astype(self, dtype) -> "NetworkParams":
        out = self.copy()
        for k, t in out.tensors.items():
            out.tensors[k] = Tensor(t.data, dtype=dtype)
        if out.velocity is not None:
            out.velocity = {k: v.astype(dtype) for k, v in out.velocity.items()}
        return out

    def bound_layers(self) -> list[Layer]:
        return [Layer(s, self.tensors.get(f"{s.name}.weight"), self.tensors.get(f"{s.name}.bias"))
                for s in self.arch.layers]


def build(profile: str, num_classes: int, seed: int = 0, dtype=None) -> NetworkParams:
    """Fresh network: zero biases, Gaussian weights with std sqrt(2 / fan_in)."""
    arch = ArchitectureSpec.profile(profile, num_classes)
    arch.shapes()
    dtype = dtype or get_dtype()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes():
        if name.endswith(".bias"):
            tensors[name] = Tensor(np.zeros(shape), dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), dtype=dtype)
    return NetworkParams(arch, tensors)


def forward(params: NetworkParams, patches: np.ndarray, mode: str = "test",
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Run a patch (1×32×32) or a batch (B×1×32×32) through the network.

    Single-patch input yields per-patch trace arrays; batches keep the batch axis.
    """
    if mode not in ("train", "test"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    side = params.arch.input_side
    x = np.asarray(patches)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (1, side, side):
        raise InputError(f"expected patches of shape 1×{side}×{side}, got {np.shape(patches)}")
    x = x.astype(params.dtype, copy=False)
    layers = params.bound_layers()
    acts = {}
    for layer in layers:
        x = layer.forward(x, mode, rng)
        if layer.spec.name in ("relu5", "relu6"):
            acts[layer.spec.name] = x
    unwrap = (lambda a: a[0]) if single else (lambda a: a)
    return ForwardTrace(unwrap(x), unwrap(acts["relu5"]), unwrap(acts["relu6"]), mode, layers)


def backward(trace: ForwardTrace, dlogits: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients for ``trace``; returns the input gradient."""
    if not trace.layers:
        raise StateError("trace carries no recorded layers")
    g = np.asarray(dlogits, dtype=trace.logits.dtype)
    single = g.ndim == 1
    if single:
        g = g[None]
    for layer in reversed(trace.layers):
        g = layer.backward(g)
    trace.consumed = True
    return g[0] if single else g


def predict_logits(params: NetworkParams, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Test-mode logits for a stack of patches, computed in chunks."""
    out = [forward(params, patches[i:i + batch_size]).logits
           for i in range(0, len(patches), batch_size)]
    if not out:
        return np.zeros((0, params.num_classes), dtype=params.dtype)
    return np.concatenate(out)


# -- checkpoint I/O ---------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_entries(path, magic: bytes, header: bytes, entries: list[tuple[str, np.ndarray]]) -> None:
    """Shared container: magic, version, header bytes, entry count, entries."""
    parts = [magic, struct.pack("<H", FORMAT_VERSION), header, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = _DTYPE_TAGS.get(np.dtype(le.dtype))
        if tag is None:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(le).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        return self.take(n, what).decode("utf-8")


def read_entries(path, magic: bytes, header_reader):
    """Inverse of :func:`write_entries`; ``header_reader(reader)`` parses the header."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(len(magic), "magic") != magic:
        raise FormatError(f"{path}: bad magic, not a {magic.decode()} file")
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = header_reader(r)
    (count,) = r.unpack("<I", "entry count")
    entries = []
    for i in range(count):
        name = r.string(f"name of entry {i}")
        tag, ndim = r.unpack("<BB", f"layer {name}")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"{path}: layer {name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I", f"layer {name}")
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(shape)) * dt.itemsize
        raw = r.take(n, f"layer {name}")
        entries.append((name, np.frombuffer(raw, dtype=dt).reshape(shape).copy()))
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return header, entries


def save(params: NetworkParams, path) -> None:
    header = (_pack_str(params.profile)
              + struct.pack("<IQ", params.num_classes, params.iteration))
    entries = [(k, t.data) for k, t in params.tensors.items()]
    if params.velocity is not None:
        entries += [(MOMENTUM_PREFIX + k, v) for k, v in params.velocity.items()]
    if params.patch_val_accuracy is not None:
        entries.append((META_VAL_ACC, np.array([params.patch_val_accuracy], dtype=np.float64)))
    write_entries(path, MAGIC, header, entries)


def load(path, dtype=None) -> NetworkParams:
    """Read a checkpoint; values are converted to ``dtype`` (default: current precision).

    Conversion from float32 to float64 is exact.
    """
    def header_reader(r):
        profile = r.string("profile name")
        k, iteration = r.unpack("<IQ", "header")
        return profile, k, iteration

    (profile, k, iteration), entries = read_entries(path, MAGIC, header_reader)
    try:
        arch = ArchitectureSpec.profile(profile, k)
    except ConfigurationError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    dtype = dtype or get_dtype()
    expected = dict(arch.param_shapes())
    tensors, velocity, val_acc = {}, {}, None
    for name, arr in entries:
        if name == META_VAL_ACC:
            val_acc = float(arr[0])
            continue
        base = name[len(MOMENTUM_PREFIX):] if name.startswith(MOMENTUM_PREFIX) else name
        if base not in expected:
            raise FormatError(f"{path}: layer {name} not part of profile {profile!r}")
        if tuple(arr.shape) != tuple(expected[base]):
            raise FormatError(f"{path}: layer {name} has shape {arr.shape}, "
                              f"profile {profile!r} declares {expected[base]}")
        if name == base:
            tensors[name] = Tensor(arr, dtype=dtype)
        else:
            velocity[base] = arr.astype(dtype)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise FormatError(f"{path}: missing layer {missing[0]}")
    params = NetworkParams(arch, {n: tensors[n] for n in expected}, iteration)
    params.velocity = velocity or None
    params.patch_val_accuracy = val_acc
    return params
