"""Stateful layer wrappers that record what their backward rule needs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigurationError, StateError
from .tensor import Tensor

KINDS = ("conv", "maxpool", "lrn", "relu", "fc", "dropout")

# Caffe defaults; the network description leaves LRN constants open.
LRN_DEFAULTS = (5, 1e-4, 0.75, 1.0)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    pad: int = 0
    out: int = 0
    lrn: tuple[int, float, float, float] = LRN_DEFAULTS
    ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.stride != 1 or self.pad != 0):
            raise ConfigurationError(f"{self.name}: convolutions use stride 1, pad 0")
        if self.kind == "maxpool" and (self.kernel != (3, 3) or self.stride != 2 or self.pad != 1):
            raise ConfigurationError(f"{self.name}: pooling uses kernel 3, stride 2, pad 1")
        if self.kind == "dropout" and not 0.0 < self.ratio < 1.0:
            raise ConfigurationError(f"{self.name}: dropout ratio must lie in (0, 1)")
        if self.kind in ("conv", "fc") and self.out < 1:
            raise ConfigurationError(f"{self.name}: needs a positive output count")
        if self.kind == "lrn":
            K._check_lrn(*self.lrn)

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "fc")


def conv(name, out, k):
    return LayerSpec("conv", name, kernel=(k, k), out=out)


def pool(name):
    return LayerSpec("maxpool", name, kernel=(3, 3), stride=2, pad=1)


def lrn(name, params=LRN_DEFAULTS):
    return LayerSpec("lrn", name, lrn=params)


def relu(name):
    return LayerSpec("relu", name)


def fc(name, out):
    return LayerSpec("fc", name, out=out)


def dropout(name, ratio=0.5):
    return LayerSpec("dropout", name, ratio=ratio)


class Layer:
    """One layer bound to its parameter tensors (if any).

    ``forward`` caches what ``backward`` needs; ``backward`` adds parameter
    gradients into ``Tensor.grad`` and returns the input gradient.
    """

    def __init__(self, spec: LayerSpec, weight: Tensor | None = None, bias: Tensor | None = None):
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self._cache = None

    @property
    def params(self) -> list[Tensor]:
        return [t for t in (self.weight, self.bias) if t is not None]

    def clear(self) -> None:
        self._cache = None

    def forward(self, x: np.ndarray, mode: str = "test", rng: np.random.Generator | None = None):
        s = self.spec
        if s.kind == "conv":
            out, cols = K.conv2d_forward(x, self.weight.data, self.bias.data, return_cols=True)
            self._cache = (x, cols)
        elif s.kind == "maxpool":
            out, self._cache = K.maxpool_forward(x, s.kernel[0], s.stride, s.pad)
        elif s.kind == "lrn":
            out, scale = K.lrn_forward(x, *s.lrn)
            self._cache = (x, out, scale)
        elif s.kind == "relu":
            out = K.relu_forward(x)
            self._cache = x
        elif s.kind == "fc":
            flat = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
            out = K.fc_forward(flat, self.weight.data, self.bias.data)
            self._cache = (flat, x.shape)
        else:
            out, mask = K.dropout_forward(x, s.ratio, mode, rng)
            self._cache = ("mask", mask)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError(f"{self.spec.name}: backward called before forward")
        s = self.spec
        c = self._cache
        if s.kind == "conv":
            dx, dw, db = K.conv2d_backward(dout, c[0], self.weight.data, c[1])
            self.weight.accumulate(dw)
            self.bias.accumulate(db)
            return dx
        if s.kind == "maxpool":
            return K.maxpool_backward(dout, c)
        if s.kind == "lrn":
            x, out, scale = c
            window, alpha, beta, _ = s.lrn
            return K.lrn_backward(dout, x, out, scale, window, alpha, beta)
        if s.kind == "relu":
            return K.relu_backward(dout, c)
        if s.kind == "fc":
            flat, shape = c
            dx, dw, db = K.fc_backward(dout, flat, self.weight.data)
            self.weight.accumulate(dw)
            self.bias.accumulate(db)
            return dx.reshape(shape)
        return K.dropout_backward(dout, c[1])


def output_shape(spec: LayerSpec, shape: tuple) -> tuple:
    """Per-sample output shape of ``spec`` applied to a per-sample ``shape``."""
    if spec.kind == "conv":
        c, h, w = shape
        kh, kw = spec.kernel
        if h < kh or w < kw:
            raise ConfigurationError(f"{spec.name}: input {h}×{w} smaller than kernel")
        return (spec.out, h - kh + 1, w - kw + 1)
    if spec.kind == "maxpool":
        c, h, w = shape
        return (c, K.pool_output_size(h), K.pool_output_size(w))
    if spec.kind == "fc":
        return (spec.out,)
    return shape


def param_shapes(spec: LayerSpec, in_shape: tuple) -> tuple[tuple, tuple] | None:
    if spec.kind == "conv":
        return (spec.out, in_shape[0], *spec.kernel), (spec.out,)
    if spec.kind == "fc":
        return (spec.out, int(np.prod(in_shape))), (spec.out,)
    return None
