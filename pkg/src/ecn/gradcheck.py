"""Central finite-difference checks of analytic gradients.

The relative error of one tensor is ``max|analytic - numeric|`` divided by
the largest magnitude seen in either gradient, so near-zero entries do not
blow up the ratio.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import Layer, LayerSpec, param_shapes
from .tensor import Tensor


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_error:.3e} tol={self.tolerance:g} ({parts})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Central differences of ``f`` wrt entries of ``arr`` (perturbed in place).

    With ``indices`` given, only those flat positions are evaluated and the
    result is a 1-D array aligned with them.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    res = np.array(out, dtype=np.float64)
    return res.reshape(arr.shape) if indices is None else res


def check_arrays(f: Callable[[], float], arrays: dict[str, np.ndarray],
                 analytic: dict[str, np.ndarray], tolerance: float = 1e-4,
                 h: float = 1e-5, max_per_tensor: int | None = None,
                 rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients to central differences of the scalar ``f``.

    ``max_per_tensor`` limits the number of probed coordinates per tensor
    (sampled without replacement) for large parameter sets.
    """
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tolerance)
    for name, arr in arrays.items():
        a = analytic[name].reshape(-1)
        if max_per_tensor is not None and arr.size > max_per_tensor:
            idx = np.sort(rng.choice(arr.size, max_per_tensor, replace=False))
            num = numeric_gradient(f, arr, h, idx)
            report.errors[name] = relative_error(a[idx], num)
        else:
            num = numeric_gradient(f, arr, h).reshape(-1)
            report.errors[name] = relative_error(a, num)
    return report


def make_layer(spec: LayerSpec, input_shape: tuple, seed: int = 0) -> Layer:
    """Layer with float64 parameters drawn uniformly from [-1, 1]."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(spec, input_shape[1:] if len(input_shape) in (2, 4) else input_shape)
    if shapes is None:
        return Layer(spec)
    w = Tensor(rng.uniform(-1, 1, shapes[0]), dtype=np.float64)
    b = Tensor(rng.uniform(-1, 1, shapes[1]), dtype=np.float64)
    return Layer(spec, w, b)


def grad_check(layer: Layer | LayerSpec, input_shape: tuple, tolerance: float = 1e-4,
               h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Check one layer's backward against finite differences in float64.

    The scalar probed is ``sum(r * layer(x))`` for a fixed random ``r``;
    dropout reuses one mask across all evaluations.
    """
    if isinstance(layer, LayerSpec):
        layer = make_layer(layer, input_shape, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-1, 1, input_shape)
    mode = "train" if layer.spec.kind == "dropout" else "test"

    def run():
        return layer.forward(x, mode, np.random.default_rng(seed + 2))

    r = rng.uniform(-1, 1, run().shape)

    def f():
        return float(np.sum(r * run()))

    for p in layer.params:
        p.grad = np.zeros_like(p.data)
    run()
    dx = layer.backward(r)
    arrays = {"input": x}
    analytic = {"input": dx}
    if layer.weight is not None:
        arrays.update(weight=layer.weight.data, bias=layer.bias.data)
        analytic.update(weight=layer.weight.grad.copy(), bias=layer.bias.grad.copy())
    return check_arrays(f, arrays, analytic, tolerance, h)
