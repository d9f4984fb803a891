"""Tensor values and the global numeric precision flag."""
from __future__ import annotations

import numpy as np

_PRECISION = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32


def set_precision(name: str) -> None:
    """Select "float32" (training) or "float64" (verification) for new tensors."""
    global _dtype
    try:
        _dtype = _PRECISION[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}") from None


def get_precision() -> str:
    return np.dtype(_dtype).name


def get_dtype():
    return _dtype


class precision:
    """Context manager that temporarily switches the precision flag."""

    def __init__(self, name: str):
        self.name = name
        self._saved = None

    def __enter__(self):
        self._saved = get_precision()
        set_precision(self.name)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False


class Tensor:
    """Dense array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=dtype or _dtype)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @classmethod
    def zeros(cls, shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), dtype=dtype, requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), dtype=dtype)
        if self.grad is not None:
            out.grad = self.grad.astype(dtype)
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"
