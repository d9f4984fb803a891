"""Gradient suite run by ``ecn gradcheck``: every layer kind plus a whole mini network."""
from __future__ import annotations

import numpy as np

from . import layers as L
from . import patchnet
from .gradcheck import GradCheckReport, check_arrays, grad_check
from .tensor import precision

LAYER_CASES = (
    ("conv", L.conv("conv", 3, 3), (2, 2, 6, 6)),
    ("conv-1x1", L.conv("conv", 4, 1), (2, 3, 4, 4)),
    ("maxpool", L.pool("pool"), (2, 2, 7, 7)),
    ("maxpool-even", L.pool("pool"), (1, 2, 6, 6)),
    ("lrn", L.lrn("lrn"), (2, 7, 3, 3)),
    ("lrn-strong", L.lrn("lrn", (3, 0.5, 0.75, 1.0)), (1, 5, 3, 3)),
    ("relu", L.relu("relu"), (2, 3, 4, 4)),
    ("fc", L.fc("fc", 5), (3, 7)),
    ("dropout", L.dropout("drop"), (3, 8)),
)


def network_check(profile: str = "mini", num_classes: int = 3, batch: int = 2, tolerance: float = 1e-4,
                  seed: int = 0, samples: int = 12) -> GradCheckReport:
    """Whole-network check with the dropout masks held fixed across evaluations."""
    with precision("float64"):
        params = patchnet.build(profile, num_classes, seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.uniform(-1, 1, (batch, 1, 32, 32))
        r = rng.uniform(-1, 1, (batch, num_classes))

        def f():
            return float(np.sum(r * patchnet.forward(params, x, "train", np.random.default_rng(seed)).logits))

        params.zero_grad()
        trace = patchnet.forward(params, x, "train", np.random.default_rng(seed))
        dx = patchnet.backward(trace, r)
        arrays = {"input": x, **{k: t.data for k, t in params.tensors.items()}}
        analytic = {"input": dx, **{k: t.grad.copy() for k, t in params.tensors.items()}}
        return check_arrays(f, arrays, analytic, tolerance, max_per_tensor=samples,
                            rng=np.random.default_rng(seed + 2))


def run_gradient_suite(tolerance: float = 1e-4, seed: int = 0):
    """Yield ``(case name, report)`` pairs."""
    with precision("float64"):
        for name, spec, shape in LAYER_CASES:
            yield name, grad_check(spec, shape, tolerance=tolerance, seed=seed)
    yield "network-mini", network_check(tolerance=tolerance, seed=seed)
