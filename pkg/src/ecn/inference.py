"""Whole-image decisions from per-patch network outputs."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from . import patchnet
from .errors import ConfigurationError, InputError
from .patchnet import NetworkParams
from .sampler import PatchSet

RULES = ("avg-softmax", "fc7-sum")
FEATURE_MAGIC = b"ECNFEATS"


@dataclass
class ClassScores:
    values: np.ndarray
    kind: str  # "probability" or "score"

    @property
    def predicted(self) -> int:
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        return int(np.argmax(self.values))


@dataclass
class Fc5Feature:
    values: np.ndarray
    source_id: str


def avg_softmax_rule(logits: np.ndarray) -> ClassScores:
    """Mean of per-patch softmax outputs; ``logits`` is (n_patches, K)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or len(logits) == 0:
        raise InputError("need at least one patch")
    return ClassScores(K.softmax(logits).mean(axis=0), "probability")


def fc7_sum_rule(logits: np.ndarray) -> ClassScores:
    """Unnormalised sum of per-patch fc7 responses."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or len(logits) == 0:
        raise InputError("need at least one patch")
    return ClassScores(logits.sum(axis=0), "score")


_RULE_FNS = {"avg-softmax": avg_softmax_rule, "fc7-sum": fc7_sum_rule}


def _check(patches: PatchSet) -> None:
    if len(patches) == 0:
        raise InputError(f"{patches.source_id or 'image'}: empty patch set")


def classify_avg_softmax(params: NetworkParams, patches: PatchSet) -> ClassScores:
    _check(patches)
    return avg_softmax_rule(patchnet.predict_logits(params, patches.patches))


def classify_fc7_sum(params: NetworkParams, patches: PatchSet) -> ClassScores:
    _check(patches)
    return fc7_sum_rule(patchnet.predict_logits(params, patches.patches))


def classify_dataset(params: NetworkParams, patch_sets: list[PatchSet],
                     rules=RULES) -> dict[str, list[ClassScores]]:
    """Apply each rule to every image, forwarding each patch only once."""
    for r in rules:
        if r not in _RULE_FNS:
            raise ConfigurationError(f"unknown aggregation rule {r!r}; choose from {RULES}")
    for ps in patch_sets:
        _check(ps)
    if not patch_sets:
        return {r: [] for r in rules}
    logits = patchnet.predict_logits(params, np.concatenate([ps.patches for ps in patch_sets]))
    bounds = np.cumsum([0] + [len(ps) for ps in patch_sets])
    return {r: [_RULE_FNS[r](logits[a:b]) for a, b in zip(bounds[:-1], bounds[1:])] for r in rules}


def extract_fc5(params: NetworkParams, patch_sets: list[PatchSet], batch_size: int = 256) -> list[Fc5Feature]:
    """One feature per image: element-wise mean of its patches' fc5 activations."""
    if not patch_sets:
        raise InputError("empty dataset")
    out = []
    for ps in patch_sets:
        _check(ps)
        acts = [patchnet.forward(params, ps.patches[i:i + batch_size]).fc5
                for i in range(0, len(ps), batch_size)]
        out.append(Fc5Feature(np.concatenate(acts).astype(np.float64).mean(axis=0), ps.source_id))
    return out


# -- linear head on pooled features -----------------------------------------

@dataclass
class LinearHead:
    weights: np.ndarray      # (K, d), acts on standardised features
    bias: np.ndarray         # (K,)
    mean: np.ndarray
    scale: np.ndarray
    regularization: float

    def scores(self, features: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(features) - self.mean) / self.scale
        return z @ self.weights.T + self.bias


def _fit_ovr(z: np.ndarray, labels: np.ndarray, k: int, lam: float, iterations: int):
    """One-vs-rest squared-hinge SVMs by full-batch gradient descent.

    Objective per class: mean(max(0, 1 - y*(w.z + b))^2) + lam*|w|^2, bias unregularised.
    """
    n, d = z.shape
    y = np.where(labels[:, None] == np.arange(k)[None, :], 1.0, -1.0)
    w = np.zeros((k, d))
    b = np.zeros(k)
    # Lipschitz bound of the gradient, for a safe fixed step
    smax = np.linalg.norm(z, 2) if d else 0.0
    lip = 2.0 * (smax ** 2 + n) / n + 2.0 * lam
    step = 1.0 / lip
    for _ in range(iterations):
        margin = 1.0 - y * (z @ w.T + b)
        active = np.maximum(margin, 0.0)
        coef = -2.0 * y * active / n
        gw = coef.T @ z + 2.0 * lam * w
        gb = coef.sum(axis=0)
        w -= step * gw
        b -= step * gb
    return w, b


def _standardise(features: np.ndarray):
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def train_linear_head(features, labels, regularization: float | None = None, *,
                      num_classes: int | None = None, folds: int = 5,
                      grid=(1e-4, 1e-3, 1e-2, 1e-1, 1.0), iterations: int = 500,
                      seed: int = 0) -> LinearHead:
    """Linear one-vs-rest classifier on pooled features.

    Features are standardised with training statistics. With
    ``regularization=None`` the strength is picked from ``grid`` by k-fold
    cross-validated accuracy (first best wins).
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) != len(labels) or len(x) == 0:
        raise InputError("features and labels must be non-empty and aligned")
    if len(np.unique(labels)) < 2:
        raise ConfigurationError("linear head needs at least two classes")
    k = num_classes or int(labels.max()) + 1
    if regularization is None:
        regularization = _cross_validate(x, labels, k, folds, grid, iterations, seed)
    mean, scale = _standardise(x)
    w, b = _fit_ovr((x - mean) / scale, labels, k, regularization, iterations)
    return LinearHead(w, b, mean, scale, float(regularization))


def _cross_validate(x, labels, k, folds, grid, iterations, seed) -> float:
    folds = max(2, min(folds, len(x)))
    order = np.random.default_rng(seed).permutation(len(x))
    parts = np.array_split(order, folds)
    best, best_acc = grid[0], -1.0
    for lam in grid:
        correct = 0
        for i, test in enumerate(parts):
            train = np.concatenate([p for j, p in enumerate(parts) if j != i])
            if len(np.unique(labels[train])) < 2 or len(test) == 0:
                continue
            mean, scale = _standardise(x[train])
            w, b = _fit_ovr((x[train] - mean) / scale, labels[train], k, lam, iterations)
            pred = (((x[test] - mean) / scale) @ w.T + b).argmax(axis=1)
            correct += int(np.sum(pred == labels[test]))
        acc = correct / len(x)
        if acc > best_acc:
            best, best_acc = lam, acc
    return float(best)


def classify_linear(head: LinearHead, feature) -> ClassScores:
    values = feature.values if isinstance(feature, Fc5Feature) else feature
    return ClassScores(head.scores(np.asarray(values, dtype=np.float64))[0], "score")


# -- output files -----------------------------------------------------------

def write_predictions(path, source_ids: list[str], scores: list[ClassScores], classes: list[str]) -> None:
    k = len(classes)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "predicted_label"] + [f"score_{i}" for i in range(k)])
        for sid, s in zip(source_ids, scores):
            w.writerow([sid, classes[s.predicted]] + [repr(float(v)) for v in s.values])


def read_predictions(path) -> list[tuple[str, str]]:
    """(source_id, predicted_label) pairs of a predictions CSV."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["source_id", "predicted_label"]:
        raise InputError(f"{path}: missing predictions header")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) < 2:
            raise InputError(f"{path}:{lineno}: malformed prediction record")
        out.append((row[0], row[1]))
    return out


def write_features(path, features: list[Fc5Feature], labels: list[int] | None = None) -> None:
    """Binary dump in the checkpoint container: one float64 vector per image."""
    entries = [(f.source_id, f.values.astype(np.float64)) for f in features]
    lab = np.asarray(labels if labels is not None else [-1] * len(features), dtype=np.float64)
    entries.append(("__labels__", lab))
    header = struct.pack("<I", len(features))
    patchnet.write_entries(path, FEATURE_MAGIC, header, entries)


def read_features(path) -> tuple[list[Fc5Feature], np.ndarray]:
    (count,), entries = patchnet.read_entries(path, FEATURE_MAGIC, lambda r: r.unpack("<I", "header"))
    feats = [Fc5Feature(a, name) for name, a in entries if name != "__labels__"]
    labels = next((a for name, a in entries if name == "__labels__"), np.full(len(feats), -1.0))
    if len(feats) != count:
        raise InputError(f"{path}: header declares {count} features, found {len(feats)}")
    return feats, labels.astype(np.int64)


def save_head(path, head: LinearHead) -> None:
    header = struct.pack("<d", head.regularization)
    entries = [("weights", head.weights), ("bias", head.bias), ("mean", head.mean), ("scale", head.scale)]
    patchnet.write_entries(path, b"ECNLHEAD", header, entries)


def load_head(path) -> LinearHead:
    (lam,), entries = patchnet.read_entries(path, b"ECNLHEAD", lambda r: r.unpack("<d", "header"))
    d = dict(entries)
    return LinearHead(d["weights"], d["bias"], d["mean"], d["scale"], lam)
