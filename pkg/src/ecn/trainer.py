"""Momentum SGD for the per-patch network and ECN fine-tuning with the joint loss."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels as K
from . import patchnet
from .errors import ConfigurationError, InputError, NumericError, WarmStartError
from .patchnet import NetworkParams
from .sampler import EnsembleDataset

log = logging.getLogger(__name__)

LOG_HEADER = "iteration,loss,lr,batch_accuracy,seconds"

WARM_START_RATIONALE = (
    "starting from a fully converged patch classifier lands in a local minimum of the "
    "ensemble task (near-zero loss on most iterations, so nothing new is learned); "
    "fine-tune from a checkpoint at roughly 90-95% of the attainable patch accuracy"
)


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 0.01
    lr_drop_factor: float = 10.0
    lr_drop_every: int = 100_000
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_iterations: int = 250_000
    seed: int = 0
    decay_biases: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.lr_drop_every < 1 or self.max_iterations < 0:
            raise ConfigurationError("batch_size and lr_drop_every must be >= 1")
        if self.lr_drop_factor < 1:
            raise ConfigurationError("lr_drop_factor must be >= 1")


FINETUNE_SGD = SgdConfig(base_lr=0.001, lr_drop_every=10_000, max_iterations=35_000)


@dataclass(frozen=True)
class EcnConfig:
    n: int = 10
    sgd: SgdConfig = FINETUNE_SGD
    warm_fraction: float = 0.925

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("ensemble size n must be >= 1")
        if not 0.0 < self.warm_fraction <= 1.0:
            raise ConfigurationError("warm_fraction must lie in (0, 1]")


@dataclass
class TrainStepReport:
    iteration: int
    loss: float
    lr: float
    batch_accuracy: float
    seconds: float

    def csv_row(self) -> str:
        return f"{self.iteration},{self.loss!r},{self.lr!r},{self.batch_accuracy!r},{self.seconds:.3f}"


@dataclass
class TrainResult:
    params: NetworkParams
    reports: list[TrainStepReport] = field(default_factory=list)
    checkpoints: list[tuple[int, Path | None, float | None]] = field(default_factory=list)


def lr_at(cfg: SgdConfig, iteration: int) -> float:
    """Step schedule: divide by ``lr_drop_factor`` every ``lr_drop_every`` iterations."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.base_lr / cfg.lr_drop_factor ** (iteration // cfg.lr_drop_every)


def sgd_step(params: dict, grads: dict, velocity: dict, cfg: SgdConfig, iteration: int,
             lr: float | None = None):
    """In-place momentum update: v <- mu*v - lr*(g + wd*w); w <- w + v.

    Raises NumericError naming the first tensor with a non-finite gradient,
    before anything is modified.
    """
    lr = lr_at(cfg, iteration) if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"iteration {iteration}: non-finite gradient in {name}")
    for name, w in params.items():
        g = grads[name]
        decay = cfg.weight_decay if (cfg.decay_biases or not name.endswith(".bias")) else 0.0
        v = velocity[name]
        v *= cfg.momentum
        v -= lr * (g + decay * w) if decay else lr * g
        w += v
    return params, velocity


def ecn_loss(branch_logits: np.ndarray, label, n: int | None = None):
    """Joint cross-entropy over summed branch scores.

    ``branch_logits`` is (N, K) with an int label, or (M, N, K) with M labels;
    the loss is averaged over samples. Returns (loss, grad) where grad has the
    input's shape and every branch receives the same gradient.
    """
    z = np.asarray(branch_logits)
    single = z.ndim == 2
    if single:
        z = z[None]
        labels = np.array([int(label)])
    else:
        labels = np.asarray(label)
    if z.ndim != 3:
        raise InputError(f"expected (N, K) or (M, N, K) logits, got shape {np.shape(branch_logits)}")
    if n is not None and z.shape[1] != n:
        raise ConfigurationError(f"got {z.shape[1]} branches, ensemble size is {n}")
    scores = z.sum(axis=1)
    loss, probs = K.softmax_xent(scores, labels)
    g = K.softmax_xent_backward(probs, labels)
    grad = np.broadcast_to(g[:, None, :], z.shape).copy()
    return loss, (grad[0] if single else grad)


# -- shared loop ------------------------------------------------------------

def batch_indices(n_items: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Items of the mini-batch at ``iteration``: consecutive slices of per-epoch permutations.

    Depends only on (seed, iteration), so a resumed run sees the same stream.
    """
    start = iteration * batch_size
    idx = []
    cache: dict[int, np.ndarray] = {}
    for pos in range(start, start + batch_size):
        epoch, off = divmod(pos, n_items)
        if epoch not in cache:
            cache[epoch] = np.random.default_rng([seed, 1, epoch]).permutation(n_items)
        idx.append(cache[epoch][off])
    return np.array(idx)


def step_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, iteration])


def _ensure_velocity(params: NetworkParams) -> dict[str, np.ndarray]:
    if params.velocity is None:
        params.velocity = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    return params.velocity


def _loop(params: NetworkParams, cfg: SgdConfig, n_items: int,
          fetch: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
          loss_fn: Callable, start: int, stop: int, *,
          log_path=None, checkpoint_dir=None, checkpoint_every: int = 0,
          evaluate: Callable[[NetworkParams], float] | None = None,
          prefix: str = "ckpt", callback=None) -> TrainResult:
    if n_items < 1:
        raise ConfigurationError("training set is empty")
    result = TrainResult(params)
    velocity = _ensure_velocity(params)
    weights = {k: t.data for k, t in params.tensors.items()}
    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or log_path.stat().st_size == 0
        log_fh = open(log_path, "a", encoding="utf-8", newline="\n")
        if fresh:
            log_fh.write(LOG_HEADER + "\n")
    t0 = time.perf_counter()
    try:
        for it in range(start, stop):
            idx = batch_indices(n_items, cfg.batch_size, cfg.seed, it)
            x, labels = fetch(idx)
            params.zero_grad()
            trace = patchnet.forward(params, x, "train", step_rng(cfg.seed, it))
            loss, dlogits, acc = loss_fn(trace.logits, labels)
            if not np.isfinite(loss):
                raise NumericError(f"iteration {it}: non-finite loss")
            patchnet.backward(trace, dlogits)
            lr = lr_at(cfg, it)
            sgd_step(weights, params.grads(), velocity, cfg, it, lr)
            params.iteration = it + 1
            rep = TrainStepReport(it, float(loss), lr, float(acc), time.perf_counter() - t0)
            result.reports.append(rep)
            if log_fh is not None:
                log_fh.write(rep.csv_row() + "\n")
            if callback is not None:
                callback(rep)
            if checkpoint_every and params.iteration % checkpoint_every == 0:
                _checkpoint(result, params, evaluate, checkpoint_dir, prefix)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


def _checkpoint(result: TrainResult, params, evaluate, checkpoint_dir, prefix) -> None:
    acc = None
    if evaluate is not None:
        acc = float(evaluate(params))
        params.patch_val_accuracy = acc
    path = None
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"{prefix}_{params.iteration:07d}.ecn"
        patchnet.save(params, path)
    log.info("checkpoint at iteration %d (val acc %s)", params.iteration, acc)
    result.checkpoints.append((params.iteration, path, acc))


def _patch_loss(logits, labels):
    loss, probs = K.softmax_xent(logits, labels)
    grad = K.softmax_xent_backward(probs, labels)
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    return loss, grad, acc


def train_simple(params: NetworkParams, patches: np.ndarray, labels: np.ndarray,
                 cfg: SgdConfig, **kwargs) -> TrainResult:
    """Per-patch softmax training from ``params.iteration`` up to ``cfg.max_iterations``.

    Keyword arguments: ``log_path``, ``checkpoint_dir``, ``checkpoint_every``,
    ``evaluate`` (patch-validation accuracy, stored in each checkpoint) and
    ``callback`` (called with every TrainStepReport).
    """
    if len(patches) == 0:
        raise ConfigurationError("patch dataset is empty")
    if len(patches) != len(labels):
        raise InputError("patches and labels differ in length")
    labels = np.asarray(labels, dtype=np.int64)

    def fetch(idx):
        return patches[idx], labels[idx]

    return _loop(params, cfg, len(patches), fetch, _patch_loss,
                 params.iteration, cfg.max_iterations, prefix="simple", **kwargs)


def check_warm_start(warm_accuracy: float | None, attainable: float, fraction: float) -> None:
    if warm_accuracy is None:
        raise ConfigurationError("warm checkpoint carries no patch-validation accuracy; supply one")
    if attainable <= 0:
        raise ConfigurationError("attainable accuracy must be > 0")
    if warm_accuracy >= attainable:
        raise WarmStartError(
            f"warm checkpoint accuracy {warm_accuracy:.4f} reaches the attainable {attainable:.4f}: "
            + WARM_START_RATIONALE)
    if warm_accuracy < fraction * attainable:
        raise WarmStartError(
            f"warm checkpoint accuracy {warm_accuracy:.4f} is below {fraction:g} x attainable "
            f"({fraction * attainable:.4f}); train the simple network further first")


def ensemble_arrays(dataset: EnsembleDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(patch pool, (S, N) member indices into the pool, (S,) labels)."""
    if len(dataset) == 0:
        raise ConfigurationError("ensemble dataset is empty")
    offsets: dict[int, int] = {}
    pool = []
    total = 0
    for s in dataset.samples:
        key = id(s.source)
        if key not in offsets:
            offsets[key] = total
            pool.append(s.source.patches)
            total += len(s.source.patches)
    members = np.stack([offsets[id(s.source)] + s.indices for s in dataset.samples])
    labels = np.array([s.label for s in dataset.samples], dtype=np.int64)
    return np.concatenate(pool), members, labels


def finetune_ecn(params: NetworkParams, dataset: EnsembleDataset, cfg: EcnConfig,
                 attainable: float | None = None, warm_accuracy: float | None = None,
                 resume: bool = False, **kwargs) -> TrainResult:
    """Fine-tune with the joint loss over N weight-sharing branches.

    Each step takes ``cfg.sgd.batch_size`` samples, forwards all N·M member
    patches through the single shared parameter set and backpropagates the
    joint loss, so every parameter gradient is the sum over branches.

    A fresh start (``resume=False``) checks the warm-start window, resets the
    iteration counter and clears the momentum buffers.
    """
    if dataset.n != cfg.n:
        raise ConfigurationError(f"dataset built for N={dataset.n}, config says N={cfg.n}")
    if not resume:
        check_warm_start(warm_accuracy if warm_accuracy is not None else params.patch_val_accuracy,
                         attainable if attainable is not None else 0.0, cfg.warm_fraction)
        params.iteration = 0
        params.velocity = None
    pool, members, labels = ensemble_arrays(dataset)
    n = cfg.n

    def fetch(idx):
        return pool[members[idx].reshape(-1)], labels[idx]

    def loss_fn(logits, lab):
        z = logits.reshape(len(lab), n, -1)
        loss, grad = ecn_loss(z, lab, n)
        acc = float(np.mean(z.sum(axis=1).argmax(axis=1) == lab))
        return loss, grad.reshape(logits.shape), acc

    return _loop(params, cfg.sgd, len(labels), fetch, loss_fn,
                 params.iteration, cfg.sgd.max_iterations, prefix="ecn", **kwargs)


def patch_accuracy(params: NetworkParams, patches: np.ndarray, labels: np.ndarray) -> float:
    if len(patches) == 0:
        raise InputError("no patches to evaluate")
    logits = patchnet.predict_logits(params, patches)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))


# -- config files -----------------------------------------------------------

def parse_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise InputError(f"{path}:{lineno}: expected 'key = value'")
            out[key.strip()] = value.strip()
    return out


def _coerce(value: str, kind: type):
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is int:
        return int(float(value)) if "e" in value.lower() else int(value)
    return kind(value)


def apply_overrides(cfg, values: dict[str, str]):
    """Return a copy of a SgdConfig/EcnConfig with string ``values`` applied.

    Unknown keys are left for the caller to report.
    """
    types = {f.name: type(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    changes = {}
    for key, value in values.items():
        if key in types and types[key] in (int, float, bool, str):
            try:
                changes[key] = _coerce(str(value), types[key])
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {exc}") from exc
    return dataclasses.replace(cfg, **changes)
