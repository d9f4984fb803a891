"""Line-image preprocessing, dense two-scale patch sampling and dataset I/O."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InputError
from .tensor import get_dtype

log = logging.getLogger(__name__)

LINE_HEIGHT = 40
PATCH_SIDE = 32
STEP = 8
SCALES = (40, 32)
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class LineImage:
    pixels: np.ndarray
    label: int
    source_id: str
    mean: float = 0.0

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchSet:
    patches: np.ndarray          # (n, 1, 32, 32)
    label: int
    origins: list[tuple[int, int, int]]   # (scale, x, y)
    source_id: str = ""

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class EnsembleSample:
    """N patches of one image; ``indices`` point into ``source.patches``."""

    source: PatchSet = field(repr=False)
    indices: np.ndarray
    label: int

    @property
    def members(self) -> np.ndarray:
        return self.source.patches[self.indices]


@dataclass
class EnsembleDataset:
    samples: list[EnsembleSample]
    n: int
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix with half-pixel centres."""
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape
    return bilinear_matrix(h, height) @ img @ bilinear_matrix(w, width).T


def target_width(h: int, w: int) -> int:
    """Width after scaling to the line height, stretched up to at least 40."""
    return max(LINE_HEIGHT, int(math.floor(w * LINE_HEIGHT / h + 0.5)))


def preprocess(raw: np.ndarray, label: int = 0, source_id: str = "") -> LineImage:
    """Grayscale, rescale to height 40 and [0, 1], and record the image mean.

    ``raw`` is H×W (grayscale) or H×W×3 (RGB); integer images are divided
    by their dtype maximum, float images are clipped to [0, 1].
    """
    a = np.asarray(raw)
    if a.size == 0 or a.ndim not in (2, 3):
        raise InputError(f"empty or malformed image {source_id!r} with shape {a.shape}")
    if np.issubdtype(a.dtype, np.integer):
        a = a.astype(np.float64) / np.iinfo(a.dtype).max
    else:
        a = np.clip(a.astype(np.float64), 0.0, 1.0)
    if a.ndim == 3:
        if a.shape[2] == 1:
            a = a[..., 0]
        elif a.shape[2] in (3, 4):
            a = a[..., :3] @ LUMA
        else:
            raise InputError(f"unsupported channel count {a.shape[2]} in {source_id!r}")
    h, w = a.shape
    px = resize_bilinear(a, LINE_HEIGHT, target_width(h, w))
    px = np.clip(px, 0.0, 1.0)
    lo, hi = px.min(), px.max()
    # a summed mean is off by rounding; keep constant images exactly zero after centering
    mean = float(lo) if lo == hi else float(px.mean())
    return LineImage(px, label, source_id, mean)


def patch_counts(width: int) -> tuple[int, int]:
    """(number of 40×40 windows, number of 32×32 windows) for a 40-high line."""
    if width < LINE_HEIGHT:
        raise InputError(f"line width {width} below {LINE_HEIGHT}")
    n40 = (width - 40) // STEP + 1
    n32 = 2 * ((width - 32) // STEP + 1)
    return n40, n32


def extract_patches(line: LineImage, dtype=None) -> PatchSet:
    """Dense 40×40 (downscaled to 32×32) and 32×32 windows with stride 8.

    32×32 windows sit at y in {0, 8}. Every patch has the image mean removed.
    """
    px = line.pixels
    h, w = px.shape
    if h != LINE_HEIGHT:
        raise InputError(f"{line.source_id}: expected height {LINE_HEIGHT}, got {h}")
    n40, n32 = patch_counts(w)
    centred = px - line.mean
    down = bilinear_matrix(40, PATCH_SIDE)
    out = np.empty((n40 + n32, 1, PATCH_SIDE, PATCH_SIDE))
    origins = []
    for i in range(n40):
        x = i * STEP
        out[i, 0] = down @ centred[:, x:x + 40] @ down.T
        origins.append((40, x, 0))
    k = n40
    for y in (0, STEP):
        for i in range(n32 // 2):
            x = i * STEP
            out[k, 0] = centred[y:y + 32, x:x + 32]
            origins.append((32, x, y))
            k += 1
    return PatchSet(out.astype(dtype or get_dtype()), line.label, origins, line.source_id)


def stable_seed(seed: int, key: str) -> list[int]:
    """Seed material for a per-item generator, independent of processing order."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return [int(seed), int.from_bytes(digest[:8], "little")]


def make_ensemble_dataset(patch_sets: list[PatchSet], n: int, seed: int = 0) -> EnsembleDataset:
    """2·M samples of N patches per image with M patches.

    Members are drawn without replacement when M >= N, with replacement
    otherwise. Images without patches are skipped and counted.
    """
    if n < 1:
        raise ConfigurationError(f"ensemble size must be >= 1, got {n}")
    samples, skipped = [], 0
    for ps in patch_sets:
        m = len(ps)
        if m == 0:
            skipped += 1
            continue
        rng = np.random.default_rng(stable_seed(seed, ps.source_id))
        for _ in range(2 * m):
            if m >= n:
                idx = rng.choice(m, n, replace=False)
            else:
                idx = rng.integers(0, m, n)
            samples.append(EnsembleSample(ps, idx, ps.label))
    if skipped:
        log.warning("skipped %d images without patches", skipped)
    return EnsembleDataset(samples, n, skipped)


def patch_arrays(patch_sets: list[PatchSet]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten patch sets into (patches, labels) training arrays."""
    if not patch_sets:
        return np.zeros((0, 1, PATCH_SIDE, PATCH_SIDE), dtype=get_dtype()), np.zeros(0, dtype=np.int64)
    x = np.concatenate([ps.patches for ps in patch_sets])
    y = np.concatenate([np.full(len(ps), ps.label, dtype=np.int64) for ps in patch_sets])
    return x, y


# -- dataset files ----------------------------------------------------------

@dataclass
class Dataset:
    images: list[LineImage]
    classes: list[str]
    errors: list[tuple[str, str]] = field(default_factory=list)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        return np.array(im)


def write_pgm(path, pixels: np.ndarray) -> None:
    """8-bit binary PGM from values in [0, 1]."""
    a = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + a.tobytes())


def read_index(path) -> list[tuple[str, str, int]]:
    """Records (label, relative path, line number) of a dataset index."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise InputError(f"{path}:{lineno}: expected 'label<TAB>relative/path'")
            out.append((parts[0], parts[1], lineno))
    return out


def write_classes(path, classes: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, c in enumerate(classes):
            fh.write(f"{i}\t{c}\n")


def read_classes(path) -> list[str]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            idx, _, label = line.partition("\t")
            if not label or not idx.isdigit():
                raise InputError(f"{path}:{lineno}: expected 'index<TAB>label'")
            entries.append((int(idx), label))
    entries.sort()
    if [i for i, _ in entries] != list(range(len(entries))):
        raise InputError(f"{path}: class indices must be 0..K-1")
    return [label for _, label in entries]


def load_dataset(index_path, classes: list[str] | None = None) -> Dataset:
    """Load and preprocess every image of an index.

    Without ``classes`` the dictionary is the sorted set of index labels.
    Labels outside a supplied dictionary raise; unreadable images are
    collected in ``Dataset.errors`` and skipped.
    """
    index_path = Path(index_path)
    records = read_index(index_path)
    if classes is None:
        classes = sorted({label for label, _, _ in records})
    lookup = {c: i for i, c in enumerate(classes)}
    root = index_path.parent
    images, errors = [], []
    for label, rel, lineno in records:
        if label not in lookup:
            raise InputError(f"{index_path}:{lineno}: unknown label {label!r}")
        path = root / rel
        try:
            raw = read_image(path)
        except (OSError, ValueError) as exc:
            errors.append((str(path), str(exc)))
            continue
        images.append(preprocess(raw, lookup[label], rel))
    return Dataset(images, list(classes), errors)
