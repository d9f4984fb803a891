"""Deterministic synthetic text-line benchmark.

Each line is a 40-pixel strip tiled with polyline "glyph" motifs. A share of
the motifs is specific to the line's class; the rest come from a pool shared
by all classes, so many patches are ambiguous on their own and only the
whole line is reliably classifiable.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import __version__
from .errors import ConfigurationError
from .sampler import LINE_HEIGHT, stable_seed, write_classes, write_pgm

CELL_W = 24
CELL_H = 28
CELL_TOP = 6


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    motifs_per_class: int = 2
    shared_motifs: int = 4
    width_min: int = 64
    width_max: int = 192
    noise_sigma: float = 0.05
    n_train: int = 800
    n_test: int = 200
    seed: int = 42
    class_fraction: float = 0.4
    jitter: int = 2

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.width_min < LINE_HEIGHT:
            raise ConfigurationError(f"width_min must be >= {LINE_HEIGHT}, got {self.width_min}")
        if self.width_max < self.width_min:
            raise ConfigurationError("width_max must be >= width_min")
        if self.motifs_per_class < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("motif and image counts must be >= 1")
        if self.shared_motifs < 0 or self.noise_sigma < 0 or self.jitter < 0:
            raise ConfigurationError("shared_motifs, noise_sigma and jitter must be >= 0")
        if not 0.3 <= self.class_fraction <= 1.0:
            raise ConfigurationError("class_fraction must lie in [0.3, 1]")
        if self.jitter > CELL_TOP:
            raise ConfigurationError(f"jitter must be <= {CELL_TOP}")


def _motif(rng: np.random.Generator) -> np.ndarray:
    """Ink mask (CELL_H × CELL_W, values in [0, 1]) of one random polyline glyph."""
    im = Image.new("L", (CELL_W, CELL_H), 0)
    draw = ImageDraw.Draw(im)
    strokes = int(rng.integers(1, 3))
    for _ in range(strokes):
        n = int(rng.integers(3, 6))
        xs = np.linspace(2, CELL_W - 3, n) + rng.uniform(-2, 2, n)
        if rng.random() < 0.5:
            xs = xs[::-1]
        ys = rng.uniform(2, CELL_H - 3, n)
        pts = [(float(np.clip(x, 1, CELL_W - 2)), float(y)) for x, y in zip(xs, ys)]
        draw.line(pts, fill=255, width=2, joint="curve")
    return np.asarray(im, dtype=np.float64) / 255.0


def make_motifs(cfg: SynthConfig) -> tuple[list[list[np.ndarray]], list[np.ndarray]]:
    """(per-class motif lists, shared pool), drawn from the master seed."""
    rng = np.random.default_rng(stable_seed(cfg.seed, "motifs"))
    per_class = [[_motif(rng) for _ in range(cfg.motifs_per_class)] for _ in range(cfg.num_classes)]
    shared = [_motif(rng) for _ in range(cfg.shared_motifs)]
    return per_class, shared


def render_line(cfg: SynthConfig, label: int, rng: np.random.Generator,
                per_class, shared) -> np.ndarray:
    width = int(rng.integers(cfg.width_min, cfg.width_max + 1))
    bg = rng.uniform(0.65, 0.9)
    ink = bg - rng.uniform(0.4, 0.55)
    mask = np.zeros((LINE_HEIGHT, width))
    starts = []
    x = int(rng.integers(0, 6))
    while x + CELL_W <= width:
        starts.append(x)
        x += CELL_W + int(rng.integers(2, 9))
    if not starts:
        starts = [max(0, (width - CELL_W) // 2)]
    n = len(starts)
    n_class = n if not shared else max(1, math.ceil(cfg.class_fraction * n))
    class_cells = set(rng.choice(n, n_class, replace=False).tolist())
    for i, x0 in enumerate(starts):
        if i in class_cells:
            glyph = per_class[label][int(rng.integers(len(per_class[label])))]
        else:
            glyph = shared[int(rng.integers(len(shared)))]
        dy = int(rng.integers(-cfg.jitter, cfg.jitter + 1)) if cfg.jitter else 0
        top = CELL_TOP + dy
        w = min(CELL_W, width - x0)
        region = mask[top:top + CELL_H, x0:x0 + w]
        np.maximum(region, glyph[:, :w], out=region)
    px = bg - (bg - ink) * mask
    if cfg.noise_sigma > 0:
        px = px + rng.normal(0.0, cfg.noise_sigma, px.shape)
    return np.clip(px, 0.0, 1.0)


def class_names(k: int) -> list[str]:
    return [f"script{i:02d}" for i in range(k)]


def generate(cfg: SynthConfig) -> dict[str, list[tuple[np.ndarray, int, str]]]:
    """In-memory lines per split as (pixels, label, source_id)."""
    cfg.validate()
    per_class, shared = make_motifs(cfg)
    out = {}
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        split_seed = stable_seed(cfg.seed, split)[1]
        rows = []
        for i in range(count):
            label = i % cfg.num_classes
            sid = f"{split}/img_{i:05d}.pgm"
            rng = np.random.default_rng(stable_seed(split_seed, sid))
            rows.append((render_line(cfg, label, rng, per_class, shared), label, sid))
        out[split] = rows
    return out


@dataclass
class SynthResult:
    root: Path
    train_index: Path
    test_index: Path
    classes_path: Path
    classes: list[str]


def synth_generate(cfg: SynthConfig, out_dir) -> SynthResult:
    """Write both splits as PGM files plus index, class and manifest files."""
    cfg.validate()
    root = Path(out_dir)
    names = class_names(cfg.num_classes)
    splits = generate(cfg)
    for split, rows in splits.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        with open(root / f"{split}.txt", "w", encoding="utf-8", newline="\n") as fh:
            for px, label, sid in rows:
                write_pgm(root / sid, px)
                fh.write(f"{names[label]}\t{sid}\n")
    write_classes(root / "classes.txt", names)
    manifest = {"command": "synth", "engine_version": __version__, "synth_config": asdict(cfg)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return SynthResult(root, root / "train.txt", root / "test.txt", root / "classes.txt", names)
