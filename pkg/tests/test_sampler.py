"""Preprocessing geometry, window counts and ensemble sampling."""
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ecn import sampler
from ecn.errors import ConfigurationError, InputError


def enumerate_windows(width):
    """Every (scale, x, y) window fitting in a 40-high line at stride 8."""
    out = []
    for x in range(0, width - 40 + 1, 8):
        out.append((40, x, 0))
    for y in range(0, 40 - 32 + 1, 8):
        for x in range(0, width - 32 + 1, 8):
            out.append((32, x, y))
    return out


def test_patch_counts_match_enumeration_for_all_widths():
    for width in range(40, 4001):
        n40, n32 = sampler.patch_counts(width)
        windows = enumerate_windows(width)
        assert n40 + n32 == len(windows), width
        assert n40 == sum(1 for w in windows if w[0] == 40), width


def test_patch_count_examples():
    assert sampler.patch_counts(184) == (19, 40)
    # x in {0, 8} at both rows y in {0, 8}: the count formula and enumeration agree on 4
    assert sampler.patch_counts(40) == (1, 4)
    with pytest.raises(InputError):
        sampler.patch_counts(39)


@pytest.mark.parametrize("h,w,expect", [(60, 100, 67), (40, 40, 40), (80, 20, 40)])
def test_target_width(h, w, expect):
    assert sampler.target_width(h, w) == expect


def test_preprocess_color_geometry(rng):
    raw = rng.integers(0, 256, (60, 100, 3), dtype=np.uint8)
    line = sampler.preprocess(raw)
    assert line.pixels.shape == (40, 67)
    assert 0.0 <= line.pixels.min() and line.pixels.max() <= 1.0


def test_preprocess_identity_resize(rng):
    raw = rng.random((40, 40))
    np.testing.assert_allclose(sampler.preprocess(raw).pixels, raw, atol=1e-12)


def test_preprocess_clamps_narrow_images():
    assert sampler.preprocess(np.zeros((80, 20), dtype=np.uint8)).pixels.shape == (40, 40)


def test_preprocess_rejects_empty():
    with pytest.raises(InputError):
        sampler.preprocess(np.zeros((0, 5)))


def test_bilinear_rows_are_convex():
    m = sampler.bilinear_matrix(40, 32)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert (m >= 0).all()
    np.testing.assert_array_equal(sampler.bilinear_matrix(7, 7), np.eye(7))


def test_constant_image_gives_zero_patches():
    line = sampler.preprocess(np.full((40, 90), 0.3))
    ps = sampler.extract_patches(line)
    assert len(ps) == sum(sampler.patch_counts(90))
    assert not ps.patches.any()


def test_patch_origins_and_content(rng):
    line = sampler.preprocess(rng.random((40, 72)))
    ps = sampler.extract_patches(line, dtype=np.float64)
    assert sorted(ps.origins) == sorted(enumerate_windows(72))
    i = ps.origins.index((32, 16, 8))
    np.testing.assert_allclose(ps.patches[i, 0], line.pixels[8:40, 16:48] - line.mean, atol=1e-12)


def patch_set(m, label=0, sid="img"):
    return sampler.PatchSet(np.zeros((m, 1, 32, 32)), label, [(32, 0, 0)] * m, sid)


def test_ensemble_without_replacement():
    ds = sampler.make_ensemble_dataset([patch_set(12)], 10, seed=0)
    assert len(ds) == 24
    for s in ds:
        assert len(set(s.indices.tolist())) == 10


def test_ensemble_small_images_repeat():
    ds = sampler.make_ensemble_dataset([patch_set(3)], 10, seed=0)
    assert len(ds) == 6
    for s in ds:
        assert len(s.indices) == 10 and len(set(s.indices.tolist())) <= 3


@settings(max_examples=25, deadline=None)
@given(ms=st.lists(st.integers(0, 30), min_size=1, max_size=6), n=st.integers(1, 12))
def test_ensemble_size_is_twice_total_patches(ms, n):
    sets = [patch_set(m, sid=f"i{k}") for k, m in enumerate(ms)]
    ds = sampler.make_ensemble_dataset(sets, n, seed=1)
    assert len(ds) == 2 * sum(ms)
    assert ds.skipped == sum(1 for m in ms if m == 0)
    assert all(len(s.indices) == n for s in ds)


def test_ensemble_n1_patch_usage():
    """Each draw is uniform over the image's patches, so every patch is used twice on average."""
    counts = Counter()
    trials = 400
    for seed in range(trials):
        ds = sampler.make_ensemble_dataset([patch_set(5)], 1, seed=seed)
        assert len(ds) == 10
        counts.update(int(s.indices[0]) for s in ds)
    mean_uses = np.array([counts[i] for i in range(5)]) / trials
    np.testing.assert_allclose(mean_uses, 2.0, atol=0.25)


def test_ensemble_rejects_bad_n():
    with pytest.raises(ConfigurationError):
        sampler.make_ensemble_dataset([patch_set(3)], 0)


def test_ensemble_deterministic_per_image():
    a = sampler.make_ensemble_dataset([patch_set(8, sid="a"), patch_set(9, sid="b")], 4, seed=5)
    b = sampler.make_ensemble_dataset([patch_set(9, sid="b")], 4, seed=5)
    np.testing.assert_array_equal(np.stack([s.indices for s in a.samples[16:]]),
                                  np.stack([s.indices for s in b.samples]))


def _write(root, rel, shape=(40, 60)):
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full(shape, 128, dtype=np.uint8)).save(path)


def test_load_dataset(tmp_path):
    for i in range(4):
        _write(tmp_path, f"img/{i}.png")
    (tmp_path / "index.txt").write_text("b\timg/0.png\na\timg/1.png\nb\timg/2.png\na\timg/3.png\n")
    ds = sampler.load_dataset(tmp_path / "index.txt")
    assert len(ds.images) == 4 and ds.classes == ["a", "b"]
    assert [im.label for im in ds.images] == [1, 0, 1, 0]


def test_load_dataset_reports_missing_file(tmp_path):
    _write(tmp_path, "ok.png")
    (tmp_path / "index.txt").write_text("a\tok.png\na\tgone.png\n")
    ds = sampler.load_dataset(tmp_path / "index.txt")
    assert len(ds.images) == 1
    assert [p for p, _ in ds.errors] == [str(tmp_path / "gone.png")]


def test_load_dataset_duplicates_pass_through(tmp_path):
    _write(tmp_path, "x.png")
    (tmp_path / "index.txt").write_text("a\tx.png\na\tx.png\nb\tx.png\n")
    assert len(sampler.load_dataset(tmp_path / "index.txt").images) == 3


def test_load_dataset_unknown_label(tmp_path):
    _write(tmp_path, "x.png")
    (tmp_path / "index.txt").write_text("zz\tx.png\n")
    with pytest.raises(InputError, match="zz"):
        sampler.load_dataset(tmp_path / "index.txt", ["a", "b"])


def test_malformed_index_line(tmp_path):
    (tmp_path / "index.txt").write_text("a x.png\n")
    with pytest.raises(InputError, match=":1:"):
        sampler.read_index(tmp_path / "index.txt")
