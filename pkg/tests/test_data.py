import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intensivenet import ctc
from intensivenet import data as D


def write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    D.write_idx_images(ip, images)
    D.write_idx_labels(lp, labels)
    return ip, lp


def block_glyphs(width=14):
    """Solid 28-row glyphs of a fixed width, one per digit."""
    return D.Dataset(np.ones((10, 28, width, 1)), np.arange(10))


def test_idx_fixture_single_bright_pixel(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[1, 3, 4] = 255
    ip, lp = write_pair(tmp_path, images, [7, 2])
    ds = D.load_mnist_arrays(ip, lp)
    assert ds.images.shape == (2, 28, 28, 1)
    assert ds.images[1, 3, 4, 0] == 1.0 and ds.images.sum() == 1.0
    assert ds.labels.tolist() == [7, 2]
    items = D.load_mnist_idx(ip, lp)
    assert items[0].image.shape == (1, 28, 28, 1) and items[1].label == 2


@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
@settings(max_examples=15)
def test_idx_round_trip_bitwise(n, h, w, seed):
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, h, w), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n)
    with tempfile.TemporaryDirectory() as tmp:
        ip, lp = write_pair(Path(tmp), images, labels)
        dims, payload = D.read_idx(ip, D.IMAGE_MAGIC)
        assert dims == (n, h, w)
        assert np.array_equal(np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w), images)
        ds = D.load_mnist_arrays(ip, lp)
        assert np.array_equal(np.rint(ds.images[..., 0] * 255).astype(np.uint8), images)


def test_idx_errors(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((3, 2, 2), dtype=np.uint8), [1, 2, 3])
    with pytest.raises(D.IdxMagicError):
        D.load_mnist_arrays(lp, ip)
    short = tmp_path / "short.idx"
    short.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(D.IdxTruncatedError):
        D.load_mnist_arrays(short, lp)
    short.write_bytes(b"\x00\x00")
    with pytest.raises(D.IdxTruncatedError):
        D.read_idx(short, D.IMAGE_MAGIC)
    D.write_idx_labels(lp, [1, 2])
    with pytest.raises(D.IdxCountMismatchError):
        D.load_mnist_arrays(ip, lp)


def test_idx_header_is_big_endian(tmp_path):
    ip, _ = write_pair(tmp_path, np.zeros((1, 2, 3), dtype=np.uint8), [0])
    assert ip.read_bytes()[:16] == struct.pack(">IIII", 0x803, 1, 2, 3)


def test_official_test_split(mnist_dir):
    test = D.load_mnist_split("test", mnist_dir)
    assert len(test) == 10000 and test.images.shape[1:] == (28, 28, 1)
    assert test.images.min() == 0.0 and test.images.max() == 1.0
    assert set(test.labels.tolist()) == set(range(10))


def test_resize_nearest_rows():
    img = np.arange(28 * 14, dtype=float).reshape(28, 14)
    out = D.resize_nearest(img, 32)
    assert out.shape == (32, 16)
    assert np.array_equal(out[:, 0], img[(np.arange(32) * 28) // 32, 0])


def test_tight_columns():
    img = np.zeros((3, 6))
    img[1, 2] = img[0, 4] = 0.5
    assert D.tight_columns(img).shape == (3, 3)
    assert D.tight_columns(np.zeros((3, 6))).shape == (3, 1)


@given(st.integers(1, 5), st.integers(0, 3), st.integers(0, 1000))
@settings(max_examples=25)
def test_line_layout_with_solid_glyphs(kmax, jitter, seed):
    spec = D.LineSpec(kmin=1, kmax=kmax, width=120, jitter=jitter, seed=seed)
    lines = D.generate_lines(spec, block_glyphs(), 4)
    for img, label in zip(lines.images[..., 0], lines.labels):
        ink = img.max(axis=0) > 0
        assert np.all((img == 0) | (img == 1))
        edges = np.flatnonzero(np.diff(np.concatenate([[0], ink.astype(int), [0]])))
        starts, stops = edges[::2], edges[1::2]
        assert len(starts) == len(label)
        assert np.all(stops - starts == 16)
        assert starts[0] == 0
        gaps = starts[1:] - stops[:-1]
        assert np.all((gaps >= 1) & (gaps <= 1 + jitter))
        assert not img[:, stops[-1]:].any()


def test_lines_are_deterministic_per_index():
    spec = D.LineSpec(seed=3)
    glyphs = block_glyphs(10)
    a = D.generate_lines(spec, glyphs, 6)
    b = D.generate_lines(spec, glyphs, 3)
    assert np.array_equal(a.images[:3], b.images) and a.labels[:3] == b.labels
    c = D.generate_lines(D.LineSpec(seed=4), glyphs, 3)
    assert c.labels != b.labels or not np.array_equal(c.images, b.images)


def test_line_statistics_and_ranges():
    lines = D.generate_lines(D.LineSpec(), block_glyphs(8), 600, frames=25)
    lengths = np.array([len(l) for l in lines.labels])
    assert lengths.min() == 3 and lengths.max() == 6
    assert abs(lengths.mean() - 4.5) < 0.2
    digits = np.concatenate([np.array(l) for l in lines.labels])
    assert digits.min() == 0 and digits.max() == 9
    assert lines.images.shape == (600, 32, 200, 1)
    assert lines.images.min() >= 0.0 and lines.images.max() <= 1.0
    assert all(ctc.min_frames([d + 1 for d in l]) <= 25 for l in lines.labels)


def test_single_glyph_line_starts_at_left_edge():
    lines = D.generate_lines(D.LineSpec(kmin=1, kmax=1, jitter=0), block_glyphs(), 5)
    for img, label in zip(lines.images[..., 0], lines.labels):
        assert len(label) == 1
        assert img[:, :16].min() == 1.0 and not img[:, 16:].any()


def test_uniform_length_mean():
    lines = D.generate_lines(D.LineSpec(kmin=3, kmax=5, seed=11), block_glyphs(4), 1000)
    assert 3.8 <= np.mean([len(l) for l in lines.labels]) <= 4.2


def test_infeasible_and_overflow():
    with pytest.raises(ctc.InfeasibleTargetError):
        D.generate_lines(D.LineSpec(kmin=3, kmax=14, width=400), block_glyphs(), 2, frames=25)
    with pytest.raises(D.LineOverflowError):
        D.generate_lines(D.LineSpec(kmin=6, kmax=6, width=60), block_glyphs(), 1)
    with pytest.raises(D.DataError):
        D.LineSpec(kmin=0)
    with pytest.raises(D.DataError):
        D.generate_lines(D.LineSpec(), D.Dataset(np.ones((2, 28, 5, 1)), np.array([0, 1])), 1)


@pytest.mark.parametrize("n,ratio,sizes", [(10, 0.9, (9, 1)), (2, 0.5, (1, 1))])
def test_split_sizes(n, ratio, sizes):
    ds = D.Dataset(np.zeros((n, 1, 1, 1)), np.arange(n))
    tr, te = D.split(ds, ratio, seed=0)
    assert (len(tr), len(te)) == sizes


def test_split_is_seeded_partition():
    ds = D.Dataset(np.arange(10, dtype=float).reshape(10, 1, 1, 1), np.arange(10))
    tr, te = D.split(ds, 0.75, seed=1)
    assert (len(tr), len(te)) == (7, 3)
    assert sorted(tr.labels.tolist() + te.labels.tolist()) == list(range(10))
    tr2, _ = D.split(ds, 0.75, seed=1)
    assert np.array_equal(tr.labels, tr2.labels)
    with pytest.raises(D.DataError):
        D.split(ds, 1.0, 0)


def test_lines_persistence_round_trip(tmp_path):
    lines = D.generate_lines(D.LineSpec(kmax=4), block_glyphs(), 3)
    lines.images[0, 0, 0, 0] = 0.3
    D.save_lines(tmp_path / "set", lines)
    back = D.load_lines(tmp_path / "set")
    assert back.labels == lines.labels
    assert np.array_equal(back.images, lines.images.astype(np.float32).astype(np.float64))
    (tmp_path / "set.bin").write_bytes(b"\x00" * 8)
    with pytest.raises(D.DataError):
        D.load_lines(tmp_path / "set")


def test_dataset_validation():
    with pytest.raises(D.DataError):
        D.Dataset(np.zeros((2, 2, 2)), np.zeros(2))
    with pytest.raises(D.DataError):
        D.Dataset(np.zeros((2, 2, 2, 1)), np.zeros(3))
