"""Image IO, dataset loading, and the synthetic pair generator."""

import numpy as np
import pytest

from hpfuse.data import (
    DatasetError,
    encode_gray_png,
    load_dataset,
    load_image,
    load_pair,
    make_synthetic_dataset,
    resize_bilinear,
    rgb_to_ycbcr,
    save_gray_png,
    save_rgb_png,
    ycbcr_to_rgb,
)


def test_synthetic_dataset_files_and_determinism(tmp_path):
    written = make_synthetic_dataset(tmp_path / "a", n=16, size=64, seed=7)
    assert len(written) == 32
    blobs = {p.name + p.parent.name: p.read_bytes() for p in written}
    make_synthetic_dataset(tmp_path / "b", n=16, size=64, seed=7)
    for p in written:
        twin = tmp_path / "b" / p.parent.name / p.name
        assert twin.read_bytes() == blobs[p.name + p.parent.name]
    # a different seed must give different pixels
    make_synthetic_dataset(tmp_path / "c", n=1, size=64, seed=8)
    assert (tmp_path / "c" / "vis" / "pair_000.png").read_bytes() != \
        (tmp_path / "a" / "vis" / "pair_000.png").read_bytes()


def test_synthetic_dataset_statistics(tmp_path):
    make_synthetic_dataset(tmp_path, n=6, size=64, seed=3)
    pairs = load_dataset(tmp_path)
    assert len(pairs) == 6
    for pair in pairs:
        assert pair.infrared.std() > 0.05
        assert pair.visible.std() > 0.05
        assert np.abs(pair.infrared - pair.visible).mean() > 0.05


def test_load_dataset_sorted_and_skips_unmatched(tmp_path, caplog):
    make_synthetic_dataset(tmp_path, n=4, size=32, seed=1)
    save_gray_png(tmp_path / "ir" / "zzz_orphan.png", np.zeros((8, 8)))
    with caplog.at_level("WARNING"):
        pairs = load_dataset(tmp_path)
    assert [p.name for p in pairs] == [f"pair_{i:03d}.png" for i in range(4)]
    assert any("zzz_orphan" in rec.message for rec in caplog.records)


def test_pair_size_mismatch_names_both_files(tmp_path):
    save_gray_png(tmp_path / "a.png", np.zeros((8, 8)))
    save_gray_png(tmp_path / "b.png", np.zeros((9, 8)))
    with pytest.raises(DatasetError) as err:
        load_pair(tmp_path / "a.png", tmp_path / "b.png")
    assert "a.png" in str(err.value) and "b.png" in str(err.value)


def test_undecodable_image_raises(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"this is not a png")
    with pytest.raises(DatasetError, match="decode"):
        load_image(bad)


def test_rgb_visible_converts_to_luma_and_keeps_chroma(tmp_path):
    rgb = np.zeros((6, 6, 3))
    rgb[..., 0] = 1.0  # pure red
    save_rgb_png(tmp_path / "red.png", rgb)
    luma, chroma, _ = load_image(tmp_path / "red.png")
    np.testing.assert_allclose(luma, 0.299, atol=1e-6)
    assert chroma is not None and chroma.shape == (2, 6, 6)


def test_ycbcr_round_trip():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0.1, 0.9, (5, 7, 3))
    y, chroma = rgb_to_ycbcr(rgb)
    back = ycbcr_to_rgb(y, chroma)
    np.testing.assert_allclose(back, rgb, atol=2e-3)


def test_gray_png_quantized_round_trip(tmp_path):
    arr = np.linspace(0, 1, 64).reshape(8, 8)
    save_gray_png(tmp_path / "g.png", arr)
    luma, chroma, _ = load_image(tmp_path / "g.png")
    assert chroma is None
    np.testing.assert_allclose(luma, np.round(arr * 255) / 255.0, atol=1e-9)
    assert not (tmp_path / "g.png.tmp").exists()  # atomic write cleans up


def test_encode_gray_png_deterministic():
    arr = np.random.default_rng(1).uniform(0, 1, (16, 16))
    assert encode_gray_png(arr) == encode_gray_png(arr)


def test_resize_bilinear_shape_and_determinism():
    arr = np.random.default_rng(2).uniform(0, 1, (48, 48))
    out = resize_bilinear(arr, 32)
    assert out.shape == (32, 32)
    np.testing.assert_array_equal(out, resize_bilinear(arr, 32))
    np.testing.assert_allclose(resize_bilinear(np.full((20, 20), 0.5), 32), 0.5, atol=1e-7)


def test_dataset_requires_layout(tmp_path):
    with pytest.raises(DatasetError, match="ir/"):
        load_dataset(tmp_path)


def test_pair_hashes_are_content_hashes(tmp_path):
    make_synthetic_dataset(tmp_path, n=1, size=32, seed=5)
    import hashlib

    pair = load_dataset(tmp_path)[0]
    raw = (tmp_path / "ir" / "pair_000.png").read_bytes()
    assert pair.ir_hash == hashlib.sha256(raw).hexdigest()
