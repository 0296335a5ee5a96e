"""Metric values against dense oracles, degenerate cases, and reports."""

import math

import numpy as np
import pytest

import oracle_impl as oracle
from hpfuse.autodiff import ShapeMismatch
from hpfuse.data import save_gray_png
from hpfuse.metrics import (
    PSNR_CAP_DB,
    cc_metric,
    compute_all,
    evaluate_directory,
    format_table,
    mse_metric,
    psnr_metric,
    qabf_metric,
    ssim_metric,
    write_csv,
)


def triple(seed, hw=16, scale=255.0):
    rng = np.random.default_rng(seed)
    return tuple(rng.uniform(0, scale, (hw, hw)) for _ in range(3))


# -- mse / psnr -----------------------------------------------------------------


def test_mse_zero_on_identical():
    x = triple(0)[0]
    assert mse_metric(x, x, x) == 0.0


def test_mse_one_gray_level_offset():
    a = triple(1)[0]
    np.testing.assert_allclose(mse_metric(a, a, a + 1.0), 0.5, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_mse_matches_oracle(seed):
    f, a, b = triple(seed + 10)
    np.testing.assert_allclose(mse_metric(f, a, b), oracle.mse(f, a, b), rtol=1e-12)


def test_psnr_table_scale_coherence():
    # constant offset chosen so the combined mse is exactly 0.032
    a = np.zeros((16, 16))
    f = np.full((16, 16), math.sqrt(0.032))
    got = psnr_metric(f, a, a)
    want = 10.0 * math.log10(255.0**2 / 0.032)
    np.testing.assert_allclose(got, want, rtol=1e-12)
    assert abs(got - 63.1) < 0.05


def test_psnr_capped_on_identical():
    x = triple(2)[0]
    assert psnr_metric(x, x, x) == PSNR_CAP_DB


def test_psnr_halving_mse_adds_3dB():
    a = np.zeros((8, 8))
    f1 = np.full((8, 8), 0.2)
    f2 = np.full((8, 8), 0.2 / math.sqrt(2.0))
    np.testing.assert_allclose(psnr_metric(f2, a, a) - psnr_metric(f1, a, a),
                               10.0 * math.log10(2.0), rtol=1e-9)


# -- ssim -------------------------------------------------------------------------


def test_ssim_metric_identical_is_one():
    x = triple(3)[0]
    np.testing.assert_allclose(ssim_metric(x, x, x), 1.0, atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_metric_matches_oracle(seed):
    f, a, b = triple(seed + 20)
    np.testing.assert_allclose(ssim_metric(f, a, b), oracle.ssim_metric(f, a, b), atol=1e-9)


def test_ssim_metric_constant_fused_against_texture():
    _, a, b = triple(4)
    f = np.full_like(a, 128.0)
    np.testing.assert_allclose(ssim_metric(f, a, b), oracle.ssim_metric(f, a, b), atol=1e-9)


# -- cc ----------------------------------------------------------------------------


def test_cc_identical_nonconstant_is_one():
    x = triple(5)[0]
    np.testing.assert_allclose(cc_metric(x, x, x), 1.0, atol=1e-12)


def test_cc_affine_invariance():
    a = triple(6)[0]
    f = 2.5 * a + 7.0
    np.testing.assert_allclose(cc_metric(f, a, a), 1.0, atol=1e-12)


def test_cc_constant_term_is_zero():
    a = triple(7)[0]
    f = np.full_like(a, 10.0)
    # corr(F, const A) term -> 0; corr with itself undefined too -> both 0
    assert cc_metric(f, f, a) == 0.5 * (0.0 + oracle.pearson(f, a))


@pytest.mark.parametrize("seed", range(5))
def test_cc_matches_oracle(seed):
    f, a, b = triple(seed + 30)
    np.testing.assert_allclose(cc_metric(f, a, b), oracle.cc(f, a, b), atol=1e-9)


# -- qabf --------------------------------------------------------------------------


def test_qabf_perfect_preservation_value():
    x = triple(8)[0]
    got = qabf_metric(x, x, x)
    want = (0.9994 / (1 + math.exp(-15.0 * 0.5))) * (0.9879 / (1 + math.exp(-22.0 * 0.2)))
    np.testing.assert_allclose(got, want, rtol=1e-9)
    assert abs(got - 0.975) < 1e-3


def test_qabf_constant_fused_scores_near_zero():
    _, a, b = triple(9)
    f = np.full_like(a, 100.0)
    assert qabf_metric(f, a, b) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_qabf_matches_oracle(seed):
    f, a, b = triple(seed + 40, hw=12)
    np.testing.assert_allclose(qabf_metric(f, a, b), oracle.qabf(f, a, b), atol=1e-6)


def test_qabf_range_on_random_triples():
    for seed in range(25):
        f, a, b = triple(seed + 50, hw=8)
        assert 0.0 <= qabf_metric(f, a, b) <= 1.0


def test_qabf_too_small_raises():
    with pytest.raises(ShapeMismatch):
        qabf_metric(np.zeros((2, 5)), np.zeros((2, 5)), np.zeros((2, 5)))


# -- shared properties ----------------------------------------------------------------


@pytest.mark.parametrize("metric", [mse_metric, ssim_metric, psnr_metric, cc_metric, qabf_metric])
def test_source_swap_symmetry(metric):
    f, a, b = triple(60)
    assert abs(metric(f, a, b) - metric(f, b, a)) < 1e-12


def test_shape_mismatch_raises():
    with pytest.raises(ShapeMismatch):
        mse_metric(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))


# -- directory evaluation ----------------------------------------------------------------


def _write_triples(root, names, seed=0):
    rng = np.random.default_rng(seed)
    for sub in ("fused", "ir", "vis"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for name in names:
        for sub in ("fused", "ir", "vis"):
            save_gray_png(root / sub / name, rng.uniform(0, 1, (16, 16)))


def test_evaluate_directory_means(tmp_path):
    names = [f"img_{i}.png" for i in range(3)]
    _write_triples(tmp_path, names)
    report = evaluate_directory(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis")
    assert report.count == 3
    assert [r.name for r in report.rows] == sorted(names)
    mean = report.mean_row()
    np.testing.assert_allclose(mean.mse, np.mean([r.mse for r in report.rows]), rtol=1e-12)
    assert not report.excluded


def test_evaluate_directory_lists_missing(tmp_path):
    names = [f"img_{i}.png" for i in range(4)]
    _write_triples(tmp_path, names)
    (tmp_path / "fused" / "img_2.png").unlink()
    report = evaluate_directory(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis")
    assert report.count == 3
    assert report.excluded == [("img_2.png", "missing in fused")]


def test_csv_is_byte_stable_and_well_formed(tmp_path):
    _write_triples(tmp_path, ["b.png", "a.png"])
    report = evaluate_directory(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis")
    out1, out2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    write_csv(report, out1)
    report2 = evaluate_directory(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis")
    write_csv(report2, out2)
    blob = out1.read_bytes()
    assert blob == out2.read_bytes()
    assert b"\r" not in blob
    lines = blob.decode("utf-8").strip().split("\n")
    assert lines[0] == "file,mse,ssim,psnr,cc,qabf"
    assert lines[1].startswith("a.png,")  # sorted by filename
    assert lines[-1].startswith("MEAN,")
    assert all(len(line.split(",")) == 6 for line in lines)


def test_format_table_mentions_all_rows(tmp_path):
    _write_triples(tmp_path, ["x.png"])
    (tmp_path / "ir" / "orphan.png").write_bytes(b"not a png")
    report = evaluate_directory(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis")
    table = format_table(report)
    assert "x.png" in table and "MEAN" in table
    assert "excluded: orphan.png" in table
