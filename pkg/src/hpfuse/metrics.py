"""Fusion-quality metrics and report assembly.

Five metrics between a fused image F and the source pair (A, B), all on the
0..255 intensity scale: MSE, SSIM, PSNR, CC (Pearson), and the
Xydeas-Petrovic edge-preservation score. Two-source metrics average the
F-vs-A and F-vs-B values. ``evaluate_directory`` walks three directories of
matching filenames and emits a CSV plus an aligned text table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .autodiff import ShapeMismatch, Tensor, ssim
from .data import DatasetError, load_gray255

__all__ = [
    "MetricReport",
    "MetricRow",
    "cc_metric",
    "evaluate_directory",
    "format_table",
    "mse_metric",
    "psnr_metric",
    "qabf_metric",
    "ssim_metric",
    "write_csv",
]

PSNR_CAP_DB = 100.0

# edge-preservation sigmoid constants (strength, then orientation)
QABF_GAMMA_G = 0.9994
QABF_KAPPA_G = -15.0
QABF_SIGMA_G = 0.5
QABF_GAMMA_A = 0.9879
QABF_KAPPA_A = -22.0
QABF_SIGMA_A = 0.8

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()


def _check(f, a, b):
    f, a, b = (np.asarray(x, dtype=np.float64) for x in (f, a, b))
    if f.shape != a.shape or f.shape != b.shape:
        raise ShapeMismatch(f"metric inputs differ in shape: {f.shape}, {a.shape}, {b.shape}")
    return f, a, b


def mse_metric(fused, src_a, src_b) -> float:
    """Mean of the two per-source mean squared errors (0..255 scale)."""
    f, a, b = _check(fused, src_a, src_b)
    return 0.5 * (float(np.mean((f - a) ** 2)) + float(np.mean((f - b) ** 2)))


def psnr_metric(fused, src_a, src_b) -> float:
    """10 log10(255^2 / mse), capped at 100 dB for (near-)zero error."""
    mse = mse_metric(fused, src_a, src_b)
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(255.0**2 / mse))


def ssim_metric(fused, src_a, src_b) -> float:
    """Mean of the two structural similarities (images rescaled to [0, 1])."""
    f, a, b = _check(fused, src_a, src_b)
    tf, ta, tb = (Tensor(np.clip(x / 255.0, 0.0, 1.0)) for x in (f, a, b))
    return 0.5 * (ssim(tf, ta).item() + ssim(tf, tb).item())


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xd, yd = x - x.mean(), y - y.mean()
    denom = math.sqrt(float((xd * xd).sum()) * float((yd * yd).sum()))
    if denom == 0.0:
        return 0.0  # degenerate (constant image) term is defined as 0
    return float((xd * yd).sum()) / denom


def cc_metric(fused, src_a, src_b) -> float:
    """Mean Pearson correlation of the fused image with each source."""
    f, a, b = _check(fused, src_a, src_b)
    return 0.5 * (_pearson(f, a) + _pearson(f, b))


def _edge_strength_orientation(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = convolve(img, _SOBEL_X, mode="reflect")
    gy = convolve(img, _SOBEL_Y, mode="reflect")
    strength = np.sqrt(gx * gx + gy * gy)
    gx_safe = gx + (gx == 0) * 1e-5
    return strength, np.arctan(gy / gx_safe)


def _edge_preservation(src_g, src_a, fused_g, fused_a) -> np.ndarray:
    ratio_down = fused_g / (src_g + (src_g == 0) * 1e-5)
    ratio_up = src_g / (fused_g + (fused_g == 0) * 1e-5)
    rel_strength = np.where(src_g > fused_g, ratio_down, ratio_up)
    rel_orient = 1.0 - np.abs(src_a - fused_a) * 2.0 / np.pi
    q_g = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (rel_strength - QABF_SIGMA_G)))
    q_a = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (rel_orient - QABF_SIGMA_A)))
    return q_g * q_a


def qabf_metric(fused, src_a, src_b) -> float:
    """Edge retention: per-pixel strength/orientation preservation, weighted
    by source edge strength; 0 when neither source has any edges."""
    f, a, b = _check(fused, src_a, src_b)
    if min(f.shape) < 3:
        raise ShapeMismatch(f"edge metric needs at least 3x3 images, got {f.shape}")
    fg, fa = _edge_strength_orientation(f)
    ag, aa = _edge_strength_orientation(a)
    bg, ba = _edge_strength_orientation(b)
    q_af = _edge_preservation(ag, aa, fg, fa)
    q_bf = _edge_preservation(bg, ba, fg, fa)
    weight_sum = float((ag + bg).sum())
    if weight_sum == 0.0:
        return 0.0
    return float((q_af * ag + q_bf * bg).sum()) / weight_sum


METRIC_NAMES = ("mse", "ssim", "psnr", "cc", "qabf")


def compute_all(fused, src_a, src_b) -> dict[str, float]:
    return {
        "mse": mse_metric(fused, src_a, src_b),
        "ssim": ssim_metric(fused, src_a, src_b),
        "psnr": psnr_metric(fused, src_a, src_b),
        "cc": cc_metric(fused, src_a, src_b),
        "qabf": qabf_metric(fused, src_a, src_b),
    }


@dataclass
class MetricRow:
    name: str
    mse: float
    ssim: float
    psnr: float
    cc: float
    qabf: float

    def values(self) -> tuple[float, ...]:
        return (self.mse, self.ssim, self.psnr, self.cc, self.qabf)


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    excluded: list[tuple[str, str]] = field(default_factory=list)  # (filename, reason)

    @property
    def count(self) -> int:
        return len(self.rows)

    def mean_row(self) -> MetricRow:
        if not self.rows:
            raise ValueError("empty report has no mean")
        cols = np.array([r.values() for r in self.rows])
        return MetricRow("MEAN", *(float(v) for v in cols.mean(axis=0)))


def evaluate_directory(fused_dir, ir_dir, vis_dir) -> MetricReport:
    """Score every filename present in all three directories (sorted order).

    Missing counterparts and unreadable images are listed in
    ``report.excluded`` and left out of the means.
    """
    fused_dir, ir_dir, vis_dir = Path(fused_dir), Path(ir_dir), Path(vis_dir)
    report = MetricReport()
    fused_names = {p.name for p in fused_dir.iterdir() if p.is_file()}
    ir_names = {p.name for p in ir_dir.iterdir() if p.is_file()}
    vis_names = {p.name for p in vis_dir.iterdir() if p.is_file()}
    every = sorted(fused_names | ir_names | vis_names)
    for name in every:
        held = [d for d, names in (("fused", fused_names), ("ir", ir_names), ("vis", vis_names))
                if name not in names]
        if held:
            report.excluded.append((name, f"missing in {', '.join(held)}"))
            continue
        try:
            fused = load_gray255(fused_dir / name)
            ir = load_gray255(ir_dir / name)
            vis = load_gray255(vis_dir / name)
            scores = compute_all(fused, ir, vis)
        except (DatasetError, ShapeMismatch) as exc:
            report.excluded.append((name, str(exc)))
            continue
        report.rows.append(MetricRow(name, **scores))
    return report


def write_csv(report: MetricReport, path) -> None:
    """UTF-8, LF line endings, 6-decimal fixed point, final MEAN row."""
    lines = ["file," + ",".join(METRIC_NAMES)]
    for row in report.rows + ([report.mean_row()] if report.rows else []):
        lines.append(row.name + "," + ",".join(f"{v:.6f}" for v in row.values()))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def format_table(report: MetricReport) -> str:
    """Aligned text table with the usual metric columns plus exclusions."""
    headers = ("file", "MSE", "SSIM", "PSNR", "CC", "Q^AB/F")
    rows = [(r.name, *(f"{v:.4f}" for v in r.values()))
            for r in report.rows + ([report.mean_row()] if report.rows else [])]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    out = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    out.append("  ".join("-" * w for w in widths))
    for r in rows:
        out.append("  ".join(str(r[i]).ljust(widths[i]) for i in range(len(headers))))
    for name, reason in report.excluded:
        out.append(f"excluded: {name} ({reason})")
    return "\n".join(out)
