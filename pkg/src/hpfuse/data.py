"""Image and dataset handling.

Images are kept as float arrays in [0, 1]. Color visible images are split
into luma (fused) and Cb/Cr chroma (reattached after fusion); infrared
inputs are single-channel. Dataset layout: ``<root>/ir`` and ``<root>/vis``
with matching filenames.
"""

from __future__ import annotations

import hashlib
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R 601


class DatasetError(ValueError):
    """Dataset layout or image decoding problem."""


def rgb_to_ycbcr(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(H, W, 3) in [0,1] -> luma (H, W) and chroma (2, H, W)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    cb = (b - y) * 0.564 + 0.5
    cr = (r - y) * 0.713 + 0.5
    return y, np.stack([cb, cr])


def ycbcr_to_rgb(y: np.ndarray, chroma: np.ndarray) -> np.ndarray:
    """Luma (H, W) plus chroma (2, H, W) -> (H, W, 3) in [0,1]."""
    cb, cr = chroma[0] - 0.5, chroma[1] - 0.5
    r = y + 1.403 * cr
    g = y - 0.344 * cb - 0.714 * cr
    b = y + 1.773 * cb
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def load_image(path) -> tuple[np.ndarray, np.ndarray | None, bytes]:
    """Read an 8-bit raster image: (luma in [0,1], chroma or None, file bytes)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    try:
        with Image.open(io.BytesIO(raw)) as img:
            img.load()
            if img.mode in ("L", "I;16", "I"):
                gray = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
                return gray, None, raw
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    luma, chroma = rgb_to_ycbcr(rgb)
    return np.clip(luma, 0.0, 1.0), chroma, raw


def load_gray255(path) -> np.ndarray:
    """Luma scaled to the 0..255 range (metric convention)."""
    luma, _, _ = load_image(path)
    return luma * 255.0


def encode_gray_png(arr01: np.ndarray) -> bytes:
    """Deterministic in-memory PNG encoding of a [0,1] grayscale array."""
    data = np.clip(np.round(np.asarray(arr01, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def save_png_atomic(path, payload: bytes) -> None:
    """Write-then-rename so a failed write never leaves a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_gray_png(path, arr01: np.ndarray) -> None:
    save_png_atomic(path, encode_gray_png(arr01))


def save_rgb_png(path, rgb01: np.ndarray) -> None:
    data = np.clip(np.round(rgb01 * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    save_png_atomic(path, buf.getvalue())


def resize_bilinear(arr: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample of a (H, W) float array to size x size."""
    img = Image.fromarray(np.asarray(arr, dtype=np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64)


@dataclass
class ImagePair:
    """Registered infrared + visible pair, values clamped to [0, 1]."""

    name: str
    infrared: np.ndarray           # (1, H, W)
    visible: np.ndarray            # (1, H, W) luma
    chroma: np.ndarray | None      # (2, H, W) Cb/Cr from a color visible image
    ir_path: str
    vis_path: str
    ir_hash: str                   # sha256 of the source file bytes
    vis_hash: str

    @property
    def height(self) -> int:
        return self.infrared.shape[1]

    @property
    def width(self) -> int:
        return self.infrared.shape[2]


def _as_plane(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0)[None, :, :]


def load_pair(ir_path, vis_path, name: str | None = None) -> ImagePair:
    ir_luma, _, ir_raw = load_image(ir_path)
    vis_luma, chroma, vis_raw = load_image(vis_path)
    if ir_luma.shape != vis_luma.shape:
        raise DatasetError(
            f"pair size mismatch: {ir_path} is {ir_luma.shape} but {vis_path} is {vis_luma.shape}")
    return ImagePair(
        name=name or Path(ir_path).name,
        infrared=_as_plane(ir_luma),
        visible=_as_plane(vis_luma),
        chroma=chroma,
        ir_path=str(ir_path),
        vis_path=str(vis_path),
        ir_hash=hashlib.sha256(ir_raw).hexdigest(),
        vis_hash=hashlib.sha256(vis_raw).hexdigest(),
    )


def load_dataset(root) -> list[ImagePair]:
    """Pairs from ``root/ir`` and ``root/vis``, sorted by filename.

    Unmatched files are skipped with a warning; undecodable images and
    size-mismatched pairs raise.
    """
    root = Path(root)
    ir_dir, vis_dir = root / "ir", root / "vis"
    if not ir_dir.is_dir() or not vis_dir.is_dir():
        raise DatasetError(f"dataset root {root} must contain ir/ and vis/ directories")
    ir_names = {p.name for p in ir_dir.iterdir() if p.is_file()}
    vis_names = {p.name for p in vis_dir.iterdir() if p.is_file()}
    for lonely in sorted(ir_names ^ vis_names):
        side = "vis" if lonely in ir_names else "ir"
        logger.warning("skipping %s: no %s counterpart", lonely, side)
    pairs = []
    for name in sorted(ir_names & vis_names):
        pairs.append(load_pair(ir_dir / name, vis_dir / name, name=name))
    return pairs


def make_synthetic_dataset(out_dir, n: int, size: int, seed: int) -> list[Path]:
    """Write ``n`` deterministic pairs: textured "visible" images and
    blob-target "infrared" images. Returns the written paths."""
    out_dir = Path(out_dir)
    (out_dir / "ir").mkdir(parents=True, exist_ok=True)
    (out_dir / "vis").mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    written = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        vis = np.zeros((size, size))
        for _ in range(4):
            freq = rng.uniform(2.0, 9.0)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            vis += rng.uniform(0.4, 1.0) * np.sin(
                2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        vis += rng.uniform(0.5, 1.5) * (xx - 0.5)
        lo, hi = vis.min(), vis.max()
        vis = 0.05 + 0.9 * (vis - lo) / (hi - lo)

        ir = 0.08 + 0.1 * (yy - 0.5) * rng.uniform(0.2, 1.0)
        for _ in range(int(rng.integers(2, 5))):
            cx, cy = rng.uniform(0.15, 0.85, 2)
            sigma = rng.uniform(0.04, 0.15)
            amp = rng.uniform(0.5, 0.9)
            ir += amp * np.exp(-(((xx - cx) ** 2) + ((yy - cy) ** 2)) / (2 * sigma**2))
        ir = np.clip(ir, 0.0, 1.0)

        name = f"pair_{i:03d}.png"
        save_gray_png(out_dir / "ir" / name, ir)
        save_gray_png(out_dir / "vis" / name, vis)
        written += [out_dir / "ir" / name, out_dir / "vis" / name]
    return written
