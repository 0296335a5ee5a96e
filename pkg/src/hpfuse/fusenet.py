"""Text-guided fusion network.

Dataflow per image pair: two convolutional feature extractors (one per
modality), a learned 4-to-1 reduction of each modality's answer embeddings
into a two-row guidance matrix, two cascaded cross-attention blocks where
the guidance provides the queries and the flattened feature maps provide
keys/values, and a 2-scale encoder-decoder with skip connections that
reconstructs the fused image in [0, 1].

The attention output projections are zero-initialized, so a fresh model is
exactly the identity on the visual path: the fused output is independent of
the guidance until training moves those projections.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeMismatch,
    Tensor,
    attention,
    concat,
    conv2d,
    leaky_relu,
    pad_replicate,
    sigmoid,
    upsample_nearest2x,
)
from .backends import derived_rng

MAGIC = b"HPF1"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """File is not a model file of a supported version."""


class ModelCorruptError(ValueError):
    """File has the right header but inconsistent or truncated contents."""


@dataclass(frozen=True)
class FusionArch:
    base_channels: int = 32
    scales: int = 2
    embed_dim: int = 512
    attn_dim: int = 64
    blocks: int = 2

    def __post_init__(self):
        if self.scales != 2:
            raise ValueError("only the 2-scale encoder-decoder is implemented")
        if min(self.base_channels, self.embed_dim, self.attn_dim, self.blocks) < 1:
            raise ValueError("architecture sizes must be positive")


@dataclass
class FusionModel:
    arch: FusionArch
    params: dict[str, Tensor]
    format_version: int = FORMAT_VERSION

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def parameter_shapes(arch: FusionArch) -> dict[str, tuple[int, ...]]:
    """Name -> shape map; also the serialization order (sorted by name)."""
    c, d, dk = arch.base_channels, arch.embed_dim, arch.attn_dim
    c2, c4 = 2 * c, 4 * c
    shapes: dict[str, tuple[int, ...]] = {}
    for m in ("ir", "vis"):
        shapes[f"extract.{m}.c1.w"] = (c, 1, 3, 3)
        shapes[f"extract.{m}.c1.b"] = (1, c, 1, 1)
        shapes[f"extract.{m}.c2.w"] = (c, c, 3, 3)
        shapes[f"extract.{m}.c2.b"] = (1, c, 1, 1)
        shapes[f"reduce.{m}.w"] = (4,)
    for k in range(arch.blocks):
        shapes[f"block{k}.wq"] = (d, dk)
        for m in ("ir", "vis"):
            shapes[f"block{k}.{m}.wk"] = (c, dk)
            shapes[f"block{k}.{m}.wv"] = (c, dk)
            shapes[f"block{k}.{m}.wo"] = (2 * dk, c)
    shapes["fuse.e0.w"] = (c, c2, 3, 3)
    shapes["fuse.e0.b"] = (1, c, 1, 1)
    shapes["fuse.e1.w"] = (c2, c, 3, 3)
    shapes["fuse.e1.b"] = (1, c2, 1, 1)
    shapes["fuse.e2.w"] = (c4, c2, 3, 3)
    shapes["fuse.e2.b"] = (1, c4, 1, 1)
    shapes["fuse.d1a.w"] = (c2, c4, 3, 3)
    shapes["fuse.d1a.b"] = (1, c2, 1, 1)
    shapes["fuse.d1b.w"] = (c2, c4, 3, 3)
    shapes["fuse.d1b.b"] = (1, c2, 1, 1)
    shapes["fuse.d0a.w"] = (c, c2, 3, 3)
    shapes["fuse.d0a.b"] = (1, c, 1, 1)
    shapes["fuse.d0b.w"] = (c, c2, 3, 3)
    shapes["fuse.d0b.b"] = (1, c, 1, 1)
    shapes["fuse.out.w"] = (1, c, 1, 1)
    shapes["fuse.out.b"] = (1, 1, 1, 1)
    return shapes


def init_fusion_model(arch: FusionArch = FusionArch(), seed: int = 0, dtype=np.float64) -> FusionModel:
    """Seeded uniform fan-in init; biases and attention output projections zero."""
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(arch).items():
        if name.endswith(".b") or name.endswith(".wo"):
            values = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            values = derived_rng("fusion-init", seed, name).uniform(-bound, bound, shape).astype(dtype)
        params[name] = Tensor(values, requires_grad=True)
    return FusionModel(arch=arch, params=params)


# -- forward pieces -------------------------------------------------------------


def _conv3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    # replicate padding keeps constant inputs constant through every stage
    return conv2d(pad_replicate(x, 1), w, stride=stride) + b


def extract_features(image: Tensor, model: FusionModel, modality: str) -> Tensor:
    """Two 3x3 convolutions lifting an Nx1xHxW image to NxCxHxW features."""
    if modality not in ("ir", "vis"):
        raise ValueError(f"unknown modality {modality!r}")
    if image.ndim != 4 or image.shape[1] != 1:
        raise ShapeMismatch(f"extract_features expects an Nx1xHxW image, got {image.shape}")
    p = model.params
    x = leaky_relu(_conv3(image, p[f"extract.{modality}.c1.w"], p[f"extract.{modality}.c1.b"]))
    return leaky_relu(_conv3(x, p[f"extract.{modality}.c2.w"], p[f"extract.{modality}.c2.b"]))


def reduce_text_features(text_ir, text_vis, model: FusionModel) -> Tensor:
    """Learned 4->1 combination per modality; rows stack to a 2xd guidance."""
    rows = []
    for modality, text in (("ir", text_ir), ("vis", text_vis)):
        t = text if isinstance(text, Tensor) else Tensor(np.asarray(text, dtype=np.float64))
        if t.shape != (4, model.arch.embed_dim):
            raise ShapeMismatch(
                f"{modality} text embeddings must be 4x{model.arch.embed_dim}, got {t.shape}")
        w = model.params[f"reduce.{modality}.w"]
        rows.append(w.reshape(1, 4) @ t)
    return concat(rows, axis=0)


def _attention_modulated(m: Tensor, guidances: list[Tensor], model: FusionModel,
                         block: int, modality: str) -> Tensor:
    """Add each sample's guidance-queried attention readout (projected to C
    channels) to its feature map as a spatially constant residual."""
    p = model.params
    n, c, h, w = m.shape
    rows = []
    for k in range(n):
        sample = m[k] if n > 1 else m
        flat = sample.reshape(c, h * w).T
        keys = flat @ p[f"block{block}.{modality}.wk"]
        values = flat @ p[f"block{block}.{modality}.wv"]
        read = attention(guidances[k] @ p[f"block{block}.wq"], keys, values)
        rows.append(read.reshape(1, 2 * model.arch.attn_dim) @ p[f"block{block}.{modality}.wo"])
    modulation = rows[0] if n == 1 else concat(rows, axis=0)
    return m + modulation.reshape(n, c, 1, 1)


def cross_attention_block(m_ir: Tensor, m_vis: Tensor, guidance: Tensor,
                          model: FusionModel, block: int) -> tuple[Tensor, Tensor]:
    """Guidance-queried attention over each modality's spatial features.

    The 2-row attention readout is projected to C channels and broadcast-added
    to the feature map, so spatial shape is preserved and a zero output
    projection makes the block an exact identity.
    """
    if m_ir.shape != m_vis.shape:
        raise ShapeMismatch(f"feature maps differ: {m_ir.shape} vs {m_vis.shape}")
    if m_ir.ndim != 4 or m_ir.shape[1] != model.arch.base_channels:
        raise ShapeMismatch(
            f"feature maps must be Nx{model.arch.base_channels}xHxW, got {m_ir.shape}")
    if guidance.shape != (2, model.arch.embed_dim):
        raise ShapeMismatch(f"guidance must be 2x{model.arch.embed_dim}, got {guidance.shape}")
    if not 0 <= block < model.arch.blocks:
        raise ValueError(f"block index {block} out of range")
    guidances = [guidance] * m_ir.shape[0]
    return (_attention_modulated(m_ir, guidances, model, block, "ir"),
            _attention_modulated(m_vis, guidances, model, block, "vis"))


def _pad_edge_bottom_right(x: Tensor, ph: int, pw: int) -> Tensor:
    if ph:
        last = x[:, :, -1:, :]
        x = concat([x] + [last] * ph, axis=2)
    if pw:
        last = x[:, :, :, -1:]
        x = concat([x] + [last] * pw, axis=3)
    return x


def encode_decode_fuse(f_ir: Tensor, f_vis: Tensor, model: FusionModel) -> Tensor:
    """Two-scale encoder/decoder with skips over the concatenated features;
    1x1 head plus sigmoid bounds the fused image to [0, 1].

    Spatial sizes not divisible by 4 are edge-padded on the bottom/right and
    cropped back after decoding.
    """
    if f_ir.shape != f_vis.shape:
        raise ShapeMismatch(f"feature maps differ: {f_ir.shape} vs {f_vis.shape}")
    h, w = f_ir.shape[2], f_ir.shape[3]
    x = concat([f_ir, f_vis], axis=1)
    x = _pad_edge_bottom_right(x, (-h) % 4, (-w) % 4)
    p = model.params
    e0 = leaky_relu(_conv3(x, p["fuse.e0.w"], p["fuse.e0.b"]))
    e1 = leaky_relu(_conv3(e0, p["fuse.e1.w"], p["fuse.e1.b"], stride=2))
    e2 = leaky_relu(_conv3(e1, p["fuse.e2.w"], p["fuse.e2.b"], stride=2))
    d1 = leaky_relu(_conv3(upsample_nearest2x(e2), p["fuse.d1a.w"], p["fuse.d1a.b"]))
    d1 = leaky_relu(_conv3(concat([d1, e1], axis=1), p["fuse.d1b.w"], p["fuse.d1b.b"]))
    d0 = leaky_relu(_conv3(upsample_nearest2x(d1), p["fuse.d0a.w"], p["fuse.d0a.b"]))
    d0 = leaky_relu(_conv3(concat([d0, e0], axis=1), p["fuse.d0b.w"], p["fuse.d0b.b"]))
    out = sigmoid(conv2d(d0, p["fuse.out.w"]) + p["fuse.out.b"])
    if out.shape[2] != h or out.shape[3] != w:
        out = out[:, :, :h, :w]
    return out


def fuse_forward_batch(ir_images: Tensor, vis_images: Tensor, text_ir_list, text_vis_list,
                       model: FusionModel) -> Tensor:
    """Batched pass over Nx1xHxW image stacks with per-sample text guidance.

    Text entries may be None (ablation without text guidance); the guidance
    for that sample is then a constant zero matrix.
    """
    if ir_images.shape != vis_images.shape:
        raise ShapeMismatch(f"image shapes differ: {ir_images.shape} vs {vis_images.shape}")
    n = ir_images.shape[0]
    if len(text_ir_list) != n or len(text_vis_list) != n:
        raise ShapeMismatch(f"need one text entry per sample ({n}), got "
                            f"{len(text_ir_list)}/{len(text_vis_list)}")
    m_ir = extract_features(ir_images, model, "ir")
    m_vis = extract_features(vis_images, model, "vis")
    guidances = []
    for text_ir, text_vis in zip(text_ir_list, text_vis_list):
        if text_ir is None or text_vis is None:
            guidances.append(Tensor(np.zeros((2, model.arch.embed_dim), dtype=m_ir.dtype)))
        else:
            guidances.append(reduce_text_features(text_ir, text_vis, model))
    for k in range(model.arch.blocks):
        m_ir = _attention_modulated(m_ir, guidances, model, k, "ir")
        m_vis = _attention_modulated(m_vis, guidances, model, k, "vis")
    return encode_decode_fuse(m_ir, m_vis, model)


def fuse_forward(ir_image: Tensor, vis_image: Tensor, text_ir, text_vis,
                 model: FusionModel) -> Tensor:
    """Full pass for one pair: extract, reduce text, attention blocks, reconstruct."""
    if ir_image.ndim != 4 or ir_image.shape[0] != 1:
        raise ShapeMismatch(f"fuse_forward expects a 1x1xHxW image, got {ir_image.shape}")
    return fuse_forward_batch(ir_image, vis_image, [text_ir], [text_vis], model)


# -- serialization -----------------------------------------------------------------
#
# Layout (little-endian throughout):
#   magic "HPF1" | u32 format version
#   u32 base_channels | u32 scales | u32 embed_dim | u32 blocks | u32 attn_dim
#   u32 tensor count, then per tensor sorted by name:
#     u16 name length | name utf-8 | u32 ndim | u32 dims... | float32 values


def save_model(path, model: FusionModel) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", model.format_version)
    a = model.arch
    blob += struct.pack("<5I", a.base_channels, a.scales, a.embed_dim, a.blocks, a.attn_dim)
    blob += _pack_tensor_table({name: t.data for name, t in model.params.items()})
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_model(path) -> FusionModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise ModelFormatError("bad magic: not a fusion model file")
    (version,) = struct.unpack("<I", reader.take(4))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    c, scales, d, blocks, dk = struct.unpack("<5I", reader.take(20))
    try:
        arch = FusionArch(base_channels=c, scales=scales, embed_dim=d, attn_dim=dk, blocks=blocks)
    except ValueError as exc:
        raise ModelCorruptError(f"invalid architecture header: {exc}") from exc
    arrays = _unpack_tensor_table(reader)
    if reader.remaining():
        raise ModelCorruptError(f"{reader.remaining()} trailing bytes after tensor table")

    expected = parameter_shapes(arch)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ModelCorruptError(f"tensor names do not match header (missing {missing}, extra {extra})")
    params = {}
    for name, arr in arrays.items():
        if arr.shape != expected[name]:
            raise ModelCorruptError(
                f"tensor '{name}' has shape {arr.shape}, header implies {expected[name]}")
        if not np.all(np.isfinite(arr)):
            raise ModelCorruptError(f"tensor '{name}' contains non-finite values")
        params[name] = Tensor(arr, requires_grad=True)
    return FusionModel(arch=arch, params=params, format_version=version)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ModelCorruptError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def remaining(self) -> int:
        return len(self.blob) - self.pos


def _pack_tensor_table(arrays: dict[str, np.ndarray]) -> bytes:
    blob = bytearray()
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = arrays[name]
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(blob)


def _unpack_tensor_table(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", reader.take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2))
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", reader.take(4))
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        n_values = int(np.prod(shape)) if shape else 1
        raw = reader.take(4 * n_values)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return arrays
