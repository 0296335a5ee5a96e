"""Training objective.

Three terms, combined as total = intensity + alpha * detail + beta * semantic:

* intensity: mean L1 distance between the fused image and the per-pixel
  maximum of the sources;
* detail: two SSIM complements plus a mean L1 match of the fused gradient
  map against the per-pixel maximum of the source gradient maps;
* hierarchical semantic: for each of the four questions, the fused image's
  batch similarity distribution should match both sources' distributions
  (mean L1 over the batch axis, summed over questions, averaged over
  samples).

All L1 norms are mean-reduced so the weights keep their meaning across
image and batch sizes. Only the fused images and their image embeddings
carry gradients; source and text embeddings are constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ShapeMismatch, Tensor, elementwise_max, image_gradient, ssim
from .perception import SemanticEmbeddings, similarity_distribution

__all__ = ["LossBreakdown", "intensity_loss", "detail_loss", "hierarchical_loss", "total_loss"]


@dataclass
class LossBreakdown:
    l_int: Tensor
    l_detail: Tensor
    l_hier: Tensor
    l_total: Tensor
    alpha: float
    beta: float

    def as_floats(self) -> dict[str, float]:
        return {
            "l_int": self.l_int.item(),
            "l_detail": self.l_detail.item(),
            "l_hier": self.l_hier.item(),
            "l_total": self.l_total.item(),
        }


def _check_triple(fused: Tensor, ir: Tensor, vis: Tensor) -> None:
    if fused.shape != ir.shape or fused.shape != vis.shape:
        raise ShapeMismatch(
            f"fused/ir/vis shapes differ: {fused.shape}, {ir.shape}, {vis.shape}")


def intensity_loss(fused: Tensor, ir: Tensor, vis: Tensor) -> Tensor:
    """Mean absolute deviation of the fused image from max(ir, vis)."""
    _check_triple(fused, ir, vis)
    return (fused - elementwise_max(ir, vis)).abs().mean()


def detail_loss(fused: Tensor, ir: Tensor, vis: Tensor,
                ssim_window: int = 11, ssim_sigma: float = 1.5) -> Tensor:
    """SSIM complements against both sources plus gradient-map matching."""
    _check_triple(fused, ir, vis)
    structural = (1.0 - ssim(fused, ir, window_size=ssim_window, sigma=ssim_sigma)) \
        + (1.0 - ssim(fused, vis, window_size=ssim_window, sigma=ssim_sigma))
    grad_target = elementwise_max(image_gradient(_as_nchw(ir)), image_gradient(_as_nchw(vis)))
    return structural + (image_gradient(_as_nchw(fused)) - grad_target).abs().mean()


def _as_nchw(t: Tensor) -> Tensor:
    return t.reshape(1, 1, *t.shape) if t.ndim == 2 else t


def hierarchical_loss(fused: Sequence[SemanticEmbeddings],
                      ir: Sequence[SemanticEmbeddings],
                      vis: Sequence[SemanticEmbeddings]) -> Tensor:
    """Distribution-matching loss over a batch of >= 2 samples.

    Per question j and sample b: the batch softmax of cosines between the
    image embedding of modality m and every sample's j-th answer embedding
    of that same modality. The loss is mean_i |S_fused - S_ir| +
    mean_i |S_fused - S_vis|, summed over the four questions, averaged over
    samples. Gradients flow only through the fused image embeddings.
    """
    b = len(fused)
    if not (len(ir) == len(vis) == b):
        raise ShapeMismatch(f"batch sizes differ: fused {b}, ir {len(ir)}, vis {len(vis)}")
    if b < 2:
        raise ValueError(f"hierarchical loss needs a batch of >= 2, got {b}")
    dims = {e.dim for e in (*fused, *ir, *vis)}
    if len(dims) != 1:
        raise ShapeMismatch(f"embedding dimensions differ within the batch: {sorted(dims)}")

    total = None
    for j in range(4):
        texts_f = np.stack([e.text_embeddings[j] for e in fused])
        texts_ir = np.stack([e.text_embeddings[j] for e in ir])
        texts_vis = np.stack([e.text_embeddings[j] for e in vis])
        for k in range(b):
            s_f = similarity_distribution(fused[k].image_embedding, texts_f)
            s_ir = similarity_distribution(ir[k].image_embedding.detach(), texts_ir)
            s_vis = similarity_distribution(vis[k].image_embedding.detach(), texts_vis)
            term = (s_f - s_ir.detach()).abs().mean() + (s_f - s_vis.detach()).abs().mean()
            total = term if total is None else total + term
    return total / float(b)


def total_loss(fused_images: Sequence[Tensor], ir_images: Sequence[Tensor],
               vis_images: Sequence[Tensor],
               fused_embeddings: Sequence[SemanticEmbeddings] | None = None,
               ir_embeddings: Sequence[SemanticEmbeddings] | None = None,
               vis_embeddings: Sequence[SemanticEmbeddings] | None = None,
               alpha: float = 4.0, beta: float = 1.0,
               ssim_window: int = 11) -> LossBreakdown:
    """Weighted objective over a batch; per-sample image terms are averaged.

    The semantic term needs all three embedding sequences; with ``beta == 0``
    (or embeddings omitted) it is pinned to zero and no semantic inputs are
    touched.
    """
    fused_images = _as_list(fused_images)
    ir_images = _as_list(ir_images)
    vis_images = _as_list(vis_images)
    if not (len(fused_images) == len(ir_images) == len(vis_images)) or not fused_images:
        raise ShapeMismatch("fused/ir/vis image batches must be equal-length and non-empty")
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be >= 0")

    n = float(len(fused_images))
    l_int = _batch_mean([intensity_loss(f, a, b)
                         for f, a, b in zip(fused_images, ir_images, vis_images)], n)
    l_detail = _batch_mean([detail_loss(f, a, b, ssim_window=ssim_window)
                            for f, a, b in zip(fused_images, ir_images, vis_images)], n)
    if beta != 0.0 and fused_embeddings is not None:
        if ir_embeddings is None or vis_embeddings is None:
            raise ValueError("semantic term needs fused, ir, and vis embeddings")
        l_hier = hierarchical_loss(fused_embeddings, ir_embeddings, vis_embeddings)
    else:
        l_hier = Tensor(np.asarray(0.0, dtype=l_int.dtype))
    l_total = l_int + alpha * l_detail + beta * l_hier
    return LossBreakdown(l_int=l_int, l_detail=l_detail, l_hier=l_hier, l_total=l_total,
                         alpha=alpha, beta=beta)


def _as_list(images) -> list[Tensor]:
    if isinstance(images, Tensor):
        return [images]
    return list(images)


def _batch_mean(terms: list[Tensor], n: float) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc / n
