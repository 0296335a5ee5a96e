"""Reverse-mode autodiff over dense numpy arrays.

Tape-based: every operation returns a new Tensor holding references to its
parents and vector-Jacobian closures; ``Tensor.backward`` walks the graph in
reverse topological order. The op set is deliberately small -- exactly what
the fusion network, its losses, and the gradient-check oracle need. float64
is the default dtype (the finite-difference tolerances rely on it); float32
runs the same code paths for training.

A computation graph and its backward pass belong to one thread; distinct
graphs may run on distinct threads concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "NonFiniteValues",
    "attention",
    "concat",
    "conv2d",
    "cosine_similarity",
    "elementwise_max",
    "grad_check",
    "image_gradient",
    "leaky_relu",
    "pad_replicate",
    "sigmoid",
    "softmax",
    "ssim",
    "upsample_nearest2x",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteValues(ValueError):
    """NaN or Inf encountered where finite values are required."""


class Tensor:
    """Dense real array with an optional reverse-mode gradient.

    ``grad`` is populated (same shape as ``data``) for every reachable
    tensor with ``requires_grad`` after a backward pass, and accumulates
    across backward calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValues("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph management ---------------------------------------------------

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeMismatch(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")

        order = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype)
            else:
                node.grad += g
            for parent, vjp in node._parents:
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + contrib
                else:
                    pending[key] = contrib

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _coerce(other, self.data.dtype)
        out = self.data + other.data
        return _from_op(out, (
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ))

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = _coerce(other, self.data.dtype)
        a, b = self.data, other.data
        return _from_op(a * b, (
            (self, lambda g: _unbroadcast(g * b, a.shape)),
            (other, lambda g: _unbroadcast(g * a, b.shape)),
        ))

    __rmul__ = __mul__

    def __sub__(self, other) -> "Tensor":
        other = _coerce(other, self.data.dtype)
        return _from_op(self.data - other.data, (
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(-g, other.data.shape)),
        ))

    def __rsub__(self, other) -> "Tensor":
        return _coerce(other, self.data.dtype).__sub__(self)

    def __truediv__(self, other) -> "Tensor":
        other = _coerce(other, self.data.dtype)
        a, b = self.data, other.data
        out = a / b
        return _from_op(out, (
            (self, lambda g: _unbroadcast(g / b, a.shape)),
            (other, lambda g: _unbroadcast(-g * out / b, b.shape)),
        ))

    def __rtruediv__(self, other) -> "Tensor":
        return _coerce(other, self.data.dtype).__truediv__(self)

    def __neg__(self) -> "Tensor":
        return _from_op(-self.data, ((self, lambda g: -g),))

    def __matmul__(self, other) -> "Tensor":
        other = _coerce(other, self.data.dtype)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul needs 2-D operands with matching inner dim, got {a.shape} @ {b.shape}")
        return _from_op(a @ b, (
            (self, lambda g: g @ b.T),
            (other, lambda g: a.T @ g),
        ))

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeMismatch("T is defined for 2-D tensors only")
        return _from_op(np.ascontiguousarray(self.data.T), ((self, lambda g: g.T),))

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return _from_op(self.data.reshape(shape), ((self, lambda g: g.reshape(src)),))

    def __getitem__(self, idx) -> "Tensor":
        out = self.data[idx]
        if not isinstance(out, np.ndarray):
            out = np.asarray(out)
        src = self.data.shape

        def vjp(g):
            buf = np.zeros(src, dtype=g.dtype)
            buf[idx] += g
            return buf

        return _from_op(out, ((self, vjp),))

    # -- reductions and pointwise ----------------------------------------------

    def sum(self) -> "Tensor":
        src = self.data.shape
        return _from_op(np.asarray(self.data.sum()), ((self, lambda g: np.full(src, g, dtype=g.dtype)),))

    def mean(self) -> "Tensor":
        src = self.data.shape
        n = self.data.size
        return _from_op(np.asarray(self.data.mean()), ((self, lambda g: np.full(src, g / n, dtype=g.dtype)),))

    def abs(self) -> "Tensor":
        # subgradient 0 at the kink, matching the max tie rule
        sign = np.sign(self.data)
        return _from_op(np.abs(self.data), ((self, lambda g: g * sign),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _from_op(out, ((self, lambda g: g * out),))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return _from_op(out, ((self, lambda g: g / (2.0 * out)),))


def _from_op(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p, _ in parents)
    out._parents = parents if out.requires_grad else ()
    return out


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- activations ---------------------------------------------------------------


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    d = x.data
    scale = np.where(d > 0, 1.0, negative_slope).astype(d.dtype)
    return _from_op(d * scale, ((x, lambda g: g * scale),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _from_op(out, ((x, lambda g: g * out * (1.0 - out)),))


# -- structural ops --------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _from_op(out, tuple((t, make_vjp(i)) for i, t in enumerate(tensors)))


def pad_replicate(x: Tensor, pad: int) -> Tensor:
    """Replicate-pad the two trailing (spatial) axes of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeMismatch(f"pad_replicate expects NCHW, got {x.shape}")
    if pad < 1:
        raise ValueError("pad must be >= 1")
    d = x.data
    h, w = d.shape[2], d.shape[3]
    out = np.pad(d, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")

    def vjp(g):
        # fold padded rows/cols back onto the border pixels they replicate
        if h == 1:
            gr = g.sum(axis=2, keepdims=True)
        else:
            gr = np.empty((g.shape[0], g.shape[1], h, g.shape[3]), dtype=g.dtype)
            gr[:, :, 0] = g[:, :, : pad + 1].sum(axis=2)
            gr[:, :, -1] = g[:, :, -(pad + 1):].sum(axis=2)
            if h > 2:
                gr[:, :, 1:-1] = g[:, :, pad + 1 : pad + h - 1]
        if w == 1:
            return gr.sum(axis=3, keepdims=True)
        gc = np.empty((g.shape[0], g.shape[1], h, w), dtype=g.dtype)
        gc[..., 0] = gr[..., : pad + 1].sum(axis=3)
        gc[..., -1] = gr[..., -(pad + 1):].sum(axis=3)
        if w > 2:
            gc[..., 1:-1] = gr[..., pad + 1 : pad + w - 1]
        return gc

    return _from_op(out, ((x, vjp),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample_nearest2x expects NCHW, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        n, c, h2, w2 = g.shape
        return g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))

    return _from_op(out, ((x, vjp),))


# -- convolution ------------------------------------------------------------------


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _conv_gemm(xp: np.ndarray, wd: np.ndarray, stride: int, keep_cols: bool):
    """Channels-last im2col + one GEMM; returns NCHW output.

    The channel-contiguous patch copy keeps the gather in large chunks and
    the single fat GEMM runs at a BLAS-friendly inner dimension.
    """
    o, ci, kh, kw = wd.shape
    n, _, hp, wp = xp.shape
    xh = _to_nhwc(xp)
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * ci)
    wmat = np.ascontiguousarray(wd.transpose(2, 3, 1, 0).reshape(kh * kw * ci, o))
    out = _to_nchw((cols @ wmat).reshape(n, ho, wo, o))
    return out, (cols if keep_cols else None), wmat, ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate an NCHW input with OIHW kernels (zero padding)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels but kernel expects {w.shape[1]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")

    xd, wd = x.data, w.data
    o, ci, kh, kw = wd.shape
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    n, _, hp, wp = xp.shape
    if hp < kh or wp < kw:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    # patch matrix cached only when the kernel gradient will be needed
    out, cached_cols, wmat, ho, wo = _conv_gemm(xp, wd, stride, keep_cols=w.requires_grad)

    def vjp_x(g):
        if stride == 1:
            # dX = correlation of the (k-1)-padded upstream gradient with the
            # channel-swapped, spatially flipped kernel
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gxp = _conv_gemm(gp, flipped, 1, keep_cols=False)[0]
        else:
            gh = _to_nhwc(g).reshape(n * ho * wo, o)
            dcols = (gh @ wmat.T).reshape(n, ho, wo, kh, kw, ci)
            dxh = np.zeros((n, hp, wp, ci), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    dxh[:, u : u + stride * ho : stride, v : v + stride * wo : stride, :] += \
                        dcols[:, :, :, u, v, :]
            gxp = _to_nchw(dxh)
        return gxp[:, :, p : hp - p, p : wp - p] if p else gxp

    def vjp_w(g):
        gh = _to_nhwc(g).reshape(n * ho * wo, o)
        return (cached_cols.T @ gh).reshape(kh, kw, ci, o).transpose(3, 2, 0, 1)

    return _from_op(out, ((x, vjp_x), (w, vjp_w)))


# -- fusion-specific primitives ------------------------------------------------------


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    """Per-element maximum; ties route the full gradient to ``a``."""
    b = _coerce(b, a.data.dtype)
    if a.shape != b.shape:
        raise ShapeMismatch(f"elementwise_max needs identical shapes, got {a.shape} and {b.shape}")
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)
    return _from_op(out, (
        (a, lambda g: g * mask),
        (b, lambda g: g * ~mask),
    ))


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()


def image_gradient(img: Tensor) -> Tensor:
    """Per-pixel Sobel gradient magnitude |gx| + |gy|, per channel.

    Replicate padding keeps the output at the input's spatial size.
    """
    if img.ndim != 4:
        raise ShapeMismatch(f"image_gradient expects NCHW, got {img.shape}")
    n, c, h, w = img.shape
    if h < 3 or w < 3:
        raise ShapeMismatch(f"image must be at least 3x3, got {h}x{w}")
    flat = img.reshape(n * c, 1, h, w) if c > 1 else img
    padded = pad_replicate(flat, 1)
    kx = Tensor(_SOBEL_X.reshape(1, 1, 3, 3), dtype=img.dtype)
    ky = Tensor(_SOBEL_Y.reshape(1, 1, 3, 3), dtype=img.dtype)
    mag = conv2d(padded, kx).abs() + conv2d(padded, ky).abs()
    return mag.reshape(n, c, h, w) if c > 1 else mag


def _gaussian_window(size: int, sigma: float, dtype) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    k /= k.sum()
    return k.astype(dtype)


def ssim(a: Tensor, b: Tensor, window_size: int = 11, sigma: float = 1.5,
         c1: float = 0.01**2, c2: float = 0.03**2) -> Tensor:
    """Mean structural similarity over valid Gaussian windows.

    Inputs are single-channel images in [0, 1]; constants assume unit
    dynamic range. Windows are evaluated only where they fit entirely
    inside the image.
    """
    b = _coerce(b, a.data.dtype)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim needs identical shapes, got {a.shape} and {b.shape}")
    a4 = _as_single_channel_nchw(a, "ssim")
    b4 = _as_single_channel_nchw(b, "ssim")
    h, w = a4.shape[2], a4.shape[3]
    if h < window_size or w < window_size:
        raise ShapeMismatch(f"image {h}x{w} smaller than the {window_size}x{window_size} window")
    for name, t in (("first", a4), ("second", b4)):
        lo, hi = float(t.data.min()), float(t.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"ssim {name} input must lie in [0, 1], got range [{lo}, {hi}]")

    win = Tensor(_gaussian_window(window_size, sigma, a4.dtype).reshape(1, 1, window_size, window_size))
    mu1 = conv2d(a4, win)
    mu2 = conv2d(b4, win)
    s11 = conv2d(a4 * a4, win) - mu1 * mu1
    s22 = conv2d(b4 * b4, win) - mu2 * mu2
    s12 = conv2d(a4 * b4, win) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return (num / den).mean()


def _as_single_channel_nchw(t: Tensor, op: str) -> Tensor:
    if t.ndim == 2:
        return t.reshape(1, 1, *t.shape)
    if t.ndim == 4 and t.shape[1] == 1:
        return t
    raise ShapeMismatch(f"{op} expects a single-channel image (HxW or Nx1xHxW), got {t.shape}")


def softmax(v: Tensor) -> Tensor:
    """Numerically stable softmax of a 1-D tensor."""
    if v.ndim != 1:
        raise ShapeMismatch(f"softmax expects a 1-D tensor, got {v.shape}")
    if v.size == 0:
        raise ValueError("softmax of an empty tensor")
    z = v.data - v.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def vjp(g):
        return s * (g - (g * s).sum())

    return _from_op(s, ((v, vjp),))


def _softmax_rows(m: Tensor) -> Tensor:
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return _from_op(s, ((m, vjp),))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of the angle between two 1-D tensors (scalar output)."""
    b = _coerce(b, a.data.dtype)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"cosine_similarity needs equal-length 1-D tensors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na = float(np.linalg.norm(ad))
    nb = float(np.linalg.norm(bd))
    if na <= eps or nb <= eps:
        raise ValueError("cosine_similarity is undefined for (near-)zero-norm vectors")
    c = float(ad @ bd) / (na * nb)
    out = np.asarray(c, dtype=ad.dtype)

    def vjp_a(g):
        return float(g) * (bd / (na * nb) - c * ad / (na * na))

    def vjp_b(g):
        return float(g) * (ad / (na * nb) - c * bd / (nb * nb))

    return _from_op(out, ((a, vjp_a), (b, vjp_b)))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V, row-wise."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatch("attention expects 2-D Q, K, V")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"Q feature dim {q.shape[1]} != K feature dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"K has {k.shape[0]} rows but V has {v.shape[0]}")
    logits = (q @ k.T) * (1.0 / math.sqrt(q.shape[1]))
    return _softmax_rows(logits) @ v


# -- gradient checking ------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6,
               eps_guard: float = 1e-5, max_elems: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x``
    and central finite differences with step ``h``.

    ``f`` must map one Tensor to a scalar Tensor. Runs in float64 regardless
    of the dtype of ``x``. With ``max_elems`` set, a random coordinate subset
    is probed (seeded by ``rng``). The relative-error denominator is guarded
    by ``eps_guard * (1 + |f(x)|)``: difference-quotient noise grows with the
    magnitude of ``f``, so near-zero gradient pairs must not blow up the
    ratio once they sink below that noise floor.
    """
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check expects a scalar-valued function")
    out.backward()
    analytic = probe.grad.reshape(-1)
    guard = eps_guard * (1.0 + abs(float(out.data)))

    if max_elems is not None and base.size > max_elems:
        rng = np.random.default_rng(0) if rng is None else rng
        indices = rng.choice(base.size, size=max_elems, replace=False)
    else:
        indices = np.arange(base.size)

    worst = 0.0
    for i in indices:
        hi = base.copy()
        hi.flat[i] += h
        lo = base.copy()
        lo.flat[i] -= h
        numeric = (float(f(Tensor(hi)).data) - float(f(Tensor(lo)).data)) / (2.0 * h)
        a = float(analytic[i])
        err = abs(a - numeric) / max(guard, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
