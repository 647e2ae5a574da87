"""Differentiable operations.

Exactly the primitives the segmentation stack needs: matrix products,
2D convolution, depth-only 3D convolution, 2x2/stride-2 transposed
convolution, layer norm, and a small pointwise/reduction set.

Numeric policy: float32 storage everywhere; reductions (matmul,
convolutions, norm statistics, sums, softmax normalizers) accumulate in
float64 before casting back. Convolution padding is always zeros.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ..errors import ConfigError, ShapeError
from .autodiff import Tensor, make_op, tracked

__all__ = [
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "gelu",
    "exp",
    "log",
    "softmax_lastdim",
    "matmul",
    "conv2d",
    "conv3d_depth",
    "transposed_conv2d",
    "layer_norm",
    "reduce_sum",
    "reshape",
    "transpose",
]

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to a broadcast operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return np.ascontiguousarray(g).astype(np.float32)


def _broadcast_binary(op: str, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# --- pointwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_binary("add", a, b)
    out = a.data + b.data

    def rule(g: np.ndarray):
        ga = _unbroadcast(g, a.shape) if tracked(a) else None
        gb = _unbroadcast(g, b.shape) if tracked(b) else None
        return ga, gb

    return make_op("add", out, (a, b), rule)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_binary("mul", a, b)
    out = a.data * b.data

    def rule(g: np.ndarray):
        ga = _unbroadcast(g * b.data, a.shape) if tracked(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if tracked(b) else None
        return ga, gb

    return make_op("mul", out, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_binary("div", a, b)
    out = a.data / b.data

    def rule(g: np.ndarray):
        ga = _unbroadcast(g / b.data, a.shape) if tracked(a) else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if tracked(b)
            else None
        )
        return ga, gb

    return make_op("div", out, (a, b), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    k = np.float32(factor)
    out = x.data * k

    def rule(g: np.ndarray):
        return ((g * k) if tracked(x) else None,)

    return make_op("scale", out, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    xd = _f64(x.data)
    phi = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))
    out = (xd * phi).astype(np.float32)

    def rule(g: np.ndarray):
        if not tracked(x):
            return (None,)
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return ((_f64(g) * (phi + xd * pdf)).astype(np.float32),)

    return make_op("gelu", out, (x,), rule)


def exp(x: Tensor) -> Tensor:
    out = np.exp(_f64(x.data)).astype(np.float32)

    def rule(g: np.ndarray):
        return ((g * out) if tracked(x) else None,)

    return make_op("exp", out, (x,), rule)


def log(x: Tensor) -> Tensor:
    out = np.log(_f64(x.data)).astype(np.float32)

    def rule(g: np.ndarray):
        return ((g / x.data) if tracked(x) else None,)

    return make_op("log", out, (x,), rule)


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = _f64(x.data)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=-1, keepdims=True)
    out = p64.astype(np.float32)

    def rule(g: np.ndarray):
        if not tracked(x):
            return (None,)
        g64 = _f64(g)
        dot = (g64 * p64).sum(axis=-1, keepdims=True)
        return ((p64 * (g64 - dot)).astype(np.float32),)

    return make_op("softmax_lastdim", out, (x,), rule)


# --- contractions --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for [..., m, k] x [..., k, n].

    Leading dims must match exactly, or b may be a plain 2D matrix shared
    across a's leading dims (the projection-weight case).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} vs {b.shape}")
    out = (_f64(ad) @ _f64(bd)).astype(np.float32)

    def rule(g: np.ndarray):
        g64 = _f64(g)
        ga = gb = None
        if tracked(a):
            ga = (g64 @ _f64(bd).swapaxes(-1, -2)).astype(np.float32)
        if tracked(b):
            if bd.ndim == 2:
                a2 = _f64(ad).reshape(-1, ad.shape[-1])
                g2 = g64.reshape(-1, g.shape[-1])
                gb = (a2.T @ g2).astype(np.float32)
            else:
                gb = (_f64(ad).swapaxes(-1, -2) @ g64).astype(np.float32)
        return ga, gb

    return make_op("matmul", out, (a, b), rule)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    bias: Tensor | None = None,
) -> Tensor:
    """Cross-correlation of [B,C,H,W] with [O,C,kh,kw], zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [O,C,kh,kw], got {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d channels differ: input {C}, kernel {Ck}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d stride/padding invalid: {stride}, {padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias must be [{O}], got {bias.shape}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out64 = np.einsum("bchwij,ocij->bohw", _f64(win), _f64(kernel.data), optimize=True)
    if bias is not None:
        out64 = out64 + _f64(bias.data)[None, :, None, None]
    out = out64.astype(np.float32)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g: np.ndarray):
        g64 = _f64(g)
        gx = gk = gb = None
        if tracked(kernel):
            gk = np.einsum("bchwij,bohw->ocij", _f64(win), g64, optimize=True).astype(
                np.float32
            )
        if tracked(x):
            gxp = np.zeros((B, C, Hp, Wp), dtype=np.float64)
            k64 = _f64(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    patch = np.einsum("bohw,oc->bchw", g64, k64[:, :, i, j])
                    gxp[
                        :,
                        :,
                        i : i + stride * Ho : stride,
                        j : j + stride * Wo : stride,
                    ] += patch
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            gx = gxp.astype(np.float32)
        grads = [gx, gk]
        if bias is not None:
            if tracked(bias):
                gb = g64.sum(axis=(0, 2, 3)).astype(np.float32)
            grads.append(gb)
        return tuple(grads)

    return make_op("conv2d", out, parents, rule)


def conv3d_depth(
    x: Tensor,
    kernel: Tensor,
    padding_d: int = 1,
    bias: Tensor | None = None,
) -> Tensor:
    """Depth-only 3D convolution: [B,C,D,H,W] with kernel [O,C,kd,1,1].

    Mixes information along the slice axis only; spatial sites never
    interact. Depth padding is zeros.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d_depth input must be [B,C,D,H,W], got {x.shape}")
    if kernel.ndim != 5 or kernel.shape[3] != 1 or kernel.shape[4] != 1:
        raise ShapeError(f"conv3d_depth kernel must be [O,C,kd,1,1], got {kernel.shape}")
    B, C, D, H, W = x.shape
    O, Ck, kd = kernel.shape[:3]
    if Ck != C:
        raise ShapeError(f"conv3d_depth channels differ: input {C}, kernel {Ck}")
    if kd % 2 == 0:
        raise ConfigError(f"conv3d_depth kernel depth must be odd, got {kd}")
    if padding_d < 0:
        raise ConfigError(f"conv3d_depth padding must be >= 0, got {padding_d}")
    Dp = D + 2 * padding_d
    if kd > Dp:
        raise ShapeError(f"conv3d_depth kernel depth {kd} exceeds padded depth {Dp}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv3d_depth bias must be [{O}], got {bias.shape}")
    Do = Dp - kd + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding_d, padding_d), (0, 0), (0, 0)))
    win = sliding_window_view(xp, kd, axis=2)  # [B,C,Do,H,W,kd]
    k3 = kernel.data[:, :, :, 0, 0]
    out64 = np.einsum("bcdhwt,oct->bodhw", _f64(win), _f64(k3), optimize=True)
    if bias is not None:
        out64 = out64 + _f64(bias.data)[None, :, None, None, None]
    out = out64.astype(np.float32)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g: np.ndarray):
        g64 = _f64(g)
        gx = gk = gb = None
        if tracked(kernel):
            gk3 = np.einsum("bcdhwt,bodhw->oct", _f64(win), g64, optimize=True)
            gk = gk3[:, :, :, None, None].astype(np.float32)
        if tracked(x):
            gxp = np.zeros((B, C, Dp, H, W), dtype=np.float64)
            k64 = _f64(k3)
            for t in range(kd):
                gxp[:, :, t : t + Do] += np.einsum(
                    "bodhw,oc->bcdhw", g64, k64[:, :, t]
                )
            if padding_d:
                gxp = gxp[:, :, padding_d:-padding_d]
            gx = gxp.astype(np.float32)
        grads = [gx, gk]
        if bias is not None:
            if tracked(bias):
                gb = g64.sum(axis=(0, 2, 3, 4)).astype(np.float32)
            grads.append(gb)
        return tuple(grads)

    return make_op("conv3d_depth", out, parents, rule)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Exact 2x upsampling: kernel [C,O,2,2] at stride 2, no overlap.

    out[b,o,2h+i,2w+j] = sum_c x[b,c,h,w] * kernel[c,o,i,j] (+ bias[o]).
    """
    if x.ndim != 4:
        raise ShapeError(f"transposed_conv2d input must be [B,C,h,w], got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise ShapeError(
            f"transposed_conv2d kernel must be [C,O,2,2], got {kernel.shape}"
        )
    B, C, h, w = x.shape
    Ck, O = kernel.shape[:2]
    if Ck != C:
        raise ShapeError(f"transposed_conv2d channels differ: input {C}, kernel {Ck}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"transposed_conv2d bias must be [{O}], got {bias.shape}")

    tmp = np.einsum(
        "bchw,coij->bohiwj", _f64(x.data), _f64(kernel.data), optimize=True
    )
    out64 = tmp.reshape(B, O, 2 * h, 2 * w)
    if bias is not None:
        out64 = out64 + _f64(bias.data)[None, :, None, None]
    out = out64.astype(np.float32)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g: np.ndarray):
        g6 = _f64(g).reshape(B, O, h, 2, w, 2)
        gx = gk = gb = None
        if tracked(x):
            gx = np.einsum(
                "bohiwj,coij->bchw", g6, _f64(kernel.data), optimize=True
            ).astype(np.float32)
        if tracked(kernel):
            gk = np.einsum(
                "bchw,bohiwj->coij", _f64(x.data), g6, optimize=True
            ).astype(np.float32)
        grads = [gx, gk]
        if bias is not None:
            if tracked(bias):
                gb = _f64(g).sum(axis=(0, 2, 3)).astype(np.float32)
            grads.append(gb)
        return tuple(grads)

    return make_op("transposed_conv2d", out, parents, rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last dim; statistics accumulate in float64."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta must be [{d}], got {gamma.shape}, {beta.shape}"
        )
    if not eps > 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    xd = _f64(x.data)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (_f64(gamma.data) * xhat + _f64(beta.data)).astype(np.float32)

    def rule(g: np.ndarray):
        g64 = _f64(g)
        ggamma = gbeta = gx = None
        lead = tuple(range(g64.ndim - 1))
        if tracked(gamma):
            ggamma = (g64 * xhat).sum(axis=lead).astype(np.float32)
        if tracked(beta):
            gbeta = g64.sum(axis=lead).astype(np.float32)
        if tracked(x):
            dxhat = g64 * _f64(gamma.data)
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = (inv * (dxhat - m1 - xhat * m2)).astype(np.float32)
        return gx, ggamma, gbeta

    return make_op("layer_norm", out, (x, gamma, beta), rule)


# --- reductions and views -------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(sorted(a % ndim for a in axes))
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return norm


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum over axes (float64 accumulation). axes=None sums everything."""
    ax = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def rule(g: np.ndarray):
        if not tracked(x):
            return (None,)
        gk = g
        if not keepdims:
            shape = list(x.shape)
            for a in ax:
                shape[a] = 1
            gk = g.reshape(shape)
        return (np.ascontiguousarray(np.broadcast_to(gk, x.shape)),)

    return make_op("reduce_sum", out, (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(n) for n in shape)
    n_new = 1
    for n in new_shape:
        n_new *= n
    if n_new != x.size or any(n < 1 for n in new_shape):
        raise ShapeError(f"cannot reshape {x.shape} to {new_shape}")
    out = x.data.reshape(new_shape)

    def rule(g: np.ndarray):
        return (g.reshape(x.shape) if tracked(x) else None,)

    return make_op("reshape", out, (x,), rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    perm = tuple(int(a) for a in axes)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {perm} for ndim {x.ndim}")
    out = np.ascontiguousarray(np.transpose(x.data, perm))
    inv = tuple(int(i) for i in np.argsort(perm))

    def rule(g: np.ndarray):
        if not tracked(x):
            return (None,)
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return make_op("transpose", out, (x,), rule)
