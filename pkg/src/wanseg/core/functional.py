"""Neural-network primitives on ``Tensor`` (NCHW layout) with backward rules."""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from wanseg.core.tensor import Tensor, as_tensor, make_result
from wanseg.errors import ContractError

EPS = 1e-7


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation. ``same`` padding follows the TF convention (extra pad bottom/right)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ContractError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    if b is not None and b.shape != (cout,):
        raise ContractError(f"conv2d bias shape {b.shape} != ({cout},)")
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(wd, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ContractError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, wd + pl + pr
    if kh > hp or kw > wp:
        raise ContractError("conv2d kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # channel-major (C, N, H, W) internally: window copies move whole image rows
    xp = x.data.transpose(1, 0, 2, 3)
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=np.result_type(x.dtype, w.dtype))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    # NCHW view over (C, N, H, W) memory, so the next conv's transpose is free
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(cout, kh, kw, c).transpose(0, 3, 1, 2)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(kh, kw, c, n, ho, wo)
            dxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
            gx = dxp[:, :, pt:pt + h, pl:pl + wd].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Window maximum; gradient goes to the first (row-major) maximum of each window."""
    n, c, h, wd = x.shape
    if stride < 1 or window < 1:
        raise ContractError("max_pool2d window and stride must be >= 1")
    if h % stride or wd % stride or window > h or window > wd:
        raise ContractError(f"max_pool2d extents {h}x{wd} not divisible by stride {stride}")
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        r = arg // window + np.arange(ho)[:, None] * stride
        q = arg % window + np.arange(wo)[None, :] * stride
        base = np.arange(n * c).reshape(n, c, 1, 1) * (h * wd)
        idx = (base + r * wd + q).ravel()
        gx = np.bincount(idx, weights=g.ravel(), minlength=n * c * h * wd)
        return (gx.reshape(x.shape).astype(g.dtype, copy=False),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, wd = x.shape
    if k < 1 or h % k or wd % k:
        raise ContractError(f"avg_pool2d extents {h}x{wd} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, wd // k, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, wd = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape).copy(),)

    return make_result(out, (x,), backward)


@lru_cache(maxsize=64)
def _bilinear_matrix(size_in: int, size_out: int, dtype_str: str) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) * in/out - 0.5, clamped at the borders
    scale = size_in / size_out
    m = np.zeros((size_out, size_in), dtype=dtype_str)
    for o in range(size_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size_in - 1)
        i1 = min(i0 + 1, size_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m.setflags(write=False)
    return m


def _scaled(size: int, factor: Fraction) -> int:
    out = size * factor
    if out.denominator != 1 or out <= 0:
        raise ContractError(f"resize of extent {size} by {factor} is not a positive integer")
    return int(out)


def resize_bilinear(x: Tensor, factor) -> Tensor:
    factor = Fraction(factor).limit_denominator(1 << 16)
    n, c, h, wd = x.shape
    ho, wo = _scaled(h, factor), _scaled(wd, factor)
    if (ho, wo) == (h, wd):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    ah = _bilinear_matrix(h, ho, x.dtype.str)
    aw = _bilinear_matrix(wd, wo, x.dtype.str)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_result(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ContractError(f"upsample factor must be an integer >= 1, got {factor}")
    f = int(factor)
    if f == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, wd = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, f, wd, f).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ContractError("concat_channels expects 4-D tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ContractError(f"concat_channels mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_result(out, (a, b), backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractError(f"dense shape mismatch: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ContractError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ w.data.T, x.data.T @ g, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data >= 0, 1.0, alpha).astype(x.dtype)
    return make_result(x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor, eps: float = EPS) -> Tensor:
    """Logistic function clamped to ``[eps, 1 - eps]``; clamped entries pass no gradient."""
    z = x.data
    s = np.empty_like(z)
    pos = z >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    s[~pos] = ez / (1.0 + ez)
    inside = (s > eps) & (s < 1.0 - eps)
    s = np.clip(s, eps, 1.0 - eps)
    local = s * (1.0 - s) * inside

    return make_result(s, (x,), lambda g: (g * local,))


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def bce(pred: Tensor, label, eps: float = EPS) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to ``[eps, 1 - eps]`` first."""
    y = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=pred.dtype)
    y = np.broadcast_to(y, pred.shape)
    if y.size and (y.min() < 0 or y.max() > 1):
        raise ContractError("bce labels must lie in [0, 1]")
    p = np.clip(pred.data, eps, 1.0 - eps)
    count = pred.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / count
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)

    def backward(g):
        return (g * inside * (p - y) / (p * (1.0 - p)) / count,)

    return make_result(np.asarray(loss, dtype=pred.dtype), (as_tensor(pred),), backward)
