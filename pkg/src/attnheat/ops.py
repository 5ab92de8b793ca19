"""Differentiable operations on :class:`~attnheat.tensor.Tensor`.

Every op computes its forward result with numpy, then registers a closure
mapping the output gradient to one gradient per input. Convolution is
cross-correlation (no kernel flip) with zero padding.
"""

from __future__ import annotations

import contextlib
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import Tensor, record

# When not None, relu and max-pool append their active pattern here so a
# finite-difference checker can detect that a perturbation crossed a kink.
_pattern_log: Optional[list] = None


@contextlib.contextmanager
def log_patterns():
    global _pattern_log
    prev, _pattern_log = _pattern_log, []
    try:
        yield _pattern_log
    finally:
        _pattern_log = prev


def _log(arr: np.ndarray) -> None:
    if _pattern_log is not None:
        _pattern_log.append(arr)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


# convolution ---------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got x{x.shape} w{w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: x{x.shape} has {cin} channels, "
                         f"w{w.shape} expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match w{w.shape}")
    if stride < 1 or dilation < 1 or pad < 0:
        raise UsageError(f"conv2d needs stride>=1, dilation>=1, pad>=0 "
                         f"(got {stride}, {dilation}, {pad})")
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if h + 2 * pad < span_h or wd + 2 * pad < span_w:
        raise ShapeError(f"conv2d kernel span {span_h}x{span_w} exceeds padded input "
                         f"{h + 2 * pad}x{wd + 2 * pad}")
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(wd, kw, stride, pad, dilation)

    kdim, npix = cin * kh * kw, ho * wo
    pointwise = kh == kw == 1 and stride == 1 and pad == 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = []
    if pointwise:
        cols = x.data.reshape(n, cin, npix)
    else:
        cols6 = np.empty((n, cin, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                sl = (slice(None), slice(None),
                      slice(r0, r0 + stride * (ho - 1) + 1, stride),
                      slice(c0, c0 + stride * (wo - 1) + 1, stride))
                windows.append((i, j, sl))
                cols6[:, :, i, j] = xp[sl]
        cols = cols6.reshape(n, kdim, npix)
    wmat = w.data.reshape(cout, kdim)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def grad_fn(g):
        g3 = g.reshape(n, cout, npix)
        gw = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3)
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(n, cin, kh, kw, ho, wo)
                dxp = np.zeros(xp.shape, dtype=x.dtype)
                for i, j, sl in windows:
                    dxp[sl] += dcols[:, :, i, j]
                gx = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd]) if pad else dxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", inputs, out, grad_fn)


# pooling and resampling ----------------------------------------------------

def pool2d(x: Tensor, kind: str, k: int, stride: Optional[int] = None, pad: int = 0) -> Tensor:
    """Max or average pooling over k x k windows.

    Max-pool gradient goes to the first row-major argmax of each window.
    Average pooling counts padded zeros.
    """
    if kind not in ("max", "avg"):
        raise UsageError(f"unknown pool kind {kind!r}")
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects a 4-D input, got {x.shape}")
    stride = k if stride is None else stride
    if stride < 1 or k < 1:
        raise UsageError(f"pool2d needs k>=1 and stride>=1 (got {k}, {stride})")
    n, c, h, wd = x.shape
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"pool kernel {k} larger than input {h}x{wd} (pad {pad})")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                constant_values=fill) if pad else x.data
    slices = []
    for i in range(k):
        for j in range(k):
            slices.append((slice(None), slice(None),
                           slice(i, i + stride * (ho - 1) + 1, stride),
                           slice(j, j + stride * (wo - 1) + 1, stride)))

    if kind == "max":
        # strict '>' keeps the first row-major maximum on ties
        out = xp[slices[0]].copy()
        arg = np.zeros(out.shape, dtype=np.int8 if k * k < 128 else np.int32)
        for t, sl in enumerate(slices[1:], start=1):
            cand = xp[sl]
            np.copyto(arg, t, where=cand > out)
            np.maximum(out, cand, out=out)
        _log(arg)

        def grad_fn(g):
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for t, sl in enumerate(slices):
                dxp[sl] += g * (arg == t)
            return (np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd]),)
    else:
        out = xp[slices[0]].copy()
        for sl in slices[1:]:
            out += xp[sl]
        out /= k * k

        def grad_fn(g):
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            share = g / (k * k)
            for sl in slices:
                dxp[sl] += share
            return (np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd]),)

    return record(f"{kind}pool2d", (x,), out, grad_fn)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the weights that map n_in samples onto output sample i.

    Half-pixel centres: output i samples source coordinate
    (i + 0.5) * n_in / n_out - 0.5, clamped to the valid range.
    """
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0 if i0 < n_in - 1 else 0.0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    return a.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"resize expects a 4-D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"resize target must be positive, got {out_h}x{out_w}")
    ah = bilinear_matrix(x.shape[2], out_h, x.dtype)
    aw = bilinear_matrix(x.shape[3], out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def grad_fn(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return record("resize_bilinear", (x,), out, grad_fn)


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    if factor < 1:
        raise UsageError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample expects a 4-D input, got {x.shape}")
    n, c, h, wd = x.shape
    if mode == "bilinear":
        return resize_bilinear(x, h * factor, wd * factor)
    if mode != "nearest":
        raise UsageError(f"unknown upsample mode {mode!r}")
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, factor, wd, factor).sum(axis=(3, 5)),)

    return record("upsample_nearest", (x,), out, grad_fn)


# pointwise -----------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_backward(g: np.ndarray, s: np.ndarray) -> np.ndarray:
    return g * s * (1.0 - s)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        active = x.data > 0
        _log(active)
        out = np.where(active, x.data, 0).astype(x.dtype)
        return record("relu", (x,), out, lambda g: (np.where(active, g, 0).astype(g.dtype),))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return record("sigmoid", (x,), s, lambda g: (_sigmoid_backward(g, s),))
    raise UsageError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activate(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activate(x, "sigmoid")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where x was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    _log(inside)
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    return record("clamp", (x,), out, lambda g: (np.where(inside, g, 0).astype(g.dtype),))


def open_unit(x: Tensor) -> Tensor:
    """Clamp into the open interval (0, 1) at the tensor's precision.

    A float32 sigmoid rounds to exactly 1.0 once z exceeds about 17; the
    sigmoid gradient is already zero there, so clamping changes no gradient.
    """
    fi = np.finfo(x.dtype)
    return clamp(x, float(fi.tiny), float(np.nextafter(x.dtype.type(1), x.dtype.type(0))))


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    # b was C x H x W broadcast over the batch axis
    return g.sum(axis=0)


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """``add`` or ``mul`` of ``a`` with ``b``.

    ``b`` may match ``a``'s shape, be a single element, or match ``a.shape[1:]``
    (one C x H x W map shared across the batch).
    """
    b = _as_tensor(b, a)
    if not (b.shape == a.shape or b.size == 1 or b.shape == a.shape[1:]):
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")
    bd = b.data.reshape(()) if b.size == 1 and b.shape != a.shape else b.data
    if kind == "add":
        out = a.data + bd

        def grad_fn(g):
            return g, _reduce_to(g, b.shape)
    elif kind == "mul":
        out = a.data * bd

        def grad_fn(g):
            ga = g * bd if a.requires_grad else None
            gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb
    else:
        raise UsageError(f"unknown elementwise kind {kind!r}")
    return record(kind, (a, b), out.astype(a.dtype, copy=False), grad_fn)


def add(a: Tensor, b) -> Tensor:
    return elementwise("add", a, b)


def mul(a: Tensor, b) -> Tensor:
    return elementwise("mul", a, b)


# reductions, dense, channel plumbing ---------------------------------------

def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: cannot multiply x{x.shape} by w{w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match w{w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def grad_fn(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    return record("dense", (x, w) if b is None else (x, w, b), out, grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    n, c, h, wd = x.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to((g / (h * wd))[:, :, None, None], x.shape).copy(),)

    return record("global_avg_pool", (x,), out, grad_fn)


def mean_channels(x: Tensor) -> Tensor:
    """N x C x H x W -> N x 1 x H x W channel mean."""
    if x.ndim != 4:
        raise ShapeError(f"mean_channels expects a 4-D input, got {x.shape}")
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return record("mean_channels", (x,), out,
                  lambda g: (np.broadcast_to(g / c, x.shape).copy(),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise UsageError("concat_channels needs at least one input")
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def grad_fn(g):
        return tuple(np.ascontiguousarray(g[:, bounds[i]:bounds[i + 1]]) for i in range(len(xs)))

    return record("concat_channels", tuple(xs), out, grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 4 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels[{start}:{stop}] invalid for shape {x.shape}")
    out = x.data[:, start:stop].copy()

    def grad_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice_channels", (x,), out, grad_fn)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.array(x.data.sum(), dtype=x.dtype)
    return record("sum", (x,), out, lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N x K logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    per_sample = np.log(denom[:, 0]) - z[rows, labels]
    out = np.array(per_sample.mean(), dtype=logits.dtype)

    def grad_fn(g):
        p = ez / denom
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record("softmax_cross_entropy", (logits,), out, grad_fn)
