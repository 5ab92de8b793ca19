"""Central finite-difference gradient checking.

``grad_check`` compares reverse-mode gradients against
``(f(x + eps) - f(x - eps)) / (2 eps)`` per input coordinate. Non-scalar
outputs are reduced with a fixed random weighting ``sum(r * f(x))``.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

from . import ops
from .errors import UsageError
from .tensor import Tensor, backward, no_grad

REL_FLOOR = 1e-8


class NonSmoothPoint(ArithmeticError):
    """A finite-difference probe crossed a relu or max-pool switch point."""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), REL_FLOOR)


def _patterns_equal(p: list, q: list) -> bool:
    return len(p) == len(q) and all(np.array_equal(x, y) for x, y in zip(p, q))


def numeric_gradients(f: Callable[..., Tensor], inputs: Sequence[Tensor],
                      weights: np.ndarray, eps: float = 1e-4,
                      base_patterns: list | None = None) -> list:
    """Finite-difference gradient of ``sum(weights * f(*inputs))``.

    The weighted sum is taken over ``f(x+eps) - f(x-eps)`` directly, which
    avoids cancellation against the (possibly large) total.
    """
    grads = []
    with no_grad():
        for t in inputs:
            g = np.zeros(t.shape, dtype=np.float64)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                outs = []
                for x in (orig + eps, orig - eps):
                    flat[k] = x
                    with ops.log_patterns() as pat:
                        outs.append(f(*inputs).data)
                    if base_patterns is not None and not _patterns_equal(pat, base_patterns):
                        flat[k] = orig
                        raise NonSmoothPoint(f"coordinate {k} of input shape {t.shape}")
                flat[k] = orig
                gflat[k] = np.sum(weights * (outs[0] - outs[1])) / (2 * eps)
            grads.append(g)
    return grads


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    All ``inputs`` must be double precision and ``requires_grad``. Raises
    :class:`NonSmoothPoint` if a probe lands across a relu/max-pool switch,
    since the central difference is meaningless there.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise UsageError("grad_check needs double-precision inputs; use precision('double')")
        if not t.requires_grad:
            raise UsageError("grad_check inputs must have requires_grad=True")
        t.grad = None

    with ops.log_patterns() as base:
        y = f(*inputs)
    weights = np.random.default_rng(seed).standard_normal(y.shape)
    backward(ops.tensor_sum(ops.mul(y, Tensor(weights, dtype=np.float64))))
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad for t in inputs]

    numeric = numeric_gradients(f, inputs, weights, eps, base_patterns=list(base))
    return max(float(relative_error(a, n).max()) for a, n in zip(analytic, numeric))


# suite -----------------------------------------------------------------------

def _t(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _conv_case(stride=1, pad=1, dilation=1, size=5):
    def build(rng):
        x, w, b = _t(rng, 2, 2, size, size), _t(rng, 3, 2, 3, 3), _t(rng, 3)
        return (lambda x, w, b: ops.conv2d(x, w, b, stride, pad, dilation)), [x, w, b]
    return build


def _unary(fn, *shape, scale=1.0):
    def build(rng):
        return fn, [_t(rng, *shape, scale=scale)]
    return build


def _binary(kind, bshape):
    def build(rng):
        return (lambda a, b: ops.elementwise(kind, a, b)), [_t(rng, 2, 2, 3, 3), _t(rng, *bshape)]
    return build


def _dense(rng):
    return ops.dense, [_t(rng, 3, 4), _t(rng, 4, 5), _t(rng, 5)]


def _concat(rng):
    xs = [_t(rng, 2, c, 3, 3) for c in (1, 2, 3)]
    return (lambda *xs: ops.concat_channels(list(xs))), xs


def _softmax_ce(rng):
    labels = rng.integers(0, 5, size=4)
    return (lambda z: ops.softmax_cross_entropy(z, labels)), [_t(rng, 4, 5, scale=2.0)]


def _named(names, tensors):
    return dict(zip(names, tensors))


def _hourglass(rng):
    from .net import HourglassSpec, hourglass_param_shapes, hourglass_shared
    shapes = hourglass_param_shapes("hg", 2, HourglassSpec(depth=2, body_channels=3))
    names = [n for n, _ in shapes]
    params = [_t(rng, *s, scale=0.5) for _, s in shapes]

    def f(x, *ps):
        return hourglass_shared(x, _named(names, ps), "hg", depth=2)
    return f, [_t(rng, 1, 2, 8, 8)] + params


def _mask_head(rng):
    from .net import MaskHeadSpec, mask_head, mask_head_param_shapes
    shapes = mask_head_param_shapes("mh", 3, MaskHeadSpec(hidden=4))
    names = [n for n, _ in shapes]
    params = [_t(rng, *s, scale=0.7) for _, s in shapes]

    def f(s, *ps):
        return mask_head(s, _named(names, ps), "mh")
    return f, [_t(rng, 2, 3, 4, 4)] + params


def _apply_attention(mode):
    def build(rng):
        from .net import apply_attention
        f = _t(rng, 2, 3, 4, 4)
        m = Tensor(1.0 / (1.0 + np.exp(-rng.standard_normal((2, 3, 4, 4)))),
                   requires_grad=True, dtype=np.float64)
        return (lambda f, m: apply_attention(f, m, mode)), [f, m]
    return build


def _inception(rng):
    from .net import BlockSpec, block_param_shapes, mini_inception_block
    shapes = block_param_shapes("blk", 3, BlockSpec("blk", 2, 2, 2, 2, 2))
    names = [n for n, _ in shapes]
    params = [_t(rng, *s, scale=0.5) for _, s in shapes]

    def f(x, *ps):
        return mini_inception_block(x, _named(names, ps), "blk")
    return f, [_t(rng, 1, 3, 6, 6)] + params


def _attention_module(rng):
    from .net import (AttentionModuleSpec, HourglassSpec, MaskHeadSpec, apply_attention,
                      attention_mask, attention_param_shapes)
    attn = AttentionModuleSpec(HourglassSpec(depth=1), (MaskHeadSpec(3), MaskHeadSpec(3)),
                               channels=2)
    shapes = attention_param_shapes(attn)
    names = [n for n, _ in shapes]
    params = [_t(rng, *s, scale=0.5) for _, s in shapes]

    def f(x, *ps):
        m, _ = attention_mask(x, _named(names, ps), attn)
        return apply_attention(x, m, attn.mode)
    return f, [_t(rng, 1, 2, 4, 4)] + params


# name -> builder(rng) -> (f, inputs); one entry per differentiable op
CASES = {
    "conv2d": _conv_case(),
    "conv2d_dilation2": _conv_case(pad=2, dilation=2, size=6),
    "conv2d_stride2": _conv_case(stride=2, pad=1, size=6),
    "maxpool2d": _unary(lambda x: ops.pool2d(x, "max", 2), 2, 2, 4, 4),
    "maxpool2d_3x3_pad1": _unary(lambda x: ops.pool2d(x, "max", 3, 1, 1), 2, 2, 4, 4),
    "avgpool2d": _unary(lambda x: ops.pool2d(x, "avg", 2), 2, 2, 4, 4),
    "upsample_nearest": _unary(lambda x: ops.upsample(x, 2, "nearest"), 2, 2, 3, 3),
    "upsample_bilinear": _unary(lambda x: ops.upsample(x, 2, "bilinear"), 2, 2, 3, 3),
    "relu": _unary(ops.relu, 2, 3, 4, 4),
    "sigmoid": _unary(ops.sigmoid, 2, 3, 4, 4, scale=2.0),
    "clamp": _unary(lambda x: ops.clamp(x, -0.5, 0.8), 2, 3, 4, 4),
    "add": _binary("add", (2, 2, 3, 3)),
    "add_broadcast": _binary("add", (2, 3, 3)),
    "mul": _binary("mul", (2, 2, 3, 3)),
    "mul_broadcast": _binary("mul", (2, 3, 3)),
    "dense": _dense,
    "global_avg_pool": _unary(ops.global_avg_pool, 2, 3, 4, 4),
    "mean_channels": _unary(ops.mean_channels, 2, 3, 4, 4),
    "concat_channels": _concat,
    "slice_channels": _unary(lambda x: ops.slice_channels(x, 1, 3), 2, 4, 3, 3),
    "sum": _unary(ops.tensor_sum, 2, 3, 4),
    "softmax_cross_entropy": _softmax_ce,
    "hourglass_shared": _hourglass,
    "mask_head": _mask_head,
    "apply_attention_multiply": _apply_attention("multiply"),
    "apply_attention_residual": _apply_attention("residual"),
    "mini_inception_block": _inception,
    "attention_module_2heads": _attention_module,
}

# Sigmoid compositions have large third derivatives, so at eps=1e-4 the
# O(eps^2) truncation term swamps coordinates with gradients near 1e-4.
# A smaller step there keeps truncation and roundoff both below 1e-6.
CASE_EPS = {"mask_head": 2e-5, "attention_module_2heads": 2e-5}
DEFAULT_EPS = 1e-4
TOLERANCE = 1e-6


def check_op(name: str, trials: int = 100, eps: float | None = None,
             max_attempts: int = 1000) -> dict:
    """Run ``trials`` seeded instances of one registered case.

    Instances whose probes straddle a relu/max-pool switch are redrawn with
    the next seed and counted in ``rejected``. ``eps`` defaults to the
    per-case step in ``CASE_EPS`` (else ``DEFAULT_EPS``).
    """
    from .tensor import precision

    build = CASES[name]
    if eps is None:
        eps = CASE_EPS.get(name, DEFAULT_EPS)
    worst, done, rejected, seed = 0.0, 0, 0, 0
    with precision("double"):
        while done < trials:
            if seed >= max_attempts:
                raise RuntimeError(f"{name}: only {done} smooth instances in {max_attempts} draws")
            rng = np.random.default_rng([seed, zlib_key(name)])
            f, inputs = build(rng)
            try:
                err = grad_check(f, inputs, eps=eps, seed=seed)
            except NonSmoothPoint:
                rejected += 1
            else:
                worst = max(worst, err)
                done += 1
            seed += 1
    return {"op": name, "max_rel_error": worst, "trials": done, "rejected": rejected,
            "eps": eps}


def zlib_key(name: str) -> int:
    return zlib.crc32(name.encode())


def run_suite(trials: int = 100, names=None) -> list:
    return [check_op(n, trials) for n in (names or CASES)]
