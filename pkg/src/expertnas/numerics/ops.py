"""Differentiable primitives.

Every op takes :class:`Tensor` inputs (plain arrays/scalars are promoted to
constants), computes its forward value with numpy and registers a closure
that maps the output gradient back to its inputs.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", (a, b), ad @ bd, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (..., k), ``w`` (k, n), ``b`` (n,)."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        if b.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {wd.shape}")
        out = out + b.data
    k = wd.shape[0]

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, k).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", inputs, out, bw)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return record("relu", (x,), np.where(mask, xd, 0.0), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, which keeps finite differences honest)."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    half_1pt = 0.5 * (1.0 + t)
    out = xd * half_1pt

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half_1pt + 0.5 * xd * (1.0 - t * t) * dinner),)

    return record("gelu", (x,), out, bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), y, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the elementwise affine map."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for width {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        g2 = g.reshape(-1, d)
        ggamma = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record("layer_norm", (x, gamma, beta), out, bw)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record("sum", (x,), np.asarray(out), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return record("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def take_rows(x: Tensor, rows: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows of a tensor; gradients scatter back additively.

    Pass ``unique=True`` when ``rows`` has no repeats to use a plain
    assignment instead of ``np.add.at``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    n = x.shape[0]

    def bw(g):
        gx = np.zeros((n,) + g.shape[1:])
        if unique:
            gx[rows] = g
        else:
            np.add.at(gx, rows, g)
        return (gx,)

    return record("take_rows", (x,), x.data[rows], bw)


def scatter_rows(pieces: list[tuple[np.ndarray, Tensor]], n_rows: int, width: int) -> Tensor:
    """Assemble an (n_rows, width) tensor from disjoint row blocks.

    Rows not covered by any piece are zero.
    """
    out = np.zeros((n_rows, width))
    idx = []
    tensors = []
    for rows, t in pieces:
        rows = np.asarray(rows, dtype=np.int64)
        if t.shape != (len(rows), width):
            raise ShapeError(f"scatter_rows: piece shape {t.shape} for {len(rows)} rows of width {width}")
        out[rows] = t.data
        idx.append(rows)
        tensors.append(t)

    def bw(g):
        return tuple(g[r] for r in idx)

    return record("scatter_rows", tuple(tensors), out, bw)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    r = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[r, index] = g
        return (gx,)

    return record("pick", (x,), x.data[r, index], bw)


def take_cols(x: Tensor, cols: np.ndarray) -> Tensor:
    """Select columns along the last axis (used to restrict routers to active experts)."""
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[..., cols] = g
        return (gx,)

    return record("take_cols", (x,), np.ascontiguousarray(x.data[..., cols]), bw)


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) images -> (B, (H/p)*(W/p), p*p*C) non-overlapping patch tokens."""
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"patchify: image {H}x{W} not divisible by patch {patch}")
    hp, wp = H // patch, W // patch
    out = (images.data.reshape(B, hp, patch, wp, patch, C)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(B, hp * wp, patch * patch * C))

    def bw(g):
        return (g.reshape(B, hp, wp, patch, patch, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H, W, C),)

    return record("patchify", (images,), np.ascontiguousarray(out), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    ld = logits.data
    if ld.ndim != 2 or ld.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {ld.shape} vs labels {labels.shape}")
    B = ld.shape[0]
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return record("cross_entropy", (logits,), np.asarray(loss), bw)
