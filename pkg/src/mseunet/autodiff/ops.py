"""Differentiable ops over :class:`Tensor`.

Elementwise binary ops accept identical shapes, a scalar, or an operand whose
shape is a trailing suffix of the other's (per-channel style). Nothing wider
than that is broadcast.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result


def _check_suffix(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.dtype != a.data.dtype and b.size == 1 and not b.requires_grad:
        b = Tensor(b.data.astype(a.data.dtype))
    if a.data.dtype != b.data.dtype and a.size == 1 and not a.requires_grad:
        a = Tensor(a.data.astype(b.data.dtype))
    return a, b


# -- elementwise binary --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_suffix(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_suffix(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_suffix(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_suffix(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), bw, "div")


def atan2(p, q) -> Tensor:
    """Two-argument arctangent; (0, 0) maps to phase 0 with zero gradient."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"atan2: shapes {p.shape} and {q.shape} differ")
    pd, qd = p.data, q.data
    out = np.arctan2(pd, qd)
    r2 = pd * pd + qd * qd
    both_zero = r2 == 0
    if np.any(both_zero):
        out = np.where(both_zero, 0.0, out)
    safe = np.where(both_zero, 1.0, r2)

    def bw(g):
        gs = np.where(both_zero, 0.0, g / safe)
        return gs * qd, -gs * pd

    return make_result(out, (p, q), bw, "atan2")


# -- elementwise unary ---------------------------------------------------

def _unary(x, out: np.ndarray, dfdx, name: str) -> Tensor:
    return make_result(out, (x,), lambda g: (g * dfdx(),), name)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda: out, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _unary(x, np.log(xd), lambda: 1.0 / xd, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _unary(x, out, lambda: 0.5 / out, "sqrt")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    xd = x.data
    return _unary(x, np.abs(xd), lambda: np.sign(xd), "abs")


def sin(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _unary(x, np.sin(xd), lambda: np.cos(xd), "sin")


def cos(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _unary(x, np.cos(xd), lambda: -np.sin(xd), "cos")


def power(x, p: float) -> Tensor:
    """``x ** p`` for a constant exponent. For p >= 1 the gradient at 0 is 0."""
    x = as_tensor(x)
    xd = x.data
    out = xd ** p

    def d():
        if p == 1:
            return np.ones_like(xd)
        if p > 1:
            return p * xd ** (p - 1)
        return p * out / xd

    return _unary(x, out, d, "power")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _unary(x, s, lambda: s * (1.0 - s), "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid_np(xd)
    return _unary(x, xd * s, lambda: s * (1.0 + xd * (1.0 - s)), "silu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _unary(x, out, lambda: _sigmoid_np(xd), "softplus")


def activation(x, kind: str) -> Tensor:
    fns = {"silu": silu, "sigmoid": sigmoid, "exp": exp, "softplus": softplus}
    try:
        return fns[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# -- reductions ----------------------------------------------------------

def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / n)


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is stored (in_features, out_features)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = w.data
    out = x2 @ wd
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(*lead, wd.shape[1]), inputs, bw, "linear")


# -- structural ----------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}: {e}") from None
    return make_result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes) if x.ndim else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result(out, (x,), lambda g: (np.transpose(g, inv),), "permute")


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    ax = _axis(x, axis)
    out = np.ascontiguousarray(np.flip(x.data, ax))
    return make_result(out, (x,), lambda g: (np.flip(g, ax),), "flip")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to join")
    ax = _axis(ts[0], axis)
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: {t.shape} does not match {ref} off axis {ax}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return make_result(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data[idx]
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), bw, "getitem")


def take(x, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    x = as_tensor(x)
    ax = _axis(x, axis)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    out = np.take(x.data, idx, axis=ax)

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gm = np.moveaxis(gx, ax, 0)
        np.add.at(gm, idx, np.moveaxis(g, ax, 0))
        return (gx,)

    return make_result(out, (x,), bw, "take")


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    ax = _axis(x, axis)
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    return getitem(x, tuple(sl))


def reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    """Indices realising reflect padding (edge sample not repeated)."""
    if (before >= n or after >= n) and n > 1:
        raise ShapeError(f"reflect pad ({before}, {after}) too large for length {n}")
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad(x, widths: Sequence[tuple[int, int]], mode: str = "zero") -> Tensor:
    """Pad each axis by ``(before, after)``. Modes: ``zero``, ``reflect``."""
    x = as_tensor(x)
    if len(widths) != x.ndim:
        raise ShapeError(f"pad: {len(widths)} widths for {x.ndim} axes")
    if mode == "reflect":
        out = x
        for ax, (lo, hi) in enumerate(widths):
            if lo or hi:
                out = take(out, reflect_indices(x.shape[ax], lo, hi), ax)
        return out
    if mode != "zero":
        raise ValueError(f"unknown pad mode {mode!r}")
    widths = [tuple(w) for w in widths]
    out = np.pad(x.data, widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return make_result(out, (x,), lambda g: (g[crop],), "pad")


def structural(x, kind: str, *args, **kwargs) -> Tensor:
    fns = {"reshape": reshape, "permute": permute, "flip": flip, "slice": slice_axis,
           "pad": pad, "concat": lambda t, *a, **k: concat(t, *a, **k)}
    try:
        return fns[kind](x, *args, **kwargs)
    except KeyError:
        raise ValueError(f"unknown structural op {kind!r}") from None


# -- convolution ---------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride, dilation, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, C, kh*kw, ho*wo)."""
    b, c = xp.shape[:2]
    sh, sw = stride
    dh, dw = dilation
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            cols[:, :, i, j] = xp[:, :, r0:r0 + sh * (ho - 1) + 1:sh, c0:c0 + sw * (wo - 1) + 1:sw]
    return cols.reshape(b, c, kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride, dilation, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to (B, C, Hp, Wp)."""
    b, c = shape[:2]
    sh, sw = stride
    dh, dw = dilation
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            out[:, :, r0:r0 + sh * (ho - 1) + 1:sh, c0:c0 + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


def _norm_padding(padding) -> tuple[tuple[int, int], tuple[int, int]]:
    if isinstance(padding, (tuple, list)) and len(padding) == 2 and isinstance(padding[0], (tuple, list)):
        return (int(padding[0][0]), int(padding[0][1])), (int(padding[1][0]), int(padding[1][1]))
    ph, pw = _pair(padding)
    return (ph, ph), (pw, pw)


def conv2d(x, w, b=None, stride=1, dilation=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    x: (C, H, W) or (B, C, H, W); w: (C_out, C_in // groups, KH, KW); b: (C_out,).
    ``padding`` is an int, ``(ph, pw)``, or ``((top, bottom), (left, right))``; zeros.
    """
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks x{x.shape} w{w.shape}")
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    if sh <= 0 or sw <= 0:
        raise ValueError(f"conv2d: stride must be positive, got {(sh, sw)}")
    if dh <= 0 or dw <= 0:
        raise ValueError(f"conv2d: dilation must be positive, got {(dh, dw)}")
    (pt, pb), (pl, pr) = _norm_padding(padding)
    bsz, cin, h, wid = xd.shape
    cout, cig, kh, kw = w.shape
    if groups <= 0 or cin % groups or cout % groups:
        raise ValueError(f"conv2d: groups={groups} must divide C_in={cin} and C_out={cout}")
    if cig != cin // groups:
        raise ShapeError(f"conv2d: weight {w.shape} expects {cig * groups} input channels, got {cin}")
    hp, wp = h + pt + pb, wid + pl + pr
    ho = (hp - dh * (kh - 1) - 1) // sh + 1
    wo = (wp - dw * (kw - 1) - 1) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} (dilation {(dh, dw)}) larger than padded input {(hp, wp)}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
    cols = _im2col(xp, kh, kw, (sh, sw), (dh, dw), ho, wo)
    g = groups
    cols_g = cols.reshape(bsz, g, cig * kh * kw, ho * wo)
    wmat = w.data.reshape(g, cout // g, cig * kh * kw)
    out = np.matmul(wmat, cols_g).reshape(bsz, cout, ho, wo)
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        inputs = (x, w, b)

    def bw(gout):
        g4 = gout[None] if unbatched else gout
        gmat = g4.reshape(bsz, g, cout // g, ho * wo)
        gx = gw = None
        if x.requires_grad:
            dcols = np.matmul(np.swapaxes(wmat, 1, 2), gmat).reshape(bsz, cin, kh * kw, ho * wo)
            dxp = _col2im(dcols, xp.shape, kh, kw, (sh, sw), (dh, dw), ho, wo)
            gx = dxp[:, :, pt:pt + h, pl:pl + wid]
            gx = gx[0] if unbatched else gx
        if w.requires_grad:
            gw = np.matmul(gmat, np.swapaxes(cols_g, 2, 3)).sum(axis=0).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g4.sum(axis=(0, 2, 3))

    return make_result(out[0] if unbatched else out, inputs, bw, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Transposed 2-D convolution (adjoint of :func:`conv2d` in ``x``).

    x: (C_in, H, W) or batched; w: (C_in, C_out, KH, KW).
    Output extent per axis: (in - 1) * stride - 2 * pad + K.
    """
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    sh, sw = _pair(stride)
    if sh <= 0 or sw <= 0:
        raise ValueError(f"conv_transpose2d: stride must be positive, got {(sh, sw)}")
    ph, pw = _pair(padding)
    bsz, cin, h, wid = xd.shape
    if w.shape[0] != cin:
        raise ShapeError(f"conv_transpose2d: weight {w.shape} expects {w.shape[0]} input channels, got {cin}")
    _, cout, kh, kw = w.shape
    hf, wf = (h - 1) * sh + kh, (wid - 1) * sw + kw
    ho, wo = hf - 2 * ph, wf - 2 * pw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: padding {(ph, pw)} removes the whole output {(hf, wf)}")
    wmat = w.data.reshape(cin, cout * kh * kw)
    x2 = xd.reshape(bsz, cin, h * wid)
    cols = np.matmul(wmat.T, x2).reshape(bsz, cout, kh * kw, h * wid)
    full = _col2im(cols, (bsz, cout, hf, wf), kh, kw, (sh, sw), (1, 1), h, wid)
    out = full[:, :, ph:ph + ho, pw:pw + wo]
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        inputs = (x, w, b)

    def bw(gout):
        g4 = gout[None] if unbatched else gout
        gfull = np.zeros((bsz, cout, hf, wf), dtype=g4.dtype)
        gfull[:, :, ph:ph + ho, pw:pw + wo] = g4
        gcols = _im2col(gfull, kh, kw, (sh, sw), (1, 1), h, wid).reshape(bsz, cout * kh * kw, h * wid)
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(bsz, cin, h, wid)
            gx = gx[0] if unbatched else gx
        if w.requires_grad:
            gw = np.matmul(x2, np.swapaxes(gcols, 1, 2)).sum(axis=0).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g4.sum(axis=(0, 2, 3))

    return make_result(np.ascontiguousarray(out[0] if unbatched else out), inputs, bw, "conv_transpose2d")


def conv1d(x, w, b=None, stride: int = 1, padding: str = "valid", groups: int = 1) -> Tensor:
    """1-D cross-correlation. x: (C, L) or (B, C, L); w: (C_out, C_in // groups, K).

    ``causal`` left-pads K-1 zeros; ``same`` pads (K-1)//2 left and the rest right.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride <= 0:
        raise ValueError(f"conv1d: stride must be positive, got {stride}")
    k = w.shape[-1]
    if padding == "causal":
        pads = (k - 1, 0)
    elif padding == "same":
        pads = ((k - 1) // 2, k - 1 - (k - 1) // 2)
    elif padding == "valid":
        pads = (0, 0)
    else:
        raise ValueError(f"conv1d: unknown padding mode {padding!r}")
    unbatched = x.ndim == 2
    x4 = reshape(x, (1, x.shape[0], 1, x.shape[1]) if unbatched else (x.shape[0], x.shape[1], 1, x.shape[2]))
    w4 = reshape(w, (w.shape[0], w.shape[1], 1, k))
    y = conv2d(x4, w4, b, stride=(1, stride), padding=((0, 0), pads), groups=groups)
    return reshape(y, (y.shape[1], y.shape[3]) if unbatched else (y.shape[0], y.shape[1], y.shape[3]))
