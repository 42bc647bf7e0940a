"""Deformable 2-D convolution (v1): kernel taps displaced by learned offsets."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .autodiff.nn import Conv2d, Module, parameter, uniform_init
from .autodiff.tensor import ShapeError, make_result


def _bilinear_taps(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Corner indices, weights and in-bounds masks for sampling at (py, px)."""
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly, lx = py - y0, px - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    corners = []
    for dy, dx, wgt in ((0, 0, (1 - ly) * (1 - lx)), (0, 1, (1 - ly) * lx),
                        (1, 0, ly * (1 - lx)), (1, 1, ly * lx)):
        yy, xx = y0 + dy, x0 + dx
        inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        lin = np.where(inb, yy * w + xx, 0)
        corners.append((lin, inb, wgt))
    return corners, ly, lx


def deform_conv2d(x, offsets, w, b=None, padding: int = 1, stride: int = 1, dilation: int = 1) -> Tensor:
    """x: (C, H, W) or (B, C, H, W); offsets: (B, 2*K*K, Ho, Wo) holding (d_row, d_col)
    per tap in row-major tap order; w: (C_out, C, K, K). Out-of-range samples read 0."""
    x, offsets, w = as_tensor(x), as_tensor(offsets), as_tensor(w)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    od = offsets.data[None] if offsets.ndim == 3 else offsets.data
    bsz, c, h, wid = xd.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"deform_conv2d: weight {w.shape} does not match {c} input channels")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wid + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    kk = kh * kw
    if od.shape != (bsz, 2 * kk, ho, wo):
        raise ShapeError(f"deform_conv2d: offsets {offsets.shape} != {(bsz, 2 * kk, ho, wo)}")
    p = ho * wo
    ii, jj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    ki, kj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    base_y = (ii.reshape(1, -1) * stride - padding + ki.reshape(-1, 1) * dilation).astype(xd.dtype)
    base_x = (jj.reshape(1, -1) * stride - padding + kj.reshape(-1, 1) * dilation).astype(xd.dtype)
    off = od.reshape(bsz, kk, 2, p)
    py = base_y[None] + off[:, :, 0]  # (B, KK, P)
    px = base_x[None] + off[:, :, 1]
    corners, ly, lx = _bilinear_taps(py, px, h, wid)

    xflat = xd.reshape(bsz, c, h * wid)
    bidx = np.arange(bsz)[:, None, None]
    vals = []
    sampled = np.zeros((bsz, c, kk, p), dtype=xd.dtype)
    for lin, inb, wgt in corners:
        v = xflat[bidx, :, lin]  # (B, KK, P, C)
        v = np.moveaxis(v, -1, 1) * inb[:, None]
        vals.append(v)
        sampled += wgt[:, None] * v
    wmat = w.data.reshape(cout, c * kk)
    out = np.matmul(wmat, sampled.reshape(bsz, c * kk, p)).reshape(bsz, cout, ho, wo)
    inputs: tuple[Tensor, ...] = (x, offsets, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        inputs = (x, offsets, w, b)

    def bw(g):
        g4 = g.reshape(bsz, cout, p)
        gs = np.matmul(wmat.T, g4).reshape(bsz, c, kk, p)
        gx = goff = gw = None
        if x.requires_grad:
            flat_idx = []
            weights = []
            base = (np.arange(bsz)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * wid)
            for lin, inb, wgt in corners:
                flat_idx.append((base + lin[:, None]).reshape(-1))
                weights.append((gs * (wgt * inb)[:, None]).reshape(-1))
            gxf = np.bincount(np.concatenate(flat_idx), weights=np.concatenate(weights), minlength=bsz * c * h * wid)
            gx = gxf.reshape(bsz, c, h, wid).astype(xd.dtype)
            gx = gx[0] if unbatched else gx
        if offsets.requires_grad:
            v00, v01, v10, v11 = vals
            lyc, lxc = ly[:, None], lx[:, None]
            dpy = (1 - lxc) * (v10 - v00) + lxc * (v11 - v01)
            dpx = (1 - lyc) * (v01 - v00) + lyc * (v11 - v10)
            goy = np.sum(gs * dpy, axis=1)
            gox = np.sum(gs * dpx, axis=1)
            goff = np.stack([goy, gox], axis=2).reshape(bsz, 2 * kk, ho, wo)
            goff = goff.reshape(offsets.shape)
        if w.requires_grad:
            gw = np.matmul(g4, np.swapaxes(sampled.reshape(bsz, c * kk, p), 1, 2)).sum(axis=0).reshape(w.shape)
        if b is None:
            return gx, goff, gw
        return gx, goff, gw, g4.sum(axis=(0, 2))

    return make_result(out[0] if unbatched else out, inputs, bw, "deform_conv2d")


class DeformConv2d(Module):
    """3x3 deformable conv whose offsets come from a zero-initialised 3x3 conv of the input."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3):
        self.k = k
        self.offset_conv = Conv2d(c_in, 2 * k * k, k, rng, padding=k // 2)
        self.offset_conv.weight.data[...] = 0.0
        self.weight = parameter(uniform_init(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        off = self.offset_conv(x)
        return deform_conv2d(x, off, self.weight, self.bias, padding=self.k // 2)

    def flops(self, h: int, w: int) -> int:
        c_out, c_in, k, _ = self.weight.shape
        # bilinear sampling: 4 taps x (1 mul + 1 add) per sampled value
        return self.offset_conv.flops(h, w) + 2 * k * k * c_in * c_out * h * w + 8 * k * k * c_in * h * w
