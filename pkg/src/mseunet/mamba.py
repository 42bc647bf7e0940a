"""Mamba block, its bidirectional wrapper, and the time-then-frequency composite."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .autodiff.nn import Linear, Module, parameter, uniform_init
from .autodiff.tensor import make_result
from .ssm import SsmParams, selective_scan

RMS_EPS = 1e-6
CONV_K = 4


def rmsnorm(x, gain, eps: float = RMS_EPS) -> Tensor:
    """``x * gain / sqrt(mean(x**2) + eps)`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    if eps < 0:
        raise ValueError("rmsnorm eps must be >= 0")
    xd, gd = x.data, gain.data
    D = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True) + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(ms > 0, 1.0 / np.sqrt(np.where(ms > 0, ms, 1.0)), 0.0)
    xr = xd * r
    out = xr * gd

    def bw(g):
        u = g * gd
        gx = r * u - xd * r ** 3 * np.sum(u * xd, axis=-1, keepdims=True) / D
        gg = np.sum((g * xr).reshape(-1, D), axis=0)
        return gx, gg

    return make_result(out, (x, gain), bw, "rmsnorm")


class MambaBlock(Module):
    """Linear -> causal depthwise conv -> SiLU -> selective SSM, concatenated with a
    SiLU-gated linear branch and projected back to ``d`` channels."""

    def __init__(self, d: int, state_dim: int, rng: np.random.Generator):
        e = 2 * d
        self.d = d
        self.in_linear = Linear(d, e, rng)
        self.conv_w = parameter(uniform_init(rng, (e, 1, CONV_K), CONV_K))
        self.conv_b = parameter(np.zeros(e))
        self.ssm = SsmParams(e, state_dim, rng)
        self.gate_linear = Linear(d, e, rng)
        self.out_linear = Linear(2 * e, d, rng)

    def conv_branch(self, x: Tensor) -> Tensor:
        """silu(causal_conv(in_linear(x))) on (B, L, d) -> (B, L, 2d)."""
        u = self.in_linear(x)
        u = ops.permute(u, (0, 2, 1))
        u = ops.conv1d(u, self.conv_w, self.conv_b, padding="causal", groups=u.shape[1])
        return ops.silu(ops.permute(u, (0, 2, 1)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d:
            raise ValueError(f"mamba_block: expected {self.d} channels, got shape {x.shape}")
        lead = x.shape[:-2]
        xb = ops.reshape(x, (-1,) + x.shape[-2:])
        x1 = selective_scan(self.ssm, self.conv_branch(xb))
        x2 = ops.silu(self.gate_linear(xb))
        out = self.out_linear(ops.concat([x1, x2], axis=-1))
        return ops.reshape(out, lead + out.shape[-2:])

    def flops(self, rows: int) -> int:
        e = 2 * self.d
        return (self.in_linear.flops(rows) + 2 * CONV_K * e * rows + self.ssm.flops(rows)
                + self.gate_linear.flops(rows) + self.out_linear.flops(rows))


def mamba_block(params: MambaBlock, x: Tensor) -> Tensor:
    return params(x)


class BiMamba(Module):
    """Forward and backward Mamba over the sequence axis (-2), each RMS-normalised
    with a residual, then concatenated and fused by a linear map.

    ``flip_back=False`` reproduces the literal variant that adds the backward
    branch to ``x`` in reversed frame order.
    """

    def __init__(self, d: int, state_dim: int, rng: np.random.Generator, flip_back: bool = True):
        self.fwd = MambaBlock(d, state_dim, rng)
        self.bwd = MambaBlock(d, state_dim, rng)
        self.norm_f = parameter(np.ones(d))
        self.norm_b = parameter(np.ones(d))
        self.fuse_linear = Linear(2 * d, d, rng)
        self.flip_back = flip_back

    def backward_branch(self, x: Tensor) -> Tensor:
        out = rmsnorm(self.bwd(ops.flip(x, -2)), self.norm_b)
        return ops.flip(out, -2) if self.flip_back else out

    def forward(self, x: Tensor) -> Tensor:
        x_f = rmsnorm(self.fwd(x), self.norm_f) + x
        x_b = self.backward_branch(x) + x
        return self.fuse_linear(ops.concat([x_f, x_b], axis=-1))

    def flops(self, rows: int) -> int:
        d = self.fwd.d
        return self.fwd.flops(rows) + self.bwd.flops(rows) + 2 * 4 * rows * d + self.fuse_linear.flops(rows)


def bimamba(params: BiMamba, x: Tensor) -> Tensor:
    return params(x)


class TsMamba(Module):
    """Bidirectional Mamba along time (per frequency bin), then along frequency (per frame)."""

    def __init__(self, d: int, state_dim: int, rng: np.random.Generator, flip_back: bool = True):
        self.time_block = BiMamba(d, state_dim, rng, flip_back)
        self.freq_block = BiMamba(d, state_dim, rng, flip_back)

    def time_stage(self, x: Tensor) -> Tensor:
        xt = ops.permute(x, (1, 0, 2))  # (F, T, D): sequences run over T
        return ops.permute(self.time_block(xt), (1, 0, 2))

    def forward(self, x: Tensor) -> Tensor:
        """x: (T, F, D) -> (T, F, D)."""
        if x.ndim != 3:
            raise ValueError(f"ts_mamba expects (T, F, D), got {x.shape}")
        return self.freq_block(self.time_stage(x))

    def flops(self, t: int, f: int) -> int:
        return self.time_block.flops(t * f) + self.freq_block.flops(t * f)


def ts_mamba(params: TsMamba, x: Tensor) -> Tensor:
    return params(x)
