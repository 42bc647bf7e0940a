"""Selective state-space machinery.

Continuous system ``h' = A h + B x, y = C h`` with diagonal negative ``A``,
zero-order-hold discretisation, the recurrent and convolution-kernel forms of
the time-invariant system, and the input-dependent (selective) scan.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import Module, parameter, uniform_init
from .autodiff.tensor import NonFiniteError, make_result

SERIES_THRESHOLD = 1e-6
EXP_FLOOR = -80.0  # exp below this is < 2e-35; clamping avoids float32 subnormals


class ScanMisuseError(ValueError):
    """Kernel (convolution) form requested for a time-varying system."""


# -- discretisation ------------------------------------------------------

def _phi1(z: np.ndarray) -> np.ndarray:
    """(e^z - 1) / z, with the two-term series near 0."""
    z = np.asarray(z)
    small = np.abs(z) < SERIES_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.expm1(z) / z
    if np.any(small):
        out = np.where(small, 1.0 + z / 2, out)
    return out


def _dphi1(z: np.ndarray, a_bar: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Derivative of :func:`_phi1` given ``a_bar = exp(z)`` and ``phi = phi1(z)``."""
    small = np.abs(z) < 1e-3
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (a_bar - phi) / z
    if np.any(small):
        zs = z[small]
        out[small] = 0.5 + zs / 3 + zs * zs / 8
    return out


def discretize_zoh(A, B, delta) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for diagonal ``A``: ``A_bar = exp(dA)``, ``B_bar = (dA)^-1 (exp(dA) - 1) dB``.

    Arguments broadcast elementwise. ``delta`` must be strictly positive.
    """
    A, B, delta = np.asarray(A, float), np.asarray(B, float), np.asarray(delta, float)
    if np.any(delta <= 0):
        raise ValueError("discretize_zoh: delta must be > 0")
    z = delta * A
    return np.exp(np.maximum(z, EXP_FLOOR)), delta * _phi1(z) * B


# -- time-invariant forms ------------------------------------------------

def ssm_scan_recurrent(A_bar, B_bar, C, x) -> np.ndarray:
    """``h_t = A_bar h_{t-1} + B_bar x_t``, ``y_t = sum_n C h_t`` from ``h_{-1} = 0``.

    x: (L, D). A_bar, B_bar, C: (D, N) for a time-invariant system or
    (L, D, N) when they vary per step.
    """
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    A_bar, B_bar, C = (np.asarray(v, float) for v in (A_bar, B_bar, C))
    L, D = x.shape
    varying = A_bar.ndim == 3
    A_bar, B_bar, C = (v.reshape(v.shape[0], D, -1) if v.ndim == 3 else v.reshape(D, -1) for v in (A_bar, B_bar, C))
    h = np.zeros(A_bar.shape[-2:])
    y = np.empty((L, D))
    for t in range(L):
        a = A_bar[t] if varying else A_bar
        b = B_bar[t] if B_bar.ndim == 3 else B_bar
        c = C[t] if C.ndim == 3 else C
        with np.errstate(over="ignore", invalid="ignore"):
            h = a * h + b * x[t][:, None]
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(f"non-finite state at frame {t}")
        y[t] = np.sum(c * h, axis=-1)
    return y


def ssm_kernel(A_bar, B_bar, C, L: int) -> np.ndarray:
    """Impulse response ``K[k, d] = sum_n C A_bar^k B_bar`` for k < L."""
    A_bar, B_bar, C = (np.asarray(v, float) for v in (A_bar, B_bar, C))
    if A_bar.ndim == 3 or B_bar.ndim == 3 or C.ndim == 3:
        raise ScanMisuseError("convolution kernel needs time-invariant parameters")
    D = A_bar.shape[0] if A_bar.ndim == 2 else 1
    A_bar, B_bar, C = (v.reshape(D, -1) for v in (A_bar, B_bar, C))
    powers = A_bar[None] ** np.arange(L)[:, None, None]
    return np.sum(C[None] * powers * B_bar[None], axis=-1)


def ssm_kernel_conv(A_bar, B_bar, C, x) -> np.ndarray:
    """Causal convolution ``y = x * K`` with the time-invariant SSM kernel."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    L = x.shape[0]
    K = ssm_kernel(A_bar, B_bar, C, L)
    y = np.empty_like(x)
    for d in range(x.shape[1]):
        y[:, d] = np.convolve(x[:, d], K[:, d])[:L]
    return y


# -- selective scan ------------------------------------------------------

class SsmParams(Module):
    """Per-channel selective SSM parameters over ``d`` channels with state size ``n``.

    ``A = -exp(A_log)`` keeps the diagonal strictly negative. B and C are
    linear projections of the input to ``n`` values per step; the step size is
    ``softplus`` of a ``d -> d`` projection.
    """

    def __init__(self, d: int, n: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.d, self.n = d, n
        self.A_log = parameter(np.log(rng.uniform(0.5, 8.0, size=(d, n))))
        self.B_w = parameter(uniform_init(rng, (d, n), d))
        self.B_b = parameter(np.zeros(n))
        self.C_w = parameter(uniform_init(rng, (d, n), d))
        self.C_b = parameter(np.zeros(n))
        self.dt_w = parameter(uniform_init(rng, (d, d), d) * 0.1)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d))
        self.dt_b = parameter(dt + np.log(-np.expm1(-dt)))  # softplus^-1(dt)

    def A(self) -> Tensor:
        return -ops.exp(self.A_log)

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Per-step (delta, B_t, C_t) from x (..., L, d)."""
        delta = ops.softplus(ops.linear(x, self.dt_w, self.dt_b))
        return delta, ops.linear(x, self.B_w, self.B_b), ops.linear(x, self.C_w, self.C_b)

    def flops(self, rows: int) -> int:
        d, n = self.d, self.n
        proj = 2 * rows * d * (d + 2 * n)
        # discretise (~6/elt) + update (3/elt) + readout (2/elt) per state element
        scan = 11 * rows * d * n
        return proj + scan


def _discretize_chunk(delta: np.ndarray, A: np.ndarray, Bt: np.ndarray):
    z = delta[..., None] * A
    phi = _phi1(z)
    return z, np.exp(np.maximum(z, EXP_FLOOR)), delta[..., None] * phi * Bt[..., None, :], phi


def _scan_op(x: Tensor, delta: Tensor, A: Tensor, Bt: Tensor, Ct: Tensor, chunk_len: int | None) -> Tensor:
    """Fused discretise + recurrence + readout over (B, L, d) inputs.

    ``chunk_len=None`` materialises A_bar/B_bar for the whole sequence and keeps
    every state for backward. With a chunk length, parameters are materialised
    one chunk at a time and only chunk-boundary states are kept; backward
    recomputes states inside each chunk.
    """
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, Bt.data, Ct.data
    bsz, L, d = xd.shape
    n = Ad.shape[1]
    step = L if chunk_len is None else int(chunk_len)
    if step < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    y = np.empty_like(xd)
    h = np.zeros((bsz, d, n), dtype=xd.dtype)
    boundary = []
    history = np.empty((bsz, L, d, n), dtype=xd.dtype) if chunk_len is None else None
    cached = None
    for c0 in range(0, L, step):
        c1 = min(c0 + step, L)
        boundary.append(h)
        disc = _discretize_chunk(dd[:, c0:c1], Ad, Bd[:, c0:c1])
        _, a_bar, b_bar, _ = disc
        if history is not None:
            cached = disc
        for t in range(c1 - c0):
            h = a_bar[:, t] * h + b_bar[:, t] * xd[:, c0 + t, :, None]
            if history is not None:
                history[:, c0 + t] = h
            y[:, c0 + t] = np.einsum("bdn,bn->bd", h, Cd[:, c0 + t])
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(f"non-finite scan state by frame {c1 - 1}")

    def bw(g):
        gx = np.zeros_like(xd)
        gdelta = np.zeros_like(dd)
        gA = np.zeros_like(Ad)
        gB = np.zeros_like(Bd)
        gC = np.zeros_like(Cd)
        gh = np.zeros((bsz, d, n), dtype=xd.dtype)
        a_next = None
        for ci in range(len(boundary) - 1, -1, -1):
            c0 = ci * step
            c1 = min(c0 + step, L)
            if cached is not None:
                z, a_bar, b_bar, phi = cached
            else:
                z, a_bar, b_bar, phi = _discretize_chunk(dd[:, c0:c1], Ad, Bd[:, c0:c1])
            m = c1 - c0
            if history is not None:
                hs = history[:, c0:c1]
                h_prev0 = boundary[ci]
            else:
                hs = np.empty((bsz, m, d, n), dtype=xd.dtype)
                hh = boundary[ci]
                for t in range(m):
                    hh = a_bar[:, t] * hh + b_bar[:, t] * xd[:, c0 + t, :, None]
                    hs[:, t] = hh
                h_prev0 = boundary[ci]
            ga_bar = np.empty_like(a_bar)
            gb_bar = np.empty_like(b_bar)
            for t in range(m - 1, -1, -1):
                tt = c0 + t
                if a_next is not None:
                    gh = gh * a_next
                gh = gh + g[:, tt, :, None] * Cd[:, tt, None, :]
                gC[:, tt] = np.einsum("bd,bdn->bn", g[:, tt], hs[:, t])
                h_prev = hs[:, t - 1] if t > 0 else h_prev0
                ga_bar[:, t] = gh * h_prev
                gb_bar[:, t] = gh
                a_next = a_bar[:, t]
            xs = xd[:, c0:c1]
            dl = dd[:, c0:c1]
            bn = Bd[:, c0:c1, None, :]
            gx[:, c0:c1] = np.sum(gb_bar * b_bar, axis=-1)
            gb_bar *= xs[..., None]
            gbp = gb_bar * phi
            gz = ga_bar * a_bar + gb_bar * dl[..., None] * bn * _dphi1(z, a_bar, phi)
            gdelta[:, c0:c1] = np.sum(gbp * bn + gz * Ad, axis=-1)
            gA += (gz * dl[..., None]).reshape(-1, d, n).sum(axis=0)
            gB[:, c0:c1] = np.matmul(dl[:, :, None, :], gbp)[:, :, 0]
        return gx, gdelta, gA, gB, gC

    return make_result(y, (x, delta, A, Bt, Ct), bw, "selective_scan")


def _as_batched(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    lead = x.shape[:-2]
    return ops.reshape(x, (-1,) + x.shape[-2:]), lead


def selective_scan(params: SsmParams, x: Tensor) -> Tensor:
    """Input-dependent scan over x (..., L, d); leading axes are independent sequences."""
    x.check_finite("selective_scan input")
    xb, lead = _as_batched(x)
    delta, Bt, Ct = params.project(xb)
    y = _scan_op(xb, delta, params.A(), Bt, Ct, None)
    return ops.reshape(y, lead + y.shape[-2:])


def selective_scan_chunked(params: SsmParams, x: Tensor, chunk_len: int) -> Tensor:
    """Same result as :func:`selective_scan`, materialising parameters per chunk."""
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    x.check_finite("selective_scan input")
    xb, lead = _as_batched(x)
    delta, Bt, Ct = params.project(xb)
    y = _scan_op(xb, delta, params.A(), Bt, Ct, chunk_len)
    return ops.reshape(y, lead + y.shape[-2:])
