"""Fast invariant suites runnable from the command line."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import signal, ssm, train
from .autodiff import Tensor, default_dtype, grad_check, ops
from .mamba import MambaBlock


def _ssm_dual_form() -> bool:
    rng = np.random.default_rng(0)
    for _ in range(10):
        n, d, L = rng.integers(1, 9), rng.integers(1, 5), rng.integers(1, 65)
        A = -rng.uniform(0.1, 2, (d, n))
        a_bar, b_bar = ssm.discretize_zoh(A, rng.standard_normal((d, n)), rng.uniform(0.01, 0.5, (d, 1)))
        C = rng.standard_normal((d, n))
        x = rng.standard_normal((L, d))
        y1 = ssm.ssm_scan_recurrent(a_bar, b_bar, C, x)
        y2 = ssm.ssm_kernel_conv(a_bar, b_bar, C, x)
        if np.max(np.abs(y1 - y2)) > 1e-6:
            return False
    return True


def _ssm_chunked() -> bool:
    rng = np.random.default_rng(1)
    with default_dtype(np.float64):
        p = ssm.SsmParams(4, 3, rng)
        x = Tensor(rng.standard_normal((2, 13, 4)))
        ref = ssm.selective_scan(p, x).data
        return all(np.max(np.abs(ssm.selective_scan_chunked(p, x, c).data - ref)) <= 1e-6 for c in (1, 2, 7, 13))


def _ssm_zoh_series() -> bool:
    A = np.array([[-1.0]])
    B = np.array([[1.0]])
    a_bar, b_bar = ssm.discretize_zoh(A, B, np.array([1e-8]))
    return abs(a_bar[0, 0] - np.exp(-1e-8)) < 1e-15 and abs(b_bar[0, 0] - 1e-8) < 1e-15


def _ssm_gradient() -> bool:
    rng = np.random.default_rng(2)
    with default_dtype(np.float64):
        blk = MambaBlock(2, 3, rng)
        x = Tensor(rng.standard_normal((1, 5, 2)), requires_grad=True)
        rep = grad_check(lambda x: ops.sum(blk(x) ** 2), [x])
    return rep.ok


def _signal_roundtrip() -> bool:
    x = np.random.default_rng(3).standard_normal(30600)
    s = signal.stft(x)
    y = signal.istft(s, x.size).samples
    return s.magnitude.shape == (256, 256) and np.linalg.norm(y - x) / np.linalg.norm(x) < 1e-6


def _metric_identities() -> bool:
    rng = np.random.default_rng(4)
    clean = train.synth_clean(0, 0.25)
    noise = train.synth_noise(1, "white", 0.25)
    ok = True
    for snr in (-5, 0, 2.5, 15, 17.5):
        _, scaled = train.mix_at_snr(clean, noise, snr)
        got = 10 * np.log10(np.mean(clean.samples ** 2) / np.mean(scaled.samples ** 2))
        ok &= abs(got - snr) < 1e-6
    s, e = rng.standard_normal(1000), rng.standard_normal(1000)
    ok &= abs(train.si_sdr(3.7 * e, s) - train.si_sdr(e, s)) < 1e-10
    return bool(ok)


SUITES: dict[str, dict[str, Callable[[], bool]]] = {
    "ssm": {
        "ssm_dual_form_equivalence": _ssm_dual_form,
        "ssm_chunked_equals_full": _ssm_chunked,
        "zoh_small_step_series": _ssm_zoh_series,
        "mamba_block_gradient": _ssm_gradient,
    },
    "signal": {"stft_istft_round_trip": _signal_roundtrip},
    "metrics": {"mixing_and_si_sdr_identities": _metric_identities},
}


def run_suites(names: list[str] | None = None) -> list[tuple[str, bool]]:
    """Run the named suites (all if ``None``); returns (property, passed) pairs."""
    names = list(SUITES) if names is None else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; available: {sorted(SUITES)}")
    results = []
    for suite in names:
        for prop, fn in SUITES[suite].items():
            try:
                ok = bool(fn())
            except Exception:  # a crashing property counts as a failure
                ok = False
            results.append((f"{suite}.{prop}", ok))
    return results
