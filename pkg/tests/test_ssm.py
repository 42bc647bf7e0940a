import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from mseunet.autodiff import NonFiniteError, Tensor, grad_check, ops
from mseunet.ssm import (
    ScanMisuseError,
    SsmParams,
    discretize_zoh,
    selective_scan,
    selective_scan_chunked,
    ssm_kernel,
    ssm_kernel_conv,
    ssm_scan_recurrent,
)


def _zoh_expm(a, b, dt):
    """Scalar ZOH via the augmented 2x2 matrix exponential."""
    m = expm(np.array([[a * dt, b * dt], [0.0, 0.0]]))
    return m[0, 0], m[0, 1]


def _zoh_mpmath(a, b, dt):
    mpmath.mp.dps = 40
    z = mpmath.mpf(a) * mpmath.mpf(dt)
    return float(mpmath.exp(z)), float(mpmath.expm1(z) / mpmath.mpf(a) * mpmath.mpf(b))


@pytest.mark.parametrize("dt", [1e-8, 1e-7, 1e-6, 1e-5, 1e-3, 0.1, 0.5, 1.0])
def test_zoh_matches_matrix_exponential(dt, rng):
    a = -rng.uniform(0.01, 8.0, 16)
    b = rng.standard_normal(16)
    a_bar, b_bar = discretize_zoh(a, b, dt)
    for i in range(16):
        ea, eb = _zoh_expm(a[i], b[i], dt)
        assert abs(a_bar[i] - ea) < 1e-9
        assert abs(b_bar[i] - eb) < 1e-9
        ma, mb = _zoh_mpmath(a[i], b[i], dt)
        assert a_bar[i] == pytest.approx(ma, rel=1e-12)
        assert b_bar[i] == pytest.approx(mb, rel=1e-9)


def test_zoh_series_branch_relative_accuracy():
    # dt*A below the series threshold: B_bar ~ dt*B must keep full relative precision
    a_bar, b_bar = discretize_zoh(np.array([-0.5]), np.array([2.0]), np.array([1e-9]))
    _, mb = _zoh_mpmath(-0.5, 2.0, 1e-9)
    assert b_bar[0] == pytest.approx(mb, rel=1e-14)


def test_zoh_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        discretize_zoh(np.array([-1.0]), np.array([1.0]), np.array([0.0]))


@given(st.floats(1e-8, 1.0), st.floats(-8.0, -1e-3))
def test_zoh_stable(dt, a):
    a_bar, _ = discretize_zoh(np.array([a]), np.array([1.0]), np.array([dt]))
    assert 0 < a_bar[0] < 1


def test_dual_forms_agree(rng):
    for _ in range(100):
        n, d, L = rng.integers(1, 9), rng.integers(1, 5), rng.integers(1, 65)
        a_bar, b_bar = discretize_zoh(-rng.uniform(0.05, 3, (d, n)), rng.standard_normal((d, n)),
                                      rng.uniform(1e-3, 1.0, (d, 1)))
        c = rng.standard_normal((d, n))
        x = rng.standard_normal((L, d))
        np.testing.assert_allclose(ssm_scan_recurrent(a_bar, b_bar, c, x), ssm_kernel_conv(a_bar, b_bar, c, x),
                                   atol=1e-6)


def test_kernel_is_impulse_response(rng):
    a_bar, b_bar = discretize_zoh(-rng.uniform(0.1, 2, (2, 3)), rng.standard_normal((2, 3)), 0.3)
    c = rng.standard_normal((2, 3))
    imp = np.zeros((10, 2))
    imp[0] = 1.0
    np.testing.assert_allclose(ssm_kernel(a_bar, b_bar, c, 10), ssm_scan_recurrent(a_bar, b_bar, c, imp), atol=1e-14)


def test_kernel_refuses_time_varying(rng):
    a = rng.uniform(0.1, 0.9, (5, 2, 3))
    with pytest.raises(ScanMisuseError):
        ssm_kernel_conv(a, a, a, rng.standard_normal((5, 2)))


def test_recurrent_reports_non_finite_frame():
    a = np.full((1, 1), 1e200)
    with pytest.raises(NonFiniteError, match="frame 2"):
        ssm_scan_recurrent(a, np.ones((1, 1)), np.ones((1, 1)), np.ones((4, 1)))


def _selective_oracle(p: SsmParams, x: np.ndarray) -> np.ndarray:
    """Per-step loop through discretize_zoh and the time-varying recurrence."""
    out = np.empty_like(x)
    A = -np.exp(p.A_log.data)
    for s in range(x.shape[0]):
        delta = np.logaddexp(0, x[s] @ p.dt_w.data + p.dt_b.data)
        Bt = x[s] @ p.B_w.data + p.B_b.data
        Ct = x[s] @ p.C_w.data + p.C_b.data
        a_bar, b_bar = discretize_zoh(A[None], Bt[:, None, :], delta[..., None])
        out[s] = ssm_scan_recurrent(a_bar, b_bar, np.broadcast_to(Ct[:, None, :], a_bar.shape), x[s])
    return out


def test_selective_scan_matches_loop_oracle(rng):
    p = SsmParams(4, 3, rng)
    x = rng.standard_normal((2, 11, 4))
    np.testing.assert_allclose(selective_scan(p, Tensor(x)).data, _selective_oracle(p, x), atol=1e-12)


def test_selective_scan_is_causal(rng):
    p = SsmParams(3, 2, rng)
    x = rng.standard_normal((1, 10, 3))
    y0 = selective_scan(p, Tensor(x)).data
    x[0, 6:] += 3.0
    y1 = selective_scan(p, Tensor(x)).data
    np.testing.assert_array_equal(y0[0, :6], y1[0, :6])


def test_chunked_equals_full(rng):
    for _ in range(50):
        d, n, L = rng.integers(1, 6), rng.integers(1, 9), rng.integers(1, 40)
        p = SsmParams(int(d), int(n), rng)
        x = Tensor(rng.standard_normal((2, int(L), int(d))))
        full = selective_scan(p, x).data
        for c in (1, 2, 7, int(L)):
            np.testing.assert_allclose(selective_scan_chunked(p, x, c).data, full, atol=1e-6)


def test_chunk_len_validated(rng):
    with pytest.raises(ValueError):
        selective_scan_chunked(SsmParams(2, 2, rng), Tensor(np.zeros((1, 3, 2))), 0)


def test_scan_rejects_non_finite_input(rng):
    x = np.zeros((1, 3, 2))
    x[0, 1, 0] = np.inf
    with pytest.raises(NonFiniteError):
        selective_scan(SsmParams(2, 2, rng), Tensor(x))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("chunk", [None, 3])
def test_selective_scan_gradient(seed, chunk):
    rng = np.random.default_rng(seed)
    p = SsmParams(3, 2, rng)
    x = Tensor(rng.standard_normal((2, 7, 3)), requires_grad=True)
    w = rng.standard_normal((2, 7, 3))

    def f(x, *params):
        y = selective_scan(p, x) if chunk is None else selective_scan_chunked(p, x, chunk)
        return ops.sum(y * w)

    rep = grad_check(f, [x] + p.parameters())
    assert rep.ok, rep.max_rel_error
