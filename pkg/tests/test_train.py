import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mseunet.autodiff import Tensor
from mseunet.model import ModelConfig
from mseunet.signal import N_BINS, SAMPLE_RATE, FFT_LEN, AudioBuffer, SpectroPair, stft
from mseunet.train import (
    AdamWState,
    LossWeights,
    MixSpec,
    SpectralTarget,
    TrainConfig,
    adamw_step,
    composite_loss,
    draw_batch,
    lr_at,
    make_pair,
    mix_at_snr,
    pcs_stretch,
    si_sdr,
    synth_clean,
    synth_noise,
    train_loop,
    write_loss_csv,
)


# -- synthetic data ------------------------------------------------------

def test_synth_deterministic():
    np.testing.assert_array_equal(synth_clean(7, 0.3).samples, synth_clean(7, 0.3).samples)
    np.testing.assert_array_equal(synth_noise(7, "pink", 0.3).samples, synth_noise(7, "pink", 0.3).samples)
    assert not np.array_equal(synth_clean(7, 0.3).samples, synth_clean(8, 0.3).samples)


def test_clean_spectral_peak_is_low_harmonic():
    x = synth_clean(3, 1.0)
    s = stft(x)
    peak_hz = np.argmax(s.magnitude.mean(axis=0)) * SAMPLE_RATE / FFT_LEN
    # strongest bin sits on one of the first six harmonics of an F0 in [100, 300]
    assert 100 - 32 <= peak_hz <= 6 * 300


def test_white_noise_statistics():
    x = synth_noise(11, "white", 1.0).samples
    assert abs(np.mean(x)) < 3 / math.sqrt(x.size)
    assert np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0, rel=1e-12)


def test_pink_noise_slope():
    x = synth_noise(2, "pink", 2.0).samples
    p = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(x.size, 1 / SAMPLE_RATE)
    lo = p[(f > 100) & (f < 200)].mean()
    hi = p[(f > 1000) & (f < 2000)].mean()
    assert 10 * np.log10(lo / hi) == pytest.approx(10.0, abs=1.5)  # 1/f: 10 dB per decade


def test_unknown_noise_kind():
    with pytest.raises(ValueError):
        synth_noise(0, "brown", 0.1)


@pytest.mark.parametrize("snr", [-5, 0, 2.5, 15, 17.5])
@pytest.mark.parametrize("kind", ["white", "pink", "babble"])
def test_mix_hits_target_snr(snr, kind):
    clean, noise = synth_clean(1, 0.5), synth_noise(2, kind, 0.5)
    noisy, scaled = mix_at_snr(clean, noise, snr)
    got = 10 * np.log10(np.mean(clean.samples ** 2) / np.mean(scaled.samples ** 2))
    assert abs(got - snr) < 1e-6
    np.testing.assert_allclose(noisy.samples, clean.samples + scaled.samples, atol=0)


def test_mix_equal_power_zero_db_scale_one():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(1000)
    n = rng.standard_normal(1000)
    n *= np.sqrt(np.mean(c ** 2) / np.mean(n ** 2))
    _, scaled = mix_at_snr(AudioBuffer(c), AudioBuffer(n), 0.0)
    np.testing.assert_allclose(scaled.samples, n, rtol=1e-12)


def test_mix_errors():
    with pytest.raises(ValueError):
        mix_at_snr(AudioBuffer(np.zeros(10)), AudioBuffer(np.ones(10)), 0)
    with pytest.raises(ValueError):
        mix_at_snr(AudioBuffer(np.ones(10)), AudioBuffer(np.zeros(10)), 0)
    with pytest.raises(ValueError):
        mix_at_snr(AudioBuffer(np.ones(10)), AudioBuffer(np.ones(11)), 0)
    with pytest.raises(ValueError):
        MixSpec(float("inf"))


# -- SI-SDR --------------------------------------------------------------

def test_si_sdr_identities(rng):
    s = rng.standard_normal(4000)
    assert si_sdr(s, s) == 100.0
    assert si_sdr(2 * s, s) == 100.0
    n = rng.standard_normal(4000)
    n -= (n @ s) / (s @ s) * s
    n *= np.linalg.norm(s) / np.linalg.norm(n)
    assert si_sdr(s + n, s) == pytest.approx(0.0, abs=1e-9)
    assert si_sdr(np.zeros(4000), s) == -100.0


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_si_sdr_scale_invariant(alpha, seed):
    rng = np.random.default_rng(seed)
    s, e = rng.standard_normal(256), rng.standard_normal(256)
    assert abs(si_sdr(alpha * e, s) - si_sdr(e, s)) < 1e-10


def test_si_sdr_errors():
    with pytest.raises(ValueError):
        si_sdr(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        si_sdr(np.ones(3), np.ones(4))


# -- loss ----------------------------------------------------------------

def _target(seed=0):
    return SpectralTarget.from_audio(synth_clean(seed, 0.1))


def test_loss_zero_on_identical():
    t = _target()
    assert float(composite_loss(t, t).data) == 0.0


def test_loss_phase_modulo_two_pi():
    t = _target()
    p = SpectralTarget(t.compressed_mag, t.phase + 2 * np.pi, t.waveform)
    assert float(composite_loss(p, t, LossWeights(0, 0, 0, 1)).data) == pytest.approx(0.0, abs=1e-12)


def test_loss_all_weights_zero():
    t, u = _target(0), _target(1)
    assert float(composite_loss(u, t, LossWeights(0, 0, 0, 0)).data) == 0.0


def test_loss_phase_opposite():
    t = _target()
    p = SpectralTarget(t.compressed_mag, t.phase + np.pi, t.waveform)
    assert float(composite_loss(p, t, LossWeights(0, 0, 0, 0.5)).data) == pytest.approx(1.0, abs=1e-12)


def test_loss_shape_mismatch():
    t = _target()
    p = SpectralTarget(t.compressed_mag[:-1], t.phase, t.waveform)
    with pytest.raises(ValueError):
        composite_loss(p, t)


@given(st.integers(0, 50), st.integers(0, 50))
def test_loss_nonnegative(a, b):
    assert float(composite_loss(_target(a), _target(b)).data) >= 0.0


def test_loss_term_oracles():
    t = _target(0)
    rng = np.random.default_rng(1)
    cm = t.compressed_mag * rng.uniform(0.5, 1.5, t.compressed_mag.shape)
    ph = t.phase + rng.uniform(-1, 1, t.phase.shape)
    wav = t.waveform + 0.01 * rng.standard_normal(t.waveform.shape)
    p = SpectralTarget(cm, ph, wav)
    z_p, z_t = cm * np.exp(1j * ph), t.compressed_mag * np.exp(1j * t.phase)
    want = (1.0 * np.mean((cm - t.compressed_mag) ** 2)
            + 0.5 * 0.5 * (np.mean((z_p.real - z_t.real) ** 2) + np.mean((z_p.imag - z_t.imag) ** 2))
            + 1.0 * np.mean(np.abs(wav - t.waveform))
            + 0.5 * np.mean(1 - np.cos(ph - t.phase)))
    assert float(composite_loss(p, t).data) == pytest.approx(want, rel=1e-12)


# -- optimiser -----------------------------------------------------------

def test_adamw_single_step_oracle():
    p = [np.array([1.0])]
    adamw_step(p, [np.array([1.0])], AdamWState(), lr=0.1, wd=0.01)
    assert p[0][0] == pytest.approx(1 - 0.1 * (1 / (1 + 1e-8)) - 0.1 * 0.01, abs=1e-12)
    assert p[0][0] == pytest.approx(0.899, abs=1e-7)


def test_adamw_null_gradient_identity(rng):
    x = rng.standard_normal((3, 4))
    p = [x.copy()]
    state = AdamWState()
    for _ in range(5):
        adamw_step(p, [np.zeros_like(x)], state, lr=0.1, wd=0.0)
    np.testing.assert_array_equal(p[0], x)


def test_adamw_pure_decay(rng):
    x = rng.standard_normal(5)
    p = [x.copy()]
    adamw_step(p, [np.zeros(5)], AdamWState(), lr=0.1, wd=0.2)
    np.testing.assert_allclose(p[0], x * (1 - 0.1 * 0.2), rtol=1e-14)


def test_adamw_state_mismatch():
    state = AdamWState()
    adamw_step([np.zeros(2)], [np.zeros(2)], state, lr=0.1)
    with pytest.raises(ValueError):
        adamw_step([np.zeros(3)], [np.zeros(3)], state, lr=0.1)


def test_adamw_matches_reference_loop(rng):
    # textbook AdamW written out per coordinate
    theta = rng.standard_normal(3)
    grads = [rng.standard_normal(3) for _ in range(4)]
    ref = theta.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(grads, 1):
        for i in range(3):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            mh, vh = m[i] / (1 - 0.9 ** t), v[i] / (1 - 0.999 ** t)
            ref[i] -= 0.01 * (mh / (math.sqrt(vh) + 1e-8) + 0.05 * ref[i])
    p = [theta.copy()]
    state = AdamWState()
    for g in grads:
        adamw_step(p, [g], state, lr=0.01, wd=0.05)
    np.testing.assert_allclose(p[0], ref, rtol=1e-13)


def test_lr_schedule():
    assert lr_at(0) == 5e-4
    assert lr_at(1) == pytest.approx(4.95e-4, rel=1e-12)
    assert lr_at(100) == pytest.approx(1.830e-4, rel=1e-3)
    with pytest.raises(ValueError):
        lr_at(-1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=1.5)
    with pytest.raises(ValueError):
        TrainConfig(segment_len=100)


# -- PCS -----------------------------------------------------------------

def _spec(seed=0):
    return stft(synth_clean(seed, 0.2))


def test_pcs_unit_gammas_identity():
    s = _spec()
    out = pcs_stretch(s, [1.0, 1.0, 1.0], [0, 1000, 4000, 8000])
    np.testing.assert_array_equal(out.magnitude, s.magnitude)
    np.testing.assert_array_equal(out.phase, s.phase)


def test_pcs_single_band_square():
    s = _spec()
    out = pcs_stretch(s, [2.0], [0, 8000])
    sq = s.magnitude ** 2
    np.testing.assert_allclose(out.magnitude, sq * np.sqrt(np.sum(s.magnitude ** 2) / np.sum(sq ** 2)), rtol=1e-12)
    assert np.sum(out.magnitude ** 2) == pytest.approx(np.sum(s.magnitude ** 2), rel=1e-12)
    np.testing.assert_array_equal(out.phase, s.phase)


def test_pcs_band_assignment():
    mag = np.ones((2, N_BINS))
    s = SpectroPair(mag, np.zeros_like(mag))
    out = pcs_stretch(s, [1.0, 3.0], [0, 4000, 8000])
    # equal magnitudes stay equal under any exponent; only the energy rescale applies
    np.testing.assert_allclose(out.magnitude, 1.0)


@pytest.mark.parametrize("edges,gammas", [
    ([0, 4000], [1.0]),
    ([100, 8000], [1.0]),
    ([0, 5000, 3000, 8000], [1, 1, 1]),
    ([0, 8000], [0.0]),
    ([0, 4000, 8000], [1.0]),
])
def test_pcs_malformed(edges, gammas):
    with pytest.raises(ValueError):
        pcs_stretch(_spec(), gammas, edges)


# -- loop ----------------------------------------------------------------

def test_draw_batch_deterministic():
    cfg = TrainConfig(segment_len=1600, batch=2, seed=3)
    a, b = draw_batch(cfg, 4), draw_batch(cfg, 4)
    for (c1, n1), (c2, n2) in zip(a, b):
        np.testing.assert_array_equal(n1.samples, n2.samples)
    assert not np.array_equal(draw_batch(cfg, 5)[0][1].samples, a[0][1].samples)


def test_train_loop_deterministic_and_csv(tmp_path):
    mcfg = ModelConfig(C1=4, N=1, state_dim=2)
    tcfg = TrainConfig(segment_len=1200, steps=2, steps_per_epoch=1, seed=1)
    r1 = train_loop(mcfg, tcfg, loss_csv=tmp_path / "a.csv")
    r2 = train_loop(mcfg, tcfg)
    assert [l for _, l, _ in r1.trajectory] == [l for _, l, _ in r2.trajectory]
    assert r1.step == 2
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["step", "loss", "lr"]
    assert float(rows[2][2]) == pytest.approx(5e-4 * 0.99)


def test_train_loop_aborts_on_nan():
    from mseunet.train import TrainingDivergedError

    mcfg = ModelConfig(C1=4, N=1, state_dim=2)
    tcfg = TrainConfig(segment_len=1200, steps=3, seed=0)
    from mseunet.model import MambaSEUNet
    from mseunet.autodiff import default_dtype

    with default_dtype(np.float32):
        model = MambaSEUNet(mcfg)
    model.mag_decoder.alpha.data[:] = np.nan
    with pytest.raises(TrainingDivergedError) as e:
        train_loop(mcfg, tcfg, model=model)
    assert e.value.step == 0
