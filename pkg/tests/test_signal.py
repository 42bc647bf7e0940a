import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mseunet.autodiff import Tensor, grad_check, ops
from mseunet.signal import (
    FFT_LEN,
    HOP,
    N_BINS,
    WIN_LEN,
    AudioBuffer,
    MalformedWavError,
    SpectroPair,
    UnsupportedChannelsError,
    UnsupportedEncodingError,
    UnsupportedSampleRateError,
    frame_count,
    hann,
    istft,
    istft_tensor,
    read_wav,
    stft,
    write_wav,
)


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_framing_for_training_segment():
    s = stft(np.random.default_rng(0).standard_normal(30600))
    assert s.magnitude.shape == (256, 256)
    assert N_BINS == FFT_LEN // 2 + 1 == 256
    assert frame_count(30600) == 256


def test_frame_matches_direct_dft(rng):
    x = rng.standard_normal(2000)
    s = stft(x)
    padded = np.pad(x, WIN_LEN // 2, mode="reflect")
    t = 5
    seg = padded[t * HOP:t * HOP + WIN_LEN] * hann()
    n = np.arange(WIN_LEN)
    k = np.arange(N_BINS)[:, None]
    direct = np.sum(seg * np.exp(-2j * np.pi * k * n / FFT_LEN), axis=1)
    np.testing.assert_allclose(s.complex()[t], direct, atol=1e-9)


def test_hann_is_periodic():
    w = hann()
    n = np.arange(WIN_LEN)
    np.testing.assert_allclose(w, 0.5 - 0.5 * np.cos(2 * np.pi * n / WIN_LEN), atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 100, 510, 511, 16000, 30600, 32000])
def test_round_trip(n, rng):
    x = rng.standard_normal(n)
    y = istft(stft(x), n).samples
    assert y.shape == x.shape
    assert _rel(y, x) < 1e-6


@given(st.integers(1, 3000), st.integers(0, 2 ** 31 - 1))
def test_round_trip_any_length(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    assert _rel(istft(stft(x), n).samples, x) < 1e-6


def test_phase_range_and_periodicity(rng):
    s = stft(rng.standard_normal(4000))
    assert np.all(s.phase > -np.pi) and np.all(s.phase <= np.pi)
    assert np.all(s.magnitude >= 0)
    shifted = SpectroPair(s.magnitude, s.phase + 2 * np.pi)
    np.testing.assert_allclose(istft(shifted, 4000).samples, istft(s, 4000).samples, atol=1e-12)


def test_differentiable_istft_matches(rng):
    s = stft(rng.standard_normal(3000))
    c = s.complex()
    y = istft_tensor(Tensor(c.real), Tensor(c.imag), 3000).data
    np.testing.assert_allclose(y, istft(s, 3000).samples, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_differentiable_istft_gradient(seed):
    rng = np.random.default_rng(seed)
    re = Tensor(rng.standard_normal((6, N_BINS)), requires_grad=True)
    im = Tensor(rng.standard_normal((6, N_BINS)), requires_grad=True)
    w = rng.standard_normal(600)
    rep = grad_check(lambda a, b: ops.sum(istft_tensor(a, b, 600) * w), [re, im], max_elems=40)
    assert rep.ok, rep.max_rel_error


# -- WAV -----------------------------------------------------------------

def test_wav_round_trip(tmp_path, rng):
    x = np.round(rng.uniform(-0.9, 0.9, 1234) * 32768) / 32768
    write_wav(tmp_path / "a.wav", AudioBuffer(x))
    got = read_wav(tmp_path / "a.wav")
    assert got.sample_rate == 16000
    np.testing.assert_array_equal(got.samples, x)


def test_wav_clips_out_of_range(tmp_path):
    write_wav(tmp_path / "c.wav", AudioBuffer(np.array([2.0, -2.0, 0.5])))
    got = read_wav(tmp_path / "c.wav").samples
    np.testing.assert_array_equal(got, [32767 / 32768, -1.0, 0.5])


def _raw_wav(path, channels=1, width=2, rate=16000, n=10):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(b"\x00" * n * channels * width)


@pytest.mark.parametrize("kwargs,err", [
    ({"channels": 2}, UnsupportedChannelsError),
    ({"width": 1}, UnsupportedEncodingError),
    ({"rate": 8000}, UnsupportedSampleRateError),
])
def test_wav_rejects_unsupported(tmp_path, kwargs, err):
    _raw_wav(tmp_path / "x.wav", **kwargs)
    with pytest.raises(err):
        read_wav(tmp_path / "x.wav")


def test_wav_rejects_garbage(tmp_path):
    (tmp_path / "g.wav").write_bytes(b"RIFF\x00\x00")
    with pytest.raises(MalformedWavError):
        read_wav(tmp_path / "g.wav")


def test_audio_buffer_rejects_non_finite():
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]))
