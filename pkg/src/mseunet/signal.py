"""Waveform I/O and the STFT/ISTFT pair that brackets the network."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .autodiff import Tensor, as_tensor
from .autodiff.tensor import make_result

SAMPLE_RATE = 16000
FFT_LEN = 510
WIN_LEN = 510
HOP = 120
N_BINS = FFT_LEN // 2 + 1


class WavError(ValueError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class UnsupportedSampleRateError(WavError):
    pass


class UnsupportedChannelsError(WavError):
    pass


class WindowSumUnderflowError(FloatingPointError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SpectroPair:
    """Magnitude and phase planes, both (frames, bins)."""

    magnitude: np.ndarray
    phase: np.ndarray
    fft_len: int = FFT_LEN
    win_len: int = WIN_LEN
    hop: int = HOP

    @property
    def frames(self) -> int:
        return self.magnitude.shape[0]

    @property
    def bins(self) -> int:
        return self.magnitude.shape[1]

    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


# -- WAV -----------------------------------------------------------------

def read_wav(path: str | Path) -> AudioBuffer:
    """Read a PCM16 mono 16 kHz RIFF/WAVE file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except wave.Error as e:
        msg = str(e)
        if "unknown format" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from None
        raise MalformedWavError(f"{path}: {msg}") from None
    except EOFError:
        raise MalformedWavError(f"{path}: truncated header") from None
    if channels != 1:
        raise UnsupportedChannelsError(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: {8 * width}-bit samples, expected PCM16")
    if rate != SAMPLE_RATE:
        raise UnsupportedSampleRateError(f"{path}: {rate} Hz, expected {SAMPLE_RATE}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    """Write PCM16 mono; samples are clipped to the representable range."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(audio.sample_rate)
        f.writeframes(pcm.tobytes())


# -- STFT ----------------------------------------------------------------

@lru_cache(maxsize=None)
def hann(win_len: int = WIN_LEN) -> np.ndarray:
    w = get_window("hann", win_len, fftbins=True)
    w.setflags(write=False)
    return w


def frame_count(n_samples: int, hop: int = HOP) -> int:
    return n_samples // hop + 1


def _wrap_phase(phase: np.ndarray) -> np.ndarray:
    return np.where(phase <= -np.pi, phase + 2 * np.pi, phase)


def stft(x: AudioBuffer | np.ndarray, fft_len: int = FFT_LEN, win_len: int = WIN_LEN, hop: int = HOP) -> SpectroPair:
    """Centered (reflect-padded) Hann STFT, one-sided."""
    samples = x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)
    if samples.size < 1:
        raise ValueError("stft of an empty signal")
    half = win_len // 2
    mode = "reflect" if samples.size > 1 else "edge"
    padded = np.pad(samples, half, mode=mode)
    n_frames = frame_count(samples.size, hop)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win_len)[None, :]
    frames = padded[idx] * hann(win_len)
    spec = np.fft.rfft(frames, n=fft_len, axis=-1)
    return SpectroPair(np.abs(spec), _wrap_phase(np.angle(spec)), fft_len, win_len, hop)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, win_len = frames.shape
    out = np.zeros((n_frames - 1) * hop + win_len, dtype=frames.dtype)
    for t in range(n_frames):
        out[t * hop:t * hop + win_len] += frames[t]
    return out


@lru_cache(maxsize=None)
def _window_sum_square(n_frames: int, win_len: int, hop: int) -> np.ndarray:
    w2 = hann(win_len) ** 2
    wss = _overlap_add(np.broadcast_to(w2, (n_frames, win_len)), hop)
    wss.setflags(write=False)
    return wss


def _ola_normaliser(n_frames: int, win_len: int, hop: int, out_len: int) -> tuple[np.ndarray, int]:
    """Inverse window-sum-square over the kept region, and the crop offset."""
    half = win_len // 2
    wss = _window_sum_square(n_frames, win_len, hop)
    full = (n_frames - 1) * hop + win_len
    if out_len > full - half:
        raise ValueError(f"out_len {out_len} exceeds what {n_frames} frames can synthesise")
    kept = wss[half:half + out_len]
    if np.any(kept < 1e-10):
        bad = int(np.argmax(kept < 1e-10))
        raise WindowSumUnderflowError(f"window sum underflows at output sample {bad}")
    return 1.0 / kept, half


def istft(s: SpectroPair, out_len: int | None = None) -> AudioBuffer:
    """Hann-synthesis overlap-add with window-sum-square normalisation."""
    n_frames = s.frames
    if out_len is None:
        out_len = (n_frames - 1) * s.hop
    frames = np.fft.irfft(s.complex(), n=s.fft_len, axis=-1)[:, :s.win_len] * hann(s.win_len)
    inv, off = _ola_normaliser(n_frames, s.win_len, s.hop, out_len)
    y = _overlap_add(frames, s.hop)[off:off + out_len] * inv
    return AudioBuffer(y)


@lru_cache(maxsize=None)
def _irfft_basis(fft_len: int, win_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Real matrices so that irfft(re + i*im)[:win_len] == re @ Mr + im @ Mi."""
    n_bins = fft_len // 2 + 1
    eye = np.eye(n_bins)
    mr = np.fft.irfft(eye, n=fft_len, axis=-1)[:, :win_len]
    mi = np.fft.irfft(1j * eye, n=fft_len, axis=-1)[:, :win_len]
    mr.setflags(write=False)
    mi.setflags(write=False)
    return mr, mi


def istft_tensor(real, imag, out_len: int, fft_len: int = FFT_LEN, win_len: int = WIN_LEN, hop: int = HOP) -> Tensor:
    """Differentiable ISTFT from real/imag planes (frames, bins); same maths as :func:`istft`."""
    real, imag = as_tensor(real), as_tensor(imag)
    n_frames = real.shape[0]
    mr, mi = _irfft_basis(fft_len, win_len)
    dtype = real.data.dtype
    mr, mi = mr.astype(dtype, copy=False), mi.astype(dtype, copy=False)
    w = hann(win_len).astype(dtype)
    inv, off = _ola_normaliser(n_frames, win_len, hop, out_len)
    inv = inv.astype(dtype)
    frames = (real.data @ mr + imag.data @ mi) * w
    y = _overlap_add(frames, hop)[off:off + out_len] * inv
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win_len)[None, :]
    full = (n_frames - 1) * hop + win_len

    def bw(g):
        gpad = np.zeros(full, dtype=g.dtype)
        gpad[off:off + out_len] = g * inv
        gframes = gpad[idx] * w
        return gframes @ mr.T, gframes @ mi.T

    return make_result(y, (real, imag), bw, "istft")
