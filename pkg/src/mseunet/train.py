"""Desk-scale training and evaluation: synthetic mixtures, loss, AdamW, SI-SDR, PCS."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, backward, default_dtype, no_grad, ops
from .model import MambaSEUNet, ModelConfig, model_forward
from .signal import FFT_LEN, SAMPLE_RATE, WIN_LEN, AudioBuffer, SpectroPair, stft

log = logging.getLogger(__name__)

SI_SDR_CAP = 100.0


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    lr_decay: float = 0.99
    segment_len: int = 30600
    batch: int = 1
    steps: int = 100
    steps_per_epoch: int = 10
    w_mag: float = 1.0
    w_cplx: float = 0.5
    w_time: float = 1.0
    w_phase: float = 0.5
    weight_decay: float = 0.01
    snr_low: float = 0.0
    snr_high: float = 15.0
    noise_kind: str = "white"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.segment_len < WIN_LEN:
            raise ValueError(f"segment_len must be >= {WIN_LEN}")
        if self.batch < 1 or self.steps < 0 or self.steps_per_epoch < 1:
            raise ValueError("batch, steps_per_epoch must be >= 1 and steps >= 0")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}")

    @property
    def weights(self) -> "LossWeights":
        return LossWeights(self.w_mag, self.w_cplx, self.w_time, self.w_phase)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class MixSpec:
    snr_db: float
    clean_seed: int = 0
    noise_seed: int = 1
    noise_kind: str = "white"
    duration: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")


# -- synthetic data ------------------------------------------------------

NOISE_KINDS = ("white", "pink", "babble")


def synth_clean(seed: int, duration: float, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Voiced-speech stand-in: 3-6 harmonics of a drifting F0 in [100, 300] Hz under a syllabic envelope."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f_base = rng.uniform(120, 250)
    drift = rng.uniform(0.05, 0.2) * f_base * np.sin(2 * np.pi * rng.uniform(0.5, 3) * t + rng.uniform(0, 2 * np.pi))
    f0 = np.clip(f_base + drift, 100, 300)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    k_max = int(rng.integers(3, 7))
    amps = rng.uniform(0.3, 1.0, size=k_max) / np.arange(1, k_max + 1)
    sig = sum(a * np.sin(k * phase + rng.uniform(0, 2 * np.pi)) for k, a in zip(range(1, k_max + 1), amps))
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * np.pi))
    sig = sig * env
    return AudioBuffer(0.5 * sig / np.max(np.abs(sig)), sample_rate)


def synth_noise(seed: int, kind: str, duration: float, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Unit-RMS noise: ``white`` Gaussian, ``pink`` (1/f power), or ``babble`` (five overlapping voices)."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(spec.size)
        spec[1:] /= np.sqrt(f[1:])
        spec[0] = 0
        x = np.fft.irfft(spec, n=n)
    elif kind == "babble":
        x = sum(synth_clean(int(rng.integers(1 << 31)), duration, sample_rate).samples for _ in range(5))
    else:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    return AudioBuffer(x / np.sqrt(np.mean(x ** 2)), sample_rate)


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr_db: float) -> tuple[AudioBuffer, AudioBuffer]:
    """Scale ``noise`` so that 10 log10(P_clean / P_noise) equals ``snr_db``; return (noisy, scaled noise)."""
    if len(clean) != len(noise):
        raise ValueError(f"length mismatch: clean {len(clean)} vs noise {len(noise)}")
    pc, pn = _power(clean.samples), _power(noise.samples)
    if pc == 0:
        raise ValueError("clean signal has zero power")
    if pn == 0:
        raise ValueError("noise signal has zero power")
    scale = math.sqrt(pc / (pn * 10 ** (snr_db / 10)))
    scaled = noise.samples * scale
    return AudioBuffer(clean.samples + scaled, clean.sample_rate), AudioBuffer(scaled, clean.sample_rate)


def make_pair(spec: MixSpec) -> tuple[AudioBuffer, AudioBuffer]:
    clean = synth_clean(spec.clean_seed, spec.duration)
    noise = synth_noise(spec.noise_seed, spec.noise_kind, spec.duration)
    noisy, _ = mix_at_snr(clean, noise, spec.snr_db)
    return clean, noisy


# -- loss ----------------------------------------------------------------

@dataclass
class LossWeights:
    w_mag: float = 1.0
    w_cplx: float = 0.5
    w_time: float = 1.0
    w_phase: float = 0.5


@dataclass
class SpectralTarget:
    """Anything with compressed magnitude, phase and waveform; values may be arrays or tensors."""

    compressed_mag: object
    phase: object
    waveform: object

    @classmethod
    def from_audio(cls, audio: AudioBuffer | np.ndarray, compress_exp: float = 0.3) -> "SpectralTarget":
        samples = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, float)
        spec = stft(samples)
        return cls(spec.magnitude ** compress_exp, spec.phase, samples)

    @classmethod
    def from_spec(cls, spec: SpectroPair, waveform, compress_exp: float = 0.3) -> "SpectralTarget":
        return cls(spec.magnitude ** compress_exp, spec.phase, np.asarray(waveform, float))


def composite_loss(pred, target, weights: LossWeights | None = None) -> Tensor:
    """Weighted sum of compressed-magnitude MSE, complex (real/imag) MSE,
    waveform L1 and the anti-wrapping phase distance mean(1 - cos(dphase))."""
    w = weights or LossWeights()
    cm_p, ph_p, wav_p = as_tensor(pred.compressed_mag), as_tensor(pred.phase), as_tensor(pred.waveform)
    dt = cm_p.dtype
    cm_t, ph_t, wav_t = (Tensor(np.asarray(v.data if isinstance(v, Tensor) else v), dtype=dt)
                         for v in (target.compressed_mag, target.phase, target.waveform))
    for a, b, what in ((cm_p, cm_t, "magnitude"), (ph_p, ph_t, "phase"), (wav_p, wav_t, "waveform")):
        if a.shape != b.shape:
            raise ValueError(f"composite_loss: {what} shapes differ: {a.shape} vs {b.shape}")
    total = Tensor(np.zeros((), dtype=dt))
    if w.w_mag:
        total = total + w.w_mag * ops.mean((cm_p - cm_t) ** 2)
    if w.w_cplx:
        dr = ops.mul(cm_p, ops.cos(ph_p)) - cm_t * np.cos(ph_t.data)
        di = ops.mul(cm_p, ops.sin(ph_p)) - cm_t * np.sin(ph_t.data)
        total = total + w.w_cplx * 0.5 * (ops.mean(dr ** 2) + ops.mean(di ** 2))
    if w.w_time:
        total = total + w.w_time * ops.mean(ops.abs(wav_p - wav_t))
    if w.w_phase:
        total = total + w.w_phase * ops.mean(1.0 - ops.cos(ph_p - ph_t))
    return total


# -- optimisation --------------------------------------------------------

@dataclass
class AdamWState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, wd: float = 0.01) -> list[np.ndarray]:
    """One AdamW update in place; returns ``params``. Decay is decoupled: ``-lr * wd * theta``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match parameter shapes")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + wd * p
        p -= lr * update
    return params


def lr_at(epoch: int, lr0: float = 5e-4, decay: float = 0.99) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay ** epoch


# -- metrics and transforms ----------------------------------------------

def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, clamped to [-100, 100]."""
    est = np.asarray(estimate.samples if isinstance(estimate, AudioBuffer) else estimate, dtype=np.float64)
    ref = np.asarray(reference.samples if isinstance(reference, AudioBuffer) else reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"si_sdr: length mismatch {est.shape} vs {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0:
        raise ValueError("si_sdr: reference has zero energy")
    target = (np.dot(est, ref) / ref_energy) * ref
    t_energy = float(np.dot(target, target))
    r_energy = float(np.sum((est - target) ** 2))
    if t_energy == 0:  # silent or orthogonal estimate
        return -SI_SDR_CAP
    if r_energy == 0:
        return SI_SDR_CAP
    return float(np.clip(10 * np.log10(t_energy / r_energy), -SI_SDR_CAP, SI_SDR_CAP))


def pcs_stretch(s: SpectroPair, gammas, band_edges_hz, sample_rate: int = SAMPLE_RATE) -> SpectroPair:
    """Raise magnitudes in band b to ``gammas[b]``, then rescale to the input's total energy.

    ``band_edges_hz`` is increasing from 0 to Nyquist; bins at exactly Nyquist fall in the last band.
    """
    edges = np.asarray(band_edges_hz, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    nyq = sample_rate / 2
    if edges.ndim != 1 or edges.size < 2 or edges[0] != 0 or edges[-1] != nyq or np.any(np.diff(edges) <= 0):
        raise ValueError(f"band edges must increase strictly from 0 to {nyq} Hz")
    if gammas.shape != (edges.size - 1,) or np.any(gammas <= 0):
        raise ValueError(f"need {edges.size - 1} positive gammas, got {gammas}")
    freqs = np.arange(s.bins) * sample_rate / s.fft_len
    band = np.clip(np.searchsorted(edges, freqs, side="right") - 1, 0, gammas.size - 1)
    if np.all(gammas == 1):
        return SpectroPair(s.magnitude.copy(), s.phase.copy(), s.fft_len, s.win_len, s.hop)
    mag = s.magnitude ** gammas[band][None, :]
    e_in, e_out = float(np.sum(s.magnitude ** 2)), float(np.sum(mag ** 2))
    if e_out > 0:
        mag = mag * math.sqrt(e_in / e_out)
    return SpectroPair(mag, s.phase.copy(), s.fft_len, s.win_len, s.hop)


# -- training ------------------------------------------------------------

def _np_dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


class Trainer:
    """Holds a model, its optimizer state and the step counter."""

    def __init__(self, model: MambaSEUNet, tcfg: TrainConfig, step: int = 0):
        self.model = model
        self.tcfg = tcfg
        self.step = step
        self.state = AdamWState()
        self.params = model.parameters()

    def lr(self) -> float:
        return lr_at(self.step // self.tcfg.steps_per_epoch, self.tcfg.lr0, self.tcfg.lr_decay)

    def train_step(self, pairs: list[tuple[AudioBuffer, AudioBuffer]], lr: float | None = None) -> float:
        """Forward/backward each (clean, noisy) pair, average gradients, one AdamW step."""
        lr = self.lr() if lr is None else lr
        self.model.zero_grad()
        total = 0.0
        ce = self.model.cfg.compress_exp
        for clean, noisy in pairs:
            res = self.model(noisy)
            loss = composite_loss(res, SpectralTarget.from_audio(clean, ce), self.tcfg.weights)
            loss = ops.mul(loss, 1.0 / len(pairs))
            backward(loss)
            total += float(loss.data)
        if not math.isfinite(total):
            raise TrainingDivergedError(self.step, total)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state, lr, wd=self.tcfg.weight_decay)
        self.step += 1
        return total


def draw_batch(tcfg: TrainConfig, step: int, sample_rate: int = SAMPLE_RATE) -> list[tuple[AudioBuffer, AudioBuffer]]:
    """Deterministic synthetic (clean, noisy) segments for one step."""
    rng = np.random.default_rng([tcfg.seed, step])
    dur = tcfg.segment_len / sample_rate
    pairs = []
    for _ in range(tcfg.batch):
        seeds = rng.integers(1 << 31, size=2)
        snr = rng.uniform(tcfg.snr_low, tcfg.snr_high)
        pairs.append(make_pair(MixSpec(snr, int(seeds[0]), int(seeds[1]), tcfg.noise_kind, dur)))
    return pairs


@dataclass
class TrainResult:
    model: MambaSEUNet
    step: int
    seed: int
    trajectory: list[tuple[int, float, float]]


def train_loop(mcfg: ModelConfig, tcfg: TrainConfig, model: MambaSEUNet | None = None,
               start_step: int = 0, loss_csv: str | Path | None = None) -> TrainResult:
    """Run ``tcfg.steps`` optimisation steps on synthetic mixtures."""
    with default_dtype(_np_dtype(tcfg.dtype)):
        if model is None:
            model = MambaSEUNet(mcfg, seed=tcfg.seed)
        trainer = Trainer(model, tcfg, step=start_step)
        traj = []
        for _ in range(tcfg.steps):
            lr = trainer.lr()
            step = trainer.step
            loss = trainer.train_step(draw_batch(tcfg, step), lr)
            traj.append((step, loss, lr))
            log.info("step %d loss %.5f lr %.3g", step, loss, lr)
    if loss_csv is not None:
        write_loss_csv(loss_csv, traj)
    return TrainResult(model, trainer.step, tcfg.seed, traj)


def write_loss_csv(path: str | Path, traj) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in traj:
            w.writerow([step, repr(float(loss)), repr(float(lr))])


@dataclass
class ProbeReport:
    initial_loss: float
    final_loss: float
    si_sdr_noisy: float
    si_sdr_initial: float
    si_sdr_final: float
    losses: list[float]

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss

    @property
    def si_sdr_gain(self) -> float:
        return self.si_sdr_final - self.si_sdr_noisy


TINY = ModelConfig(C1=8, N=1, state_dim=8)


def overfit_probe(mcfg: ModelConfig = TINY, steps: int = 200, duration: float = 0.25, snr_db: float = 5.0,
                  lr: float = 2e-3, seed: int = 0, dtype: str = "float32") -> ProbeReport:
    """Fit one fixed synthetic (clean, noisy) pair and report loss and SI-SDR before/after."""
    clean, noisy = make_pair(MixSpec(snr_db, clean_seed=seed, noise_seed=seed + 1, duration=duration))
    tcfg = TrainConfig(lr0=lr, lr_decay=1.0, segment_len=len(clean), steps=steps, seed=seed,
                       weight_decay=0.0, dtype=dtype)
    with default_dtype(_np_dtype(dtype)):
        model = MambaSEUNet(mcfg, seed=seed)
        trainer = Trainer(model, tcfg)
        enhanced0, _ = model_forward(model, noisy)
        losses = [trainer.train_step([(clean, noisy)], lr) for _ in range(steps)]
        with no_grad():
            final = float(composite_loss(model(noisy), SpectralTarget.from_audio(clean, mcfg.compress_exp),
                                         tcfg.weights).data)
        enhanced, _ = model_forward(model, noisy)
    return ProbeReport(losses[0], final, si_sdr(noisy, clean), si_sdr(enhanced0, clean),
                       si_sdr(enhanced, clean), losses + [final])
