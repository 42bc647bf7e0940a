"""Magnitude/phase U-Net with TS-Mamba stages."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.nn import Conv2d, ConvTranspose2d, Module, parameter
from .deform import DeformConv2d
from .mamba import TsMamba
from .signal import HOP, N_BINS, WIN_LEN, AudioBuffer, SpectroPair, frame_count, istft_tensor, stft

KAPPA = 2.0
WIDTH_RULES = ("fractions", "doubling")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``width_rule`` picks the three level widths: ``fractions`` gives
    [C1, C1 // 2, C1 // 3]; ``doubling`` gives [C1, 2 C1, 4 C1].
    """

    C1: int = 16
    N: int = 2
    state_dim: int = 16
    compress_exp: float = 0.3
    deformable: bool = True
    flip_back: bool = True
    width_rule: str = "doubling"

    def __post_init__(self):
        if self.C1 < 3:
            raise ValueError(f"C1 must be >= 3, got {self.C1}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.state_dim < 1:
            raise ValueError(f"state_dim must be >= 1, got {self.state_dim}")
        if not self.compress_exp > 0:
            raise ValueError(f"compress_exp must be > 0, got {self.compress_exp}")
        if self.width_rule not in WIDTH_RULES:
            raise ValueError(f"width_rule must be one of {WIDTH_RULES}, got {self.width_rule!r}")

    @property
    def widths(self) -> tuple[int, int, int]:
        c1 = self.C1
        if self.width_rule == "fractions":
            return c1, max(1, c1 // 2), max(1, c1 // 3)
        return c1, 2 * c1, 4 * c1

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- building blocks -----------------------------------------------------

class DilatedDenseNet(Module):
    """Densely connected 3x3 convs; layer i dilates time by 2**i and sees all earlier outputs."""

    def __init__(self, c: int, rng: np.random.Generator, depth: int = 4, dilation_factor: int = 2):
        self.c, self.depth = c, depth
        self.layers = [
            Conv2d(c * (i + 1), c, 3, rng, dilation=(dilation_factor ** i, 1), padding=(dilation_factor ** i, 1))
            for i in range(depth)
        ]

    def forward(self, x: Tensor) -> Tensor:
        skip = x
        out = x
        for layer in self.layers:
            out = ops.silu(layer(skip))
            skip = ops.concat([out, skip], axis=-3)
        return out

    def receptive_field(self) -> int:
        return 1 + 2 * sum(layer.dilation[0] for layer in self.layers)

    def flops(self, h: int, w: int) -> int:
        return sum(layer.flops(h, w) for layer in self.layers)


def dilated_densenet(net: DilatedDenseNet, x: Tensor) -> Tensor:
    return net(x)


class FeatureEncoder(Module):
    """2 input planes -> C1 channels, dense block, then stride 2 along frequency."""

    def __init__(self, c1: int, rng: np.random.Generator):
        self.conv_in = Conv2d(2, c1, 3, rng, padding=1)
        self.dense = DilatedDenseNet(c1, rng)
        self.conv_down = Conv2d(c1, c1, (1, 3), rng, stride=(1, 2), padding=(0, 1))

    def forward(self, planes: Tensor) -> Tensor:
        x = ops.silu(self.conv_in(planes))
        x = self.dense(x)
        return ops.silu(self.conv_down(x))

    def flops(self, t: int, f: int) -> int:
        return self.conv_in.flops(t, f) + self.dense.flops(t, f) + self.conv_down.flops(t, f)


class PatchEmbed(Module):
    """Depthwise 3x3 -> pointwise 1x1 -> deformable (or plain) 3x3, residual when widths match."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, deformable: bool = True):
        self.depthwise = Conv2d(c_in, c_in, 3, rng, padding=1, groups=c_in)
        self.pointwise = Conv2d(c_in, c_out, 1, rng)
        self.spatial = DeformConv2d(c_out, c_out, rng) if deformable else Conv2d(c_out, c_out, 3, rng, padding=1)
        self.residual = c_in == c_out

    def forward(self, x: Tensor) -> Tensor:
        y = self.spatial(self.pointwise(self.depthwise(x)))
        return y + x if self.residual else y

    def flops(self, h: int, w: int) -> int:
        return self.depthwise.flops(h, w) + self.pointwise.flops(h, w) + self.spatial.flops(h, w)


class Downsample(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, 2, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError(f"downsample needs even extents, got {x.shape}")
        return self.conv(x)

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h, w)


class Upsample(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = ConvTranspose2d(c_in, c_out, 2, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h, w)


class Stage(Module):
    """N TS-Mamba blocks applied to a (C, T, F) map."""

    def __init__(self, c: int, n_blocks: int, state_dim: int, rng: np.random.Generator, flip_back: bool = True):
        self.blocks = [TsMamba(c, state_dim, rng, flip_back) for _ in range(n_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        y = ops.permute(x, (1, 2, 0))
        for blk in self.blocks:
            y = blk(y)
        return ops.permute(y, (2, 0, 1))

    def flops(self, h: int, w: int) -> int:
        return sum(b.flops(h, w) for b in self.blocks)


def l_sigmoid(v: Tensor, alpha: Tensor, kappa: float = KAPPA) -> Tensor:
    """``kappa / (1 + exp(-alpha * v))`` with per-frequency slope ``alpha`` over the last axis."""
    return ops.mul(ops.sigmoid(ops.mul(v, alpha)), kappa)


class MagnitudeDecoder(Module):
    def __init__(self, c1: int, rng: np.random.Generator, n_bins: int = N_BINS):
        self.dense = DilatedDenseNet(c1, rng)
        self.up = ConvTranspose2d(c1, c1, (1, 2), rng, stride=(1, 2))
        self.proj = Conv2d(c1, 1, 1, rng)
        self.alpha = parameter(np.ones(n_bins))

    def forward(self, x: Tensor) -> Tensor:
        """(C1, T, F/2) -> mask (T, F) in (0, kappa)."""
        y = ops.silu(self.up(self.dense(x)))
        v = self.proj(y)
        return l_sigmoid(ops.reshape(v, v.shape[-2:]), self.alpha)

    def flops(self, t: int, f_half: int) -> int:
        return self.dense.flops(t, f_half) + self.up.flops(t, f_half) + self.proj.flops(t, 2 * f_half) + 4 * t * 2 * f_half


class PhaseDecoder(Module):
    def __init__(self, c1: int, rng: np.random.Generator):
        self.dense = DilatedDenseNet(c1, rng)
        self.up = ConvTranspose2d(c1, c1, (1, 2), rng, stride=(1, 2))
        self.proj_p = Conv2d(c1, 1, 1, rng)
        self.proj_q = Conv2d(c1, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        """(C1, T, F/2) -> phase (T, F) in (-pi, pi]."""
        y = ops.silu(self.up(self.dense(x)))
        p, q = self.proj_p(y), self.proj_q(y)
        return ops.atan2(ops.reshape(p, p.shape[-2:]), ops.reshape(q, q.shape[-2:]))

    def flops(self, t: int, f_half: int) -> int:
        f = 2 * f_half
        return (self.dense.flops(t, f_half) + self.up.flops(t, f_half)
                + self.proj_p.flops(t, f) + self.proj_q.flops(t, f))


def magnitude_decode(dec: MagnitudeDecoder, x: Tensor) -> Tensor:
    return dec(x)


def phase_decode(dec: PhaseDecoder, x: Tensor) -> Tensor:
    return dec(x)


# -- full network --------------------------------------------------------

class ForwardResult(NamedTuple):
    waveform: Tensor          # (L,)
    compressed_mag: Tensor    # (T, F), mask * compressed noisy magnitude
    magnitude: Tensor         # (T, F), decompressed
    phase: Tensor             # (T, F)
    mask: Tensor              # (T, F)


class MambaSEUNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c1, c2, c3 = cfg.widths
        n, s, fb = cfg.N, cfg.state_dim, cfg.flip_back
        self.encoder = FeatureEncoder(c1, rng)
        self.enc1 = Stage(c1, n, s, rng, fb)
        self.down1 = Downsample(c1, c2, rng)
        self.embed2 = PatchEmbed(c2, c2, rng, cfg.deformable)
        self.enc2 = Stage(c2, n, s, rng, fb)
        self.down2 = Downsample(c2, c3, rng)
        self.embed3 = PatchEmbed(c3, c3, rng, cfg.deformable)
        self.bottleneck = Stage(c3, n, s, rng, fb)
        self.up2 = Upsample(c3, c2, rng)
        self.fuse2 = Conv2d(2 * c2, c2, 1, rng)
        self.dec2 = Stage(c2, n, s, rng, fb)
        self.up1 = Upsample(c2, c1, rng)
        self.fuse1 = Conv2d(2 * c1, c1, 1, rng)
        self.dec1 = Stage(c1, n, s, rng, fb)
        self.mag_decoder = MagnitudeDecoder(c1, rng)
        self.phase_decoder = PhaseDecoder(c1, rng)

    def encode_input(self, spec: SpectroPair) -> tuple[Tensor, np.ndarray]:
        comp = spec.magnitude ** self.cfg.compress_exp
        planes = np.stack([comp, spec.phase])
        return Tensor(planes), comp

    def feature_encode(self, spec: SpectroPair) -> Tensor:
        """Encoder output as (T, F/2, C1)."""
        planes, _ = self.encode_input(spec)
        return ops.permute(self.encoder(planes), (1, 2, 0))

    def unet(self, x: Tensor) -> Tensor:
        """(C1, T, F/2) -> same shape; T is reflect-padded to a multiple of 4 internally."""
        t = x.shape[1]
        extra = (-t) % 4
        if extra:
            x = ops.pad(x, [(0, 0), (0, extra), (0, 0)], mode="reflect")
        s1 = self.enc1(x)
        s2 = self.enc2(self.embed2(self.down1(s1)))
        y = self.bottleneck(self.embed3(self.down2(s2)))
        y = self.dec2(self.fuse2(ops.concat([self.up2(y), s2], axis=0)))
        y = self.dec1(self.fuse1(ops.concat([self.up1(y), s1], axis=0)))
        return ops.slice_axis(y, 1, 0, t) if extra else y

    def forward_spec(self, spec: SpectroPair, out_len: int) -> ForwardResult:
        planes, comp = self.encode_input(spec)
        feat = self.unet(self.encoder(planes))
        mask = self.mag_decoder(feat)
        phase = self.phase_decoder(feat)
        comp_out = ops.mul(mask, Tensor(comp, dtype=mask.dtype))
        mag = ops.power(comp_out, 1.0 / self.cfg.compress_exp)
        wave = istft_tensor(ops.mul(mag, ops.cos(phase)), ops.mul(mag, ops.sin(phase)), out_len)
        return ForwardResult(wave, comp_out, mag, phase, mask)

    def forward(self, noisy: AudioBuffer | np.ndarray) -> ForwardResult:
        samples = noisy.samples if isinstance(noisy, AudioBuffer) else np.asarray(noisy, float)
        if samples.size < WIN_LEN:
            raise ValueError(f"input has {samples.size} samples; at least {WIN_LEN} required")
        return self.forward_spec(stft(samples), samples.size)

    def flops(self, n_samples: int) -> dict[str, int]:
        t = frame_count(n_samples, HOP)
        tp = t + (-t) % 4
        f, fh = N_BINS, N_BINS // 2
        out = {
            "encoder": self.encoder.flops(t, f),
            "enc1": self.enc1.flops(tp, fh),
            "down1": self.down1.flops(tp, fh),
            "embed2": self.embed2.flops(tp // 2, fh // 2),
            "enc2": self.enc2.flops(tp // 2, fh // 2),
            "down2": self.down2.flops(tp // 2, fh // 2),
            "embed3": self.embed3.flops(tp // 4, fh // 4),
            "bottleneck": self.bottleneck.flops(tp // 4, fh // 4),
            "up2": self.up2.flops(tp // 4, fh // 4),
            "fuse2": self.fuse2.flops(tp // 2, fh // 2),
            "dec2": self.dec2.flops(tp // 2, fh // 2),
            "up1": self.up1.flops(tp // 2, fh // 2),
            "fuse1": self.fuse1.flops(tp, fh),
            "dec1": self.dec1.flops(tp, fh),
            "mag_decoder": self.mag_decoder.flops(t, fh),
            "phase_decoder": self.phase_decoder.flops(t, fh),
        }
        return out


def build_model(cfg: ModelConfig, seed: int = 0) -> MambaSEUNet:
    return MambaSEUNet(cfg, seed)


def model_forward(model: MambaSEUNet, noisy: AudioBuffer) -> tuple[AudioBuffer, SpectroPair]:
    """Inference: enhanced waveform (same length as ``noisy``) and its spectrum."""
    with no_grad():
        res = model(noisy)
    spec = SpectroPair(res.magnitude.data.astype(np.float64), res.phase.data.astype(np.float64))
    return AudioBuffer(res.waveform.data.astype(np.float64), noisy.sample_rate), spec


def count_params(cfg: ModelConfig) -> dict[str, int]:
    """Exact parameter totals per top-level submodule, plus ``total``."""
    model = MambaSEUNet(cfg)
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = name.split(".", 1)[0]
        out[key] = out.get(key, 0) + p.size
    out["total"] = sum(out.values())
    return out


def estimate_flops(cfg: ModelConfig, duration_s: float, sample_rate: int = 16000) -> dict[str, int]:
    """Analytic FLOPs (2 per multiply-add) per submodule, plus ``total``."""
    model = MambaSEUNet(cfg)
    out = model.flops(int(round(duration_s * sample_rate)))
    out["total"] = sum(out.values())
    return out
