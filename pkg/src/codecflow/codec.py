"""Small convolutional waveform codec with a residual-quantized bottleneck.

The encoder downsamples by the stride schedule (product = latent hop) with
strided convolutions of kernel ``2 * stride``; the decoder mirrors it with
transposed convolutions.  Training uses an L1 waveform term plus a
multi-resolution STFT magnitude term.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from codecflow.dsp import Waveform, get_window
from codecflow.errors import ConfigurationError, UsageError
from codecflow.latents import LatentEmbedding
from codecflow.numerics import Conv1d, ConvTranspose1d, Module, Tensor, no_grad, ops, same_padding
from codecflow.scrvq import QuantizerConfig, QuantizerStack, quantize

log = logging.getLogger(__name__)

STFT_EPS = 1e-7
# He-uniform bound; the default 1/sqrt(fan_in) bound shrinks the signal at every swish layer
CONV_GAIN = math.sqrt(6.0)


@dataclass
class CodecConfig:
    sample_rate: int = 16000
    strides: tuple = (2, 4, 4, 5)
    channels: tuple = (8, 16, 32, 64, 64)
    latent_dim: int = 32
    kernel: int = 7
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)

    @property
    def hop(self) -> int:
        return int(np.prod(self.strides))

    def validate(self) -> None:
        if self.latent_dim <= 0:
            raise ConfigurationError("latent_dim must be positive")
        if len(self.channels) != len(self.strides) + 1:
            raise ConfigurationError(f"need {len(self.strides) + 1} channel widths for {len(self.strides)} strides")
        if any(s < 1 for s in self.strides):
            raise ConfigurationError(f"strides must be >= 1, got {self.strides}")
        if self.quantizer.latent_dim != self.latent_dim:
            raise ConfigurationError("quantizer latent_dim must equal codec latent_dim")


def _split(total: int) -> tuple[int, int]:
    return total // 2, total - total // 2


class ResidualUnit(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator):
        self.conv = Conv1d(channels, channels, kernel, rng, padding=same_padding(kernel), gain=CONV_GAIN)
        self.mix = Conv1d(channels, channels, 1, rng, gain=CONV_GAIN)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.mix(ops.swish(self.conv(ops.swish(x))))


class Encoder(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        ch, k = cfg.channels, cfg.kernel
        self.conv_in = Conv1d(1, ch[0], k, rng, padding=same_padding(k), gain=CONV_GAIN)
        self.units = [ResidualUnit(ch[i], k, rng) for i in range(len(cfg.strides))]
        self.downs = [
            Conv1d(ch[i], ch[i + 1], 2 * s, rng, stride=s, padding=_split(s), gain=CONV_GAIN) for i, s in enumerate(cfg.strides)
        ]
        self.conv_out = Conv1d(ch[-1], cfg.latent_dim, 3, rng, padding=same_padding(3), gain=CONV_GAIN)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        for unit, down in zip(self.units, self.downs):
            h = down(ops.swish(unit(h)))
        return self.conv_out(ops.swish(h))


class Decoder(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        ch, k = cfg.channels, cfg.kernel
        self.conv_in = Conv1d(cfg.latent_dim, ch[-1], k, rng, padding=same_padding(k), gain=CONV_GAIN)
        n = len(cfg.strides)
        self.ups = []
        self.units = []
        for i in reversed(range(n)):
            s = cfg.strides[i]
            self.ups.append(ConvTranspose1d(ch[i + 1], ch[i], 2 * s, rng, stride=s, crop=_split(s), gain=CONV_GAIN))
            self.units.append(ResidualUnit(ch[i], k, rng))
        self.conv_out = Conv1d(ch[0], 1, k, rng, padding=same_padding(k), gain=CONV_GAIN)

    def forward(self, z: Tensor) -> Tensor:
        h = self.conv_in(z)
        for up, unit in zip(self.ups, self.units):
            h = unit(up(ops.swish(h)))
        return self.conv_out(ops.swish(h))


class Codec(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.quantizer = QuantizerStack(cfg.quantizer, rng)

    def pad_to_hop(self, x: np.ndarray) -> np.ndarray:
        """Right-pad ``x[..., N]`` with zeros to a multiple of the hop."""
        n = x.shape[-1]
        target = max(1, math.ceil(n / self.cfg.hop)) * self.cfg.hop
        return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, target - n)])

    def encode_batch(self, x) -> Tensor:
        """``[B, N]`` samples (N a hop multiple) to ``[B, D, N / hop]`` latents."""
        x = ops.as_tensor(x)
        if x.ndim != 2 or x.shape[1] % self.cfg.hop:
            raise UsageError(f"encode_batch wants [B, N] with N a multiple of {self.cfg.hop}, got {x.shape}")
        return self.encoder(ops.reshape(x, (x.shape[0], 1, x.shape[1])))

    def decode_batch(self, z) -> Tensor:
        """``[B, D, T]`` latents to ``[B, T * hop]`` samples (unclipped)."""
        z = ops.as_tensor(z)
        if z.ndim != 3 or z.shape[1] != self.cfg.latent_dim:
            raise ConfigurationError(f"decode wants [B, {self.cfg.latent_dim}, T], got {z.shape}")
        y = self.decoder(z)
        return ops.reshape(y, (y.shape[0], y.shape[2]))

    def encode(self, w: Waveform) -> LatentEmbedding:
        if w.sample_rate != self.cfg.sample_rate:
            raise ConfigurationError(f"codec runs at {self.cfg.sample_rate} Hz, got {w.sample_rate} Hz")
        with no_grad():
            z = self.encode_batch(self.pad_to_hop(w.samples[None]))
        return LatentEmbedding(z.data, self.cfg.hop, self.cfg.sample_rate)

    def decode(self, z) -> Waveform:
        """Waveform of ``T * hop`` samples, clipped to [-1, 1] (count logged)."""
        values = z.values if isinstance(z, LatentEmbedding) else np.asarray(z)
        if values.ndim == 2:
            values = values[None]
        if values.shape[0] != 1:
            raise UsageError("decode returns one waveform; pass a single latent")
        with no_grad():
            y = self.decode_batch(values).data[0].astype(np.float64)
        clipped = np.clip(y, -1.0, 1.0)
        n_clip = int(np.count_nonzero(clipped != y))
        if n_clip:
            log.info("decode: clipped %d samples", n_clip)
        return Waveform(clipped, self.cfg.sample_rate)

    def quantize(self, z, **kwargs):
        return quantize(z, self.quantizer, **kwargs)

    def reconstruct(self, w: Waveform) -> Waveform:
        """``decode(quantize(encode(w)))`` trimmed to the input length."""
        z = self.encode(w)
        with no_grad():
            zq = self.quantize(Tensor(z.values), track_distances=False).quantized.data
        out = self.decode(zq)
        return Waveform(out.samples[: w.samples.size], w.sample_rate)


# ---------------------------------------------------------------- losses

STFT_SIZES = (256, 512, 1024)


@functools.lru_cache(maxsize=16)
def _dft_matrices(n_fft: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(n_fft // 2 + 1)
    n = np.arange(n_fft)
    ang = 2.0 * np.pi * np.outer(n, k) / n_fft
    win = get_window("hann", n_fft)[:, None]
    return (win * np.cos(ang)).astype(dtype), (-win * np.sin(ang)).astype(dtype)


def stft_magnitude(x: Tensor, n_fft: int, hop: int | None = None) -> Tensor:
    """Differentiable Hann-windowed magnitude STFT of ``x[B, N]`` -> ``[B, F, bins]``.

    Signals shorter than one frame are zero padded to ``n_fft``.
    """
    x = ops.as_tensor(x)
    hop = hop or n_fft // 4
    if x.shape[-1] < n_fft:
        x = ops.pad_last(x, 0, n_fft - x.shape[-1])
    frames = ops.frame(x, n_fft, hop)
    cos_m, sin_m = _dft_matrices(n_fft, np.dtype(x.dtype))
    re = ops.matmul(frames, Tensor(cos_m))
    im = ops.matmul(frames, Tensor(sin_m))
    return ops.sqrt(re * re + im * im + STFT_EPS)


def recon_loss(w_hat, w, fft_sizes=STFT_SIZES) -> dict[str, Tensor]:
    """L1 waveform term plus mean multi-resolution STFT magnitude L1.

    Inputs are ``[B, N]`` (or ``[N]``); the shorter one is zero padded.
    """
    w_hat, w = ops.as_tensor(w_hat), ops.as_tensor(w)
    if w_hat.ndim == 1:
        w_hat = ops.reshape(w_hat, (1, -1))
    if w.ndim == 1:
        w = ops.reshape(w, (1, -1))
    n = max(w_hat.shape[-1], w.shape[-1])
    if w_hat.shape[-1] < n:
        w_hat = ops.pad_last(w_hat, 0, n - w_hat.shape[-1])
    if w.shape[-1] < n:
        w = ops.pad_last(w, 0, n - w.shape[-1])
    wave = ops.absolute(w_hat - w).mean()
    spec = None
    for size in fft_sizes:
        term = ops.absolute(stft_magnitude(w_hat, size) - stft_magnitude(w, size)).mean()
        spec = term if spec is None else spec + term
    spec = spec * (1.0 / len(fft_sizes))
    return {"total": wave + spec, "waveform": wave, "stft": spec}


def snr_db(ref: np.ndarray, est: np.ndarray) -> float:
    ref, est = np.asarray(ref, dtype=np.float64), np.asarray(est, dtype=np.float64)
    noise = np.sum((ref - est) ** 2)
    return float(10.0 * np.log10(np.sum(ref**2) / max(noise, 1e-20)))
