"""Log-spectral distance and LR/HR latent cosine-similarity tracks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from codecflow.dsp import Waveform, stft
from codecflow.errors import UsageError

MAG_FLOOR = 1e-8
BANDS = ("full", "lf", "hf")


@dataclass
class LsdConfig:
    fft_size: int = 2048
    hop: int = 512
    window: str = "hann"
    split_hz: float = 4000.0
    # "power" compares log10 |S|^2, "magnitude" compares log10 |S|
    convention: str = "power"

    def validate(self) -> None:
        if self.convention not in ("power", "magnitude"):
            raise UsageError(f"unknown LSD convention {self.convention!r}")


@dataclass
class LsdReport:
    lsd: float
    lsd_lf: float
    lsd_hf: float
    split_hz: float
    fft_size: int
    hop: int
    window: str
    convention: str

    def as_dict(self) -> dict:
        return asdict(self)


def _log_spectra(ref: Waveform, est: Waveform, cfg: LsdConfig):
    if ref.sample_rate != est.sample_rate:
        raise UsageError(f"sample rates differ: {ref.sample_rate} vs {est.sample_rate}")
    cfg.validate()
    n = min(ref.samples.size, est.samples.size)
    a = stft(Waveform(ref.samples[:n], ref.sample_rate), cfg.fft_size, cfg.hop, cfg.window)
    b = stft(Waveform(est.samples[:n], est.sample_rate), cfg.fft_size, cfg.hop, cfg.window)
    if a.n_frames == 0:
        raise UsageError(f"signals of {n} samples are shorter than one {cfg.fft_size}-point frame")
    power = 2.0 if cfg.convention == "power" else 1.0
    la = power * np.log10(np.maximum(a.magnitudes, MAG_FLOOR))
    lb = power * np.log10(np.maximum(b.magnitudes, MAG_FLOOR))
    return la, lb, a.bin_frequencies()


def band_mask(freqs: np.ndarray, band: str, split_hz: float) -> np.ndarray:
    if band == "full":
        return np.ones(freqs.size, dtype=bool)
    if band == "lf":
        return freqs < split_hz
    if band == "hf":
        return freqs >= split_hz
    raise UsageError(f"unknown band {band!r}; expected one of {BANDS}")


def lsd_frames(ref: Waveform, est: Waveform, band: str = "full", config: LsdConfig | None = None) -> np.ndarray:
    """Per-frame RMS log-spectral difference over the bins of ``band``."""
    cfg = config or LsdConfig()
    la, lb, freqs = _log_spectra(ref, est, cfg)
    mask = band_mask(freqs, band, cfg.split_hz)
    return np.sqrt(np.mean((la[:, mask] - lb[:, mask]) ** 2, axis=1))


def lsd(ref: Waveform, est: Waveform, band: str = "full", config: LsdConfig | None = None) -> float:
    """Frame-averaged log-spectral distance; inputs trimmed to the shorter one."""
    return float(np.mean(lsd_frames(ref, est, band, config)))


def lsd_report(ref: Waveform, est: Waveform, config: LsdConfig | None = None) -> LsdReport:
    cfg = config or LsdConfig()
    la, lb, freqs = _log_spectra(ref, est, cfg)
    sq = (la - lb) ** 2
    values = {}
    for band in BANDS:
        mask = band_mask(freqs, band, cfg.split_hz)
        values[band] = float(np.mean(np.sqrt(np.mean(sq[:, mask], axis=1))))
    return LsdReport(
        lsd=values["full"],
        lsd_lf=values["lf"],
        lsd_hf=values["hf"],
        split_hz=cfg.split_hz,
        fft_size=cfg.fft_size,
        hop=cfg.hop,
        window=cfg.window,
        convention=cfg.convention,
    )


def embedding_cosine_track(z_l: np.ndarray, z_h: np.ndarray) -> np.ndarray:
    """Per-frame cosine similarity of ``[D, T]`` or ``[B, D, T]`` latents.

    Frames where either vector has zero norm get similarity 0.
    """
    z_l = np.asarray(z_l, dtype=np.float64)
    z_h = np.asarray(z_h, dtype=np.float64)
    if z_l.shape != z_h.shape:
        raise UsageError(f"latent shapes differ: {z_l.shape} vs {z_h.shape}")
    if z_l.ndim not in (2, 3):
        raise UsageError(f"expected [D, T] or [B, D, T] latents, got {z_l.shape}")
    axis = -2
    dot = np.sum(z_l * z_h, axis=axis)
    norms = np.linalg.norm(z_l, axis=axis) * np.linalg.norm(z_h, axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norms > 0, dot / np.where(norms > 0, norms, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)
