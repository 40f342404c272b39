"""Audio I/O, framing, STFT, band-limiting and frame-grid alignment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from codecflow.errors import FormatError, UsageError

log = logging.getLogger(__name__)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise UsageError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise UsageError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # [frames, bins]
    fft_size: int
    hop: int
    window: str
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.fft_size // 2 + 1) * self.sample_rate / self.fft_size


# ---------------------------------------------------------------- WAV I/O


def load_wav(path) -> Waveform:
    """Read mono PCM16 or float32 WAV into floats in [-1, 1]."""
    path = Path(path)
    if path.stat().st_size == 0:
        raise FormatError(f"{path}: empty file")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data.ndim != 1:
        raise FormatError(f"{path}: {data.shape[1]} channels, only mono is supported")
    if data.dtype == np.int16:
        samples = np.clip(data.astype(np.float64) / 32767.0, -1.0, 1.0)
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported encoding {data.dtype} (PCM16 or float32 only)")
    if samples.size == 0:
        raise FormatError(f"{path}: no samples")
    return Waveform(samples, int(rate))


def save_wav(path, wav: Waveform, encoding: str = "pcm16") -> int:
    """Write ``wav`` clipped to [-1, 1]; returns the number of clipped samples."""
    clipped = np.clip(wav.samples, -1.0, 1.0)
    n_clip = int(np.count_nonzero(clipped != wav.samples))
    if n_clip:
        log.info("save_wav %s: clipped %d samples", path, n_clip)
    if encoding == "pcm16":
        data = np.round(clipped * 32767.0).astype(np.int16)
    elif encoding == "float32":
        data = clipped.astype(np.float32)
    else:
        raise UsageError(f"unknown encoding {encoding!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, wav.sample_rate, data)
    return n_clip


# ---------------------------------------------------------------- framing & STFT


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Frames starting at ``i * hop``; no padding, trailing remainder dropped."""
    x = np.asarray(x)
    if x.size < frame_len:
        return np.zeros((0, frame_len), dtype=x.dtype)
    n = 1 + (x.size - frame_len) // hop
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[: (n - 1) * hop + 1 : hop]


def centered_frames(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """``ceil(len / hop)`` frames, frame ``i`` centred on sample ``(i + 0.5) * hop``.

    The signal is zero-padded so every frame is full length.  This puts the
    frames on the same grid as the codec latent.
    """
    x = np.asarray(x, dtype=np.float64)
    n = math.ceil(x.size / hop)
    if n == 0:
        return np.zeros((0, frame_len))
    left = frame_len // 2 - hop // 2
    starts = np.arange(n) * hop - left
    pad_l = max(0, -int(starts[0]))
    pad_r = max(0, int(starts[-1]) + frame_len - x.size)
    xp = np.pad(x, (pad_l, pad_r))
    idx = starts[:, None] + pad_l + np.arange(frame_len)[None, :]
    return xp[idx]


def get_window(name: str, size: int) -> np.ndarray:
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(size)
    return signal.get_window(name, size, fftbins=True)


def stft(wav: Waveform, fft_size: int = 2048, hop: int = 512, window: str = "hann") -> Spectrogram:
    """Magnitude STFT with uncentred frames: ``1 + (N - fft) // hop`` frames."""
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise UsageError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < hop <= fft_size:
        raise UsageError(f"hop must be in (0, fft_size], got {hop}")
    frames = frame_signal(wav.samples, fft_size, hop)
    win = get_window(window, fft_size)
    mags = np.abs(np.fft.rfft(frames * win, axis=1)) if len(frames) else np.zeros((0, fft_size // 2 + 1))
    return Spectrogram(mags, fft_size, hop, window, wav.sample_rate)


# ---------------------------------------------------------------- band limiting


def lowpass_taps(sample_rate: int, band_hz: float, transition_hz: float = 250.0, atten_db: float = 80.0) -> np.ndarray:
    """Kaiser windowed-sinc low-pass whose stopband starts at ``band_hz``."""
    nyq = sample_rate / 2.0
    numtaps, beta = signal.kaiserord(atten_db, transition_hz / nyq)
    numtaps |= 1  # odd length -> integer group delay
    cutoff = band_hz - transition_hz / 2.0
    return signal.firwin(numtaps, cutoff, window=("kaiser", beta), fs=sample_rate)


def simulate_lr(wav: Waveform, target_band_hz: float, transition_hz: float = 250.0) -> Waveform:
    """Band-limit to ``target_band_hz`` while keeping the sample rate and length.

    Zero-phase FIR (the linear-phase delay is compensated), so LR and HR
    versions stay sample-aligned.
    """
    if not 0 < target_band_hz < wav.sample_rate / 2:
        raise UsageError(f"target band {target_band_hz} Hz must be below Nyquist ({wav.sample_rate / 2} Hz)")
    taps = lowpass_taps(wav.sample_rate, target_band_hz, min(transition_hz, target_band_hz / 2))
    out = signal.fftconvolve(wav.samples, taps, mode="full")
    delay = (taps.size - 1) // 2
    return Waveform(out[delay : delay + wav.samples.size], wav.sample_rate)


# ---------------------------------------------------------------- frame grids


def align_to_frames(labels, source_hop: float, target_len: int, target_hop: float | None = None) -> np.ndarray:
    """Resample per-frame labels onto another grid by nearest frame centre.

    Source frame ``i`` is centred at ``(i + 0.5) * source_hop``.  Without
    ``target_hop`` the target grid spans the same duration as the source.
    Exact ties go to the earlier source frame.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if target_len <= 0:
        raise UsageError(f"target_len must be positive, got {target_len}")
    if labels.size == 0:
        raise UsageError("cannot align an empty label sequence to a non-empty grid")
    if target_hop is None:
        target_hop = labels.size * source_hop / target_len
    centres = (np.arange(target_len) + 0.5) * target_hop
    idx = np.ceil(centres / source_hop - 1.0 - 1e-9).astype(np.int64)
    return labels[np.clip(idx, 0, labels.size - 1)]
