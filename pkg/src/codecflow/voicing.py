"""Frame-level silence / unvoiced / voiced labels from a waveform.

Two branches run on the same frame grid (frame ``i`` centred at
``(i + 0.5) * hop``): an adaptive RMS silence gate and an autocorrelation
voicing detector.  Their product is aligned to the latent length and
smoothed with a centred majority vote.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from codecflow import kernels
from codecflow.dsp import Waveform, align_to_frames, centered_frames
from codecflow.errors import UsageError

SILENCE, UNVOICED, VOICED = 0, 1, 2
DB_FLOOR = -100.0


@dataclass
class VoicingConfig:
    frame_ms: float = 25.0
    hop: int = 160
    f0_min: float = 50.0
    f0_max: float = 800.0
    voicing_threshold: float = 0.45
    # a short-lag ACF peak this close to the in-range peak means F0 > f0_max
    subharmonic_ratio: float = 0.9
    silence_percentile: float = 10.0
    silence_margin_db: float = 10.0
    # frames within this many dB of the loudest frame are never silent
    silence_headroom_db: float = 10.0
    smooth_width: int = 5

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_ms * 1e-3 * sample_rate))


@dataclass
class VoicingSequence:
    labels: np.ndarray
    frame_hop: int
    frame_len: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and not np.isin(self.labels, (SILENCE, UNVOICED, VOICED)).all():
            raise UsageError("voicing labels must be in {0, 1, 2}")

    def __len__(self) -> int:
        return self.labels.size


def frame_energy_db(w: Waveform, frame_len: int, hop: int) -> np.ndarray:
    """RMS level in dBFS per centred frame, floored at ``DB_FLOOR``.

    Edge frames average only over samples inside the signal, so zero padding
    does not make the first and last frames look quieter than they are.
    """
    frames = centered_frames(w.samples, frame_len, hop)
    if not len(frames):
        return np.zeros(0)
    counts = centered_frames(np.ones_like(w.samples), frame_len, hop).sum(axis=1)
    rms = np.sqrt((frames**2).sum(axis=1) / np.maximum(counts, 1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms)
    return np.maximum(db, DB_FLOOR)


def silence_mask(
    w: Waveform,
    frame_len: int,
    hop: int,
    percentile: float = 10.0,
    margin_db: float = 10.0,
    headroom_db: float = 10.0,
) -> np.ndarray:
    """1 for sounding frames, 0 for silent ones.

    A frame is silent when its RMS level (dBFS, floored at -100) lies
    strictly below ``percentile(levels) + margin_db``.  The threshold is
    capped at ``headroom_db`` below the loudest frame, so a steady signal is
    never silent by its own statistics; frames at the floor are always
    silent.
    """
    db = frame_energy_db(w, frame_len, hop)
    if db.size == 0:
        return np.zeros(0, dtype=np.int64)
    threshold = min(np.percentile(db, percentile) + margin_db, db.max() - headroom_db)
    silent = (db < threshold) | (db <= DB_FLOOR)
    return (~silent).astype(np.int64)


def _hann_acf(n: int) -> np.ndarray:
    win = np.hanning(n + 2)[1:-1]
    acf = np.correlate(win, win, mode="full")[n - 1 :]
    return np.maximum(acf / acf[0], 1e-6)


def acf_scores(w: Waveform, frame_len: int, hop: int, f0_min: float = 50.0, f0_max: float = 800.0):
    """Per-frame (in-range ACF peak, strongest short-lag ACF local peak).

    Frames are mean-removed and Hann-windowed, the autocorrelation is
    normalised by lag-0 energy and divided by the window's own normalised
    autocorrelation.  The analysis window is widened to three periods of
    ``f0_min`` when ``frame_len`` is shorter, so the longest lag stays
    measurable; frame centres are unchanged.
    """
    if f0_min >= f0_max:
        raise UsageError(f"f0_min ({f0_min}) must be below f0_max ({f0_max})")
    sr = w.sample_rate
    if sr < 2 * f0_max:
        raise UsageError(f"sample rate {sr} is below 2 * f0_max ({2 * f0_max})")
    lag_min = max(2, int(math.floor(sr / f0_max)))
    lag_max = int(math.ceil(sr / f0_min))
    win_len = max(frame_len, int(math.ceil(3 * sr / f0_min)))
    frames = centered_frames(w.samples, win_len, hop)
    frames = frames - frames.mean(axis=1, keepdims=True)
    frames = frames * np.hanning(win_len + 2)[1:-1]
    acf = kernels.normalized_acf(frames, lag_max + 1, _hann_acf(win_len))
    in_range = acf[:, lag_min : lag_max + 1].max(axis=1) if len(acf) else np.zeros(0)
    # local maxima strictly below lag_min
    mid = acf[:, 1:lag_min]
    is_peak = (mid >= acf[:, 0 : lag_min - 1]) & (mid > acf[:, 2 : lag_min + 1])
    short = np.where(is_peak, mid, 0.0).max(axis=1) if len(acf) else np.zeros(0)
    return in_range, short


def f0_vuv(
    w: Waveform,
    frame_len: int,
    hop: int,
    f0_min: float = 50.0,
    f0_max: float = 800.0,
    threshold: float = 0.45,
    subharmonic_ratio: float = 0.9,
) -> np.ndarray:
    """2 where a periodicity with F0 in [f0_min, f0_max] is found, else 1.

    A frame is voiced when the in-range autocorrelation peak exceeds
    ``threshold`` and no shorter-lag local peak (a fundamental above
    ``f0_max``) reaches ``subharmonic_ratio`` of it.
    """
    in_range, short = acf_scores(w, frame_len, hop, f0_min, f0_max)
    voiced = (in_range > threshold) & (short < subharmonic_ratio * in_range)
    return np.where(voiced, VOICED, UNVOICED).astype(np.int64)


def extract_voicing(w: Waveform, target_len: int, config: VoicingConfig | None = None) -> VoicingSequence:
    """Silence-gated V/UV labels on a ``target_len`` grid, majority smoothed."""
    cfg = config or VoicingConfig()
    frame_len = cfg.frame_len(w.sample_rate)
    if w.samples.size == 0:
        raise UsageError("cannot extract voicing from an empty waveform")
    mask = silence_mask(w, frame_len, cfg.hop, cfg.silence_percentile, cfg.silence_margin_db, cfg.silence_headroom_db)
    uv = f0_vuv(w, frame_len, cfg.hop, cfg.f0_min, cfg.f0_max, cfg.voicing_threshold, cfg.subharmonic_ratio)
    labels = align_to_frames(mask * uv, cfg.hop, target_len)
    labels = kernels.majority_smooth(labels, cfg.smooth_width)
    return VoicingSequence(labels, cfg.hop, frame_len)
