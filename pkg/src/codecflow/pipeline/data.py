"""Synthetic speech-like corpus, manifests and in-memory training sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from codecflow.dsp import Waveform, load_wav, save_wav, simulate_lr
from codecflow.errors import ConfigurationError, UsageError
from codecflow.voicing import SILENCE, UNVOICED, VOICED

MANIFEST_FIELDS = ("id", "hr_path", "lr_path", "split")
SEGMENT_FIELDS = ("start", "end", "label")
NOISE_FLOOR = 1e-4

# segment durations in seconds (min, max)
VOICED_DUR = (0.15, 0.40)
UNVOICED_DUR = (0.08, 0.20)
SILENCE_DUR = (0.10, 0.25)


@dataclass
class ManifestEntry:
    id: str
    hr_path: str
    lr_path: str
    split: str


@dataclass
class Manifest:
    entries: list
    root: Path

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("manifest ids must be unique")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in manifest.entries:
            writer.writerow([e.id, e.hr_path, e.lr_path, e.split])


def read_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    entries = []
    for row in rows:
        missing = [k for k in ("id", "hr_path", "split") if not row.get(k)]
        if missing:
            raise ConfigurationError(f"{path}: row {row} lacks {missing}")
        entries.append(ManifestEntry(row["id"], row["hr_path"], row.get("lr_path") or "", row["split"]))
    manifest = Manifest(entries, path.parent)
    if check_files:
        for e in entries:
            for rel in (e.hr_path, e.lr_path):
                if rel and not manifest.resolve(rel).exists():
                    raise ConfigurationError(f"{path}: {rel} referenced by {e.id} does not exist")
    return manifest


# ---------------------------------------------------------------- generators


def _fade(n: int, sr: int, ms: float = 10.0) -> np.ndarray:
    k = min(n // 2, int(sr * ms / 1000))
    env = np.ones(n)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = ramp
        env[n - k :] = ramp[::-1]
    return env


def harmonic_tone(rng: np.random.Generator, n: int, sr: int, f0_range=(80.0, 300.0)) -> np.ndarray:
    """Harmonic complex with a gliding F0 and a smoothly decaying spectrum.

    Harmonics extend to 7.8 kHz so the tone has energy on both sides of a
    4 kHz split.
    """
    f0 = rng.uniform(*f0_range)
    glide = rng.uniform(-0.1, 0.1)
    f_inst = f0 * (1.0 + glide * np.linspace(-0.5, 0.5, n))
    phase = 2 * np.pi * np.cumsum(f_inst) / sr
    tilt = rng.uniform(1500.0, 3000.0)
    out = np.zeros(n)
    for h in range(1, int(7800 / (f0 * 1.05)) + 1):
        amp = np.exp(-h * f0 / tilt) / np.sqrt(h)
        out += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return out / np.max(np.abs(out))


def band_noise(rng: np.random.Generator, n: int, sr: int, band=(2000.0, 7500.0)) -> np.ndarray:
    sos = signal.butter(6, band, btype="bandpass", fs=sr, output="sos")
    x = signal.sosfiltfilt(sos, rng.standard_normal(n + 512))[256 : 256 + n]
    return x / np.max(np.abs(x))


def speechlike_utterance(rng: np.random.Generator, duration_s: float, sr: int):
    """Samples and ``(start, end, label)`` segments of one utterance."""
    n_total = int(round(duration_s * sr))
    x = np.zeros(n_total)
    segments = []
    pos = 0
    order = [SILENCE]
    while pos < n_total:
        label = order[-1]
        lo, hi = {VOICED: VOICED_DUR, UNVOICED: UNVOICED_DUR, SILENCE: SILENCE_DUR}[label]
        n = min(int(rng.uniform(lo, hi) * sr), n_total - pos)
        if label == VOICED:
            x[pos : pos + n] = rng.uniform(0.3, 0.7) * harmonic_tone(rng, n, sr) * _fade(n, sr)
        elif label == UNVOICED:
            x[pos : pos + n] = rng.uniform(0.05, 0.15) * band_noise(rng, n, sr) * _fade(n, sr)
        segments.append((pos, pos + n, label))
        pos += n
        choices = [lab for lab in (SILENCE, UNVOICED, VOICED) if lab != label]
        order.append(choices[rng.integers(len(choices))])
    x += NOISE_FLOOR * rng.standard_normal(n_total)
    return x, segments


def tone_utterance(rng: np.random.Generator, duration_s: float, sr: int):
    """A single sinusoid with random frequency, level and phase."""
    n = int(round(duration_s * sr))
    f = rng.uniform(80.0, 300.0)
    x = rng.uniform(0.3, 0.7) * np.sin(2 * np.pi * f * np.arange(n) / sr + rng.uniform(0, 2 * np.pi))
    return x, [(0, n, VOICED)]


def segment_frame_labels(segments, n_frames: int, hop: int) -> np.ndarray:
    """Ground-truth label of the segment holding each frame centre."""
    centres = (np.arange(n_frames) + 0.5) * hop
    labels = np.zeros(n_frames, dtype=np.int64)
    for start, end, label in segments:
        labels[(centres >= start) & (centres < end)] = label
    return labels


def boundary_mask(segments, n_frames: int, hop: int, guard: int = 2) -> np.ndarray:
    """True for frames at least ``guard + 1`` frames away from a segment boundary."""
    keep = np.ones(n_frames, dtype=bool)
    for start, _, _ in segments[1:]:
        b = int(round(start / hop))
        keep[max(0, b - guard - 1) : b + guard + 1] = False
    return keep


def gen_synthetic_corpus(out_dir, data_cfg, sample_rate: int, seed: int) -> Manifest:
    """Write HR/LR WAVs, per-utterance segment CSVs and ``manifest.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    make = {"speechlike": speechlike_utterance, "tones": tone_utterance}.get(data_cfg.kind)
    if make is None:
        raise ConfigurationError(f"unknown corpus kind {data_cfg.kind!r}")
    entries = []
    splits = [("train", data_cfg.n_train), ("val", data_cfg.n_val), ("test", data_cfg.n_test)]
    index = 0
    for split, count in splits:
        for _ in range(count):
            rng = np.random.default_rng([seed, index])
            x, segments = make(rng, data_cfg.duration_s, sample_rate)
            uid = f"utt{index:04d}"
            hr = Waveform(x, sample_rate)
            lr = simulate_lr(hr, data_cfg.lr_band_hz)
            save_wav(out_dir / "wav" / f"{uid}_hr.wav", hr)
            save_wav(out_dir / "wav" / f"{uid}_lr.wav", lr)
            with open(out_dir / "wav" / f"{uid}_segments.csv", "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(SEGMENT_FIELDS)
                writer.writerows(segments)
            entries.append(ManifestEntry(uid, f"wav/{uid}_hr.wav", f"wav/{uid}_lr.wav", split))
            index += 1
    manifest = Manifest(entries, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def read_segments(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["start"]), int(r["end"]), int(r["label"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- in-memory sets


@dataclass
class Utterance:
    id: str
    hr: np.ndarray
    lr: np.ndarray


def load_split(manifest: Manifest, split: str, sample_rate: int, lr_band_hz: float) -> list:
    """HR and LR samples of one split; LR is simulated when not listed."""
    out = []
    for e in manifest.split(split):
        hr = load_wav(manifest.resolve(e.hr_path))
        if hr.sample_rate != sample_rate:
            raise ConfigurationError(f"{e.id}: {hr.sample_rate} Hz audio, config expects {sample_rate} Hz")
        if e.lr_path:
            lr = load_wav(manifest.resolve(e.lr_path))
            if lr.sample_rate != sample_rate or lr.samples.size != hr.samples.size:
                raise ConfigurationError(f"{e.id}: LR file does not match its HR file in rate or length")
        else:
            lr = simulate_lr(hr, lr_band_hz)
        out.append(Utterance(e.id, hr.samples.astype(np.float32), lr.samples.astype(np.float32)))
    if not out:
        raise UsageError(f"manifest has no {split!r} utterances")
    return out


def crop_batch(utts: list, batch: int, n_samples: int, hop: int, rng: np.random.Generator):
    """Random hop-aligned crops: ``(hr[B, N], lr[B, N], utt index[B], start frame[B])``.

    Utterances shorter than ``n_samples`` are zero padded.
    """
    hr = np.zeros((batch, n_samples), dtype=np.float32)
    lr = np.zeros((batch, n_samples), dtype=np.float32)
    which = rng.integers(0, len(utts), size=batch)
    starts = np.zeros(batch, dtype=np.int64)
    for b, i in enumerate(which):
        u = utts[i]
        max_frame = max(0, (u.hr.size - n_samples) // hop)
        k = int(rng.integers(0, max_frame + 1))
        seg_hr = u.hr[k * hop : k * hop + n_samples]
        hr[b, : seg_hr.size] = seg_hr
        lr[b, : seg_hr.size] = u.lr[k * hop : k * hop + n_samples]
        starts[b] = k
    return hr, lr, which, starts
