"""Analysis outputs: voicing label files, codebook statistics, cosine tracks and plots."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from codecflow.codec import Codec  # noqa: E402
from codecflow.dsp import Waveform, stft  # noqa: E402
from codecflow.metrics import embedding_cosine_track  # noqa: E402
from codecflow.numerics import no_grad  # noqa: E402
from codecflow.pipeline.train import read_loss_log  # noqa: E402
from codecflow.scrvq import codebook_stats  # noqa: E402
from codecflow.voicing import SILENCE, UNVOICED, VOICED, VoicingSequence  # noqa: E402

LABEL_NAMES = {SILENCE: "S", UNVOICED: "U", VOICED: "V"}


def write_voicing_labels(path, seq: VoicingSequence) -> None:
    """One label per line, frame order (0 silence, 1 unvoiced, 2 voiced)."""
    Path(path).write_text("".join(f"{int(lab)}\n" for lab in seq.labels))


def read_voicing_labels(path) -> np.ndarray:
    return np.array([int(ln) for ln in Path(path).read_text().split()], dtype=np.int64)


def encode_pair(codec: Codec, hr: np.ndarray, lr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``[D, T]`` latents of an HR/LR pair through the same encoder."""
    with no_grad():
        z_h = codec.encode_batch(codec.pad_to_hop(hr[None].astype(np.float32))).data[0]
        z_l = codec.encode_batch(codec.pad_to_hop(lr[None].astype(np.float32))).data[0]
    return z_l, z_h


def cosine_by_label(tracks: list, labels: list) -> dict:
    """Mean cosine similarity over all frames carrying each label."""
    cos = np.concatenate(tracks)
    lab = np.concatenate([np.asarray(x)[: t.size] for x, t in zip(labels, tracks)])
    out = {}
    for value, name in LABEL_NAMES.items():
        sel = lab == value
        out[name] = float(cos[sel].mean()) if sel.any() else float("nan")
    return out


def codebook_rows(codec: Codec, z: np.ndarray) -> list:
    stats = codebook_stats(codec.quantizer, z)
    return [
        {"stage": i, "utilization": u, "residual_energy": e, "mean_gap": g}
        for i, (u, e, g) in enumerate(zip(stats["utilization"], stats["energies"], stats["mean_gap"]))
    ]


# ---------------------------------------------------------------- plots


def plot_spectrogram(path, wav: Waveform, title: str = "", fft_size: int = 512, hop: int = 128) -> np.ndarray:
    """Log-magnitude spectrogram PNG; returns the dB matrix ``[bins, frames]``."""
    spec = stft(wav, fft_size, hop)
    db = 20 * np.log10(np.maximum(spec.magnitudes.T, 1e-8))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    extent = (0, spec.n_frames * hop / wav.sample_rate, 0, wav.sample_rate / 2000)
    im = ax.imshow(db, origin="lower", aspect="auto", extent=extent, vmin=db.max() - 90, vmax=db.max(), cmap="magma")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("frequency [kHz]")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="dB")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return db


def plot_losses(path, loss_csv) -> None:
    rows = read_loss_log(loss_csv)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for split, style in (("train", "-"), ("val", "o-")):
        pts = [(int(r["step"]), float(r["total"])) for r in rows if r["split"] == split and r["total"]]
        if pts:
            x, y = zip(*pts)
            ax.plot(x, y, style, label=split, alpha=0.5 if split == "train" else 1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_cosine_track(path, z_l: np.ndarray, z_h: np.ndarray, labels: np.ndarray, hop_s: float) -> np.ndarray:
    """Cosine similarity per frame with the voicing labels shaded underneath."""
    cos = embedding_cosine_track(z_l, z_h)
    t = np.arange(cos.size) * hop_s
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(7, 3.5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    ax.plot(t, cos, lw=1)
    ax.set_ylabel("cos(z_l, z_h)")
    ax.set_ylim(-1, 1)
    ax2.step(t, labels[: cos.size], where="post")
    ax2.set_yticks([SILENCE, UNVOICED, VOICED], [LABEL_NAMES[k] for k in (SILENCE, UNVOICED, VOICED)])
    ax2.set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return cos
