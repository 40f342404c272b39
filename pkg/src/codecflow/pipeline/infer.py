"""End-to-end inference and LSD evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from codecflow.dsp import Waveform, load_wav, save_wav
from codecflow.errors import UsageError
from codecflow.flow import convert
from codecflow.latents import LatentEmbedding
from codecflow.metrics import lsd_report
from codecflow.numerics import no_grad
from codecflow.pipeline.checkpoint import Checkpoint, load_checkpoint
from codecflow.pipeline.data import Manifest, load_split
from codecflow.pipeline.train import load_models
from codecflow.scrvq import quantize
from codecflow.voicing import extract_voicing

log = logging.getLogger(__name__)

TIMED = ("voicing", "encode", "convert", "quantize", "decode")
REPORT_FIELDS = ("input", "output", "stage", "seed", "steps", "guidance", "n_samples", "n_frames") + tuple(
    f"t_{k}" for k in TIMED
) + ("t_total",)
EVAL_FIELDS = ("id", "lsd", "lsd_lf", "lsd_hf", "input_lsd", "input_lsd_lf", "input_lsd_hf", "visqol", "mos", "col")
NOT_COMPUTED = "n/a"


@dataclass
class Enhanced:
    wave: Waveform
    labels: np.ndarray
    z_l: np.ndarray
    z_h: np.ndarray
    seed: int
    steps: int
    guidance: float
    timings: dict = field(default_factory=dict)


class Enhancer:
    """Models of one checkpoint, ready to extend LR waveforms."""

    def __init__(self, ckpt: Checkpoint):
        if ckpt.stage == "codec_pretrain":
            raise UsageError("inference needs a fec or finetune checkpoint, got codec_pretrain")
        if ckpt.stage == "fec":
            log.warning("running inference from a fec checkpoint; the codec has not been fine-tuned")
        self.stage = ckpt.stage
        self.cfg, self.codec, self.flow = load_models(ckpt)

    @classmethod
    def from_file(cls, path) -> Enhancer:
        return cls(load_checkpoint(path))

    def enhance(self, lr: Waveform, steps: int | None = None, guidance: float | None = None, seed: int | None = None) -> Enhanced:
        """Voicing -> encode -> convert -> quantize -> decode, trimmed to the input length."""
        if lr.sample_rate != self.cfg.sample_rate:
            raise UsageError(f"input is {lr.sample_rate} Hz but the checkpoint was trained at {self.cfg.sample_rate} Hz")
        steps = self.cfg.flow.steps if steps is None else int(steps)
        guidance = self.cfg.flow.guidance if guidance is None else float(guidance)
        seed = self.cfg.seed if seed is None else int(seed)
        timings = {}
        clock = time.perf_counter()

        def lap(name):
            nonlocal clock
            now = time.perf_counter()
            timings[name] = now - clock
            clock = now

        with no_grad():
            padded = self.codec.pad_to_hop(lr.samples[None].astype(np.float32))
            n_frames = padded.shape[1] // self.cfg.codec.hop
            labels = extract_voicing(lr, n_frames, self.cfg.voicing).labels
            lap("voicing")
            z_l = self.codec.encode_batch(padded)
            lap("encode")
            z_h = convert(self.flow, z_l, labels[None], steps=steps, alpha=guidance, seed=seed)
            lap("convert")
            q = quantize(z_h, self.codec.quantizer, track_distances=False)
            lap("quantize")
            out = self.codec.decode(LatentEmbedding(q.quantized.data, self.cfg.codec.hop, self.cfg.sample_rate))
            lap("decode")
        wave = Waveform(out.samples[: lr.samples.size], lr.sample_rate)
        timings["total"] = sum(timings.values())
        return Enhanced(wave, labels, z_l.data[0], z_h.data[0], seed, steps, guidance, timings)


def report_row(res: Enhanced, stage: str, input_path="", output_path="") -> dict:
    row = {
        "input": str(input_path),
        "output": str(output_path),
        "stage": stage,
        "seed": res.seed,
        "steps": res.steps,
        "guidance": res.guidance,
        "n_samples": res.wave.samples.size,
        "n_frames": res.labels.size,
    }
    row.update({f"t_{k}": f"{v:.6f}" for k, v in res.timings.items()})
    return row


def write_csv(path, fields, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def infer_file(ckpt_path, input_wav, out_dir, steps=None, guidance=None, seed=None) -> tuple[Path, dict]:
    """Enhance one WAV; writes ``<stem>_bwe.wav`` and ``<stem>_report.csv``."""
    enh = Enhancer.from_file(ckpt_path)
    res = enh.enhance(load_wav(input_wav), steps, guidance, seed)
    out_dir = Path(out_dir)
    stem = Path(input_wav).stem
    out = out_dir / f"{stem}_bwe.wav"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_wav(out, res.wave, encoding="float32")
    row = report_row(res, enh.stage, input_wav, out)
    write_csv(out_dir / f"{stem}_report.csv", REPORT_FIELDS, [row])
    return out, row


@dataclass
class EvalResult:
    rows: list
    aggregate: dict


def evaluate(enh: Enhancer, manifest: Manifest, split: str = "test", steps=None, guidance=None, seed=None,
             out_dir=None) -> EvalResult:
    """Per-utterance LSD of the extended output and of the LR input, both against HR."""
    cfg = enh.cfg
    rows = []
    for utt in load_split(manifest, split, cfg.sample_rate, cfg.data.lr_band_hz):
        hr = Waveform(utt.hr, cfg.sample_rate)
        lr = Waveform(utt.lr, cfg.sample_rate)
        res = enh.enhance(lr, steps, guidance, seed)
        if out_dir is not None:
            save_wav(Path(out_dir) / f"{utt.id}_bwe.wav", res.wave, encoding="float32")
        out_rep = lsd_report(hr, res.wave, cfg.lsd)
        in_rep = lsd_report(hr, lr, cfg.lsd)
        rows.append({
            "id": utt.id,
            "lsd": out_rep.lsd,
            "lsd_lf": out_rep.lsd_lf,
            "lsd_hf": out_rep.lsd_hf,
            "input_lsd": in_rep.lsd,
            "input_lsd_lf": in_rep.lsd_lf,
            "input_lsd_hf": in_rep.lsd_hf,
            "visqol": NOT_COMPUTED,
            "mos": NOT_COMPUTED,
            "col": NOT_COMPUTED,
        })
    agg = {"id": "mean"}
    for key in EVAL_FIELDS[1:7]:
        agg[key] = float(np.mean([r[key] for r in rows]))
    agg.update({"visqol": NOT_COMPUTED, "mos": NOT_COMPUTED, "col": NOT_COMPUTED})
    return EvalResult(rows, agg)


def write_eval(result: EvalResult, path) -> None:
    write_csv(path, EVAL_FIELDS, result.rows + [result.aggregate])
