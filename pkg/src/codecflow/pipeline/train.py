"""Three-stage training: codec pretraining, converter training, codec fine-tuning.

Every stage draws its randomness from ``default_rng([seed, stage, step])``
and checkpoints parameters, optimizer moments and bookkeeping at each
evaluation, so an interrupted run resumed from its checkpoint reproduces
the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from codecflow.codec import Codec, recon_loss
from codecflow.dsp import Waveform
from codecflow.errors import CodecFlowError, ConfigurationError
from codecflow.flow import FlowModel, NormStats, RunningStats, cfm_loss, convert, fuse_condition, normalize
from codecflow.numerics import AdamW, Tensor, backward, clip_grad_norm, no_grad
from codecflow.pipeline.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from codecflow.pipeline.config import RunConfig, StageConfig
from codecflow.pipeline.data import Manifest, crop_batch, load_split
from codecflow.scrvq import init_from_data, quantize, record_usage, reseed_dead_codes, scrvq_loss
from codecflow.voicing import extract_voicing

log = logging.getLogger(__name__)

STAGE_TAGS = {1: "codec_pretrain", 2: "fec", 3: "finetune"}
EVAL_STREAM = 10**6  # rng stream id reserved for validation draws
INIT_STREAM = 10**6 + 1


# ---------------------------------------------------------------- models <-> tensors


def build_models(cfg: RunConfig) -> tuple[Codec, FlowModel]:
    codec = Codec(cfg.codec, np.random.default_rng([cfg.seed, 0]))
    flow = FlowModel(cfg.flow, np.random.default_rng([cfg.seed, 1]))
    return codec, flow


def _flow_key(name: str) -> str:
    return "velocity_net." + name[len("net.") :] if name.startswith("net.") else "flow." + name


def model_tensors(codec: Codec, flow: FlowModel | None) -> dict[str, np.ndarray]:
    out = {"codec." + n: p.data for n, p in codec.named_parameters()}
    out["codec.quantizer.usage"] = codec.quantizer.usage.astype(np.float32)
    if flow is not None:
        out.update({_flow_key(n): p.data for n, p in flow.named_parameters()})
        if flow.stats is not None:
            for key in ("lr_mean", "lr_std", "hr_mean", "hr_std"):
                out[f"flow.stats.{key}"] = getattr(flow.stats, key)
    return out


def _assign(module, tensors: dict, key_of, what: str) -> None:
    state = {}
    for name, p in module.named_parameters():
        key = key_of(name)
        if key not in tensors:
            raise ConfigurationError(f"checkpoint lacks {what} tensor {key}")
        state[name] = tensors[key]
    module.load_state_dict(state)


def restore_models(ckpt: Checkpoint, codec: Codec, flow: FlowModel | None, need_flow: bool = True) -> None:
    """Fill existing models in place from ``ckpt``."""
    t = ckpt.tensors
    _assign(codec, t, lambda n: "codec." + n, "codec")
    if "codec.quantizer.usage" in t:
        codec.quantizer.usage[:] = t["codec.quantizer.usage"].astype(np.int64)
    codec.quantizer.usage_steps = int(ckpt.meta.get("usage_steps", 0))
    if flow is None:
        return
    if any(k.startswith("velocity_net.") for k in t):
        _assign(flow, t, _flow_key, "flow")
        if "flow.stats.lr_mean" in t:
            flow.stats = NormStats(*(t[f"flow.stats.{k}"] for k in ("lr_mean", "lr_std", "hr_mean", "hr_std")))
    elif need_flow:
        raise ConfigurationError(f"checkpoint stage {ckpt.stage!r} carries no converter parameters")


def load_models(ckpt: Checkpoint, need_flow: bool = True) -> tuple[RunConfig, Codec, FlowModel]:
    """Rebuild the config snapshot and the models stored in ``ckpt``."""
    cfg = RunConfig.from_dict(ckpt.config)
    codec, flow = build_models(cfg)
    restore_models(ckpt, codec, flow, need_flow)
    return cfg, codec, flow


def _f32_stats(stats: NormStats) -> NormStats:
    """Stats rounded to float32 so a reloaded run sees exactly the same values."""
    vals = [np.asarray(getattr(stats, k), dtype=np.float32) for k in ("lr_mean", "lr_std", "hr_mean", "hr_std")]
    return NormStats(*vals)


# ---------------------------------------------------------------- bookkeeping


class LossLog:
    """CSV of ``step, split, <metrics>``.

    On resume only rows logged before the checkpoint was written survive:
    training rows before the resume step and validation rows up to it.
    """

    def __init__(self, path: Path, fields: list[str], resume_step: int | None):
        self.path = path
        self.fields = ["step", "split"] + fields
        rows = []
        if resume_step is not None and path.exists():
            with open(path, newline="") as fh:
                rows = [
                    r
                    for r in csv.DictReader(fh)
                    if int(r["step"]) < resume_step or (int(r["step"]) == resume_step and r["split"] == "val")
                ]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, self.fields, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)

    def write(self, step: int, split: str, values: dict) -> None:
        row = {"step": step, "split": split}
        row.update({k: repr(float(values[k])) for k in self.fields[2:] if k in values})
        with open(self.path, "a", newline="") as fh:
            csv.DictWriter(fh, self.fields, lineterminator="\n").writerow(row)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class StageResult:
    checkpoint: Path
    steps_run: int
    finished: bool
    val_history: list = field(default_factory=list)
    early_stopped: bool = False


def _floats(d: dict) -> dict:
    return {k: float(v.data) if isinstance(v, Tensor) else float(v) for k, v in d.items()}


def _crop_samples(cfg: RunConfig) -> int:
    hop = cfg.codec.hop
    return max(1, int(round(cfg.data.crop_s * cfg.sample_rate / hop))) * hop


def _fixed_crops(utts: list, n: int, attr: str) -> np.ndarray:
    out = np.zeros((len(utts), n), dtype=np.float32)
    for i, u in enumerate(utts):
        x = getattr(u, attr)[:n]
        out[i, : x.size] = x
    return out


class _Loop:
    """Shared step/eval/checkpoint/resume machinery of the three stages."""

    def __init__(self, stage: int, cfg: RunConfig, st: StageConfig, out_dir, named_params, fields, resume: bool):
        self.stage = stage
        self.cfg = cfg
        self.st = st
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.out_dir / f"stage{stage}.cflw"
        self.named = list(named_params)
        self.opt = AdamW(self.named, lr=st.lr, weight_decay=st.weight_decay)
        self.start = 0
        self.best = math.inf
        self.bad = 0
        self.val_history = []
        self.resumed_ckpt = None
        if resume and self.path.exists():
            ck = load_checkpoint(self.path)
            if ck.stage != STAGE_TAGS[stage]:
                raise ConfigurationError(f"{self.path} holds a {ck.stage!r} checkpoint, not stage {stage}")
            self.resumed_ckpt = ck
            self.start = int(ck.meta["step"])
            self.best = float(ck.meta.get("best", math.inf))
            self.bad = int(ck.meta.get("bad_evals", 0))
            self.val_history = list(ck.meta.get("val_history", []))
            opt_t = {k[len("optim.") :]: v for k, v in ck.tensors.items() if k.startswith("optim.")}
            self.opt.load_state_tensors(opt_t, int(ck.meta["optim_step"]))
        self.log = LossLog(self.out_dir / f"stage{stage}_loss.csv", fields, self.start if self.resumed_ckpt else None)

    def rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, self.stage, step])

    def save(self, step: int, codec: Codec, flow: FlowModel | None, finished: bool) -> None:
        tensors = model_tensors(codec, flow)
        tensors.update({"optim." + k: v for k, v in self.opt.state_tensors().items()})
        meta = {
            "step": step,
            "total_steps": self.st.steps,
            "finished": finished,
            "optim_step": self.opt.state.step,
            "usage_steps": codec.quantizer.usage_steps,
            "best": self.best if math.isfinite(self.best) else None,
            "bad_evals": self.bad,
            "val_history": self.val_history,
        }
        save_checkpoint(self.path, Checkpoint(STAGE_TAGS[self.stage], self.cfg.to_dict(), tensors, meta))

    def update(self, loss: Tensor) -> float:
        backward(loss)
        params = [p for _, p in self.named]
        norm = clip_grad_norm(params, self.st.grad_clip)
        self.opt.step()
        self.opt.zero_grad()
        return norm

    def evaluate(self, step: int, values: dict) -> bool:
        """Record a validation result; True when early stopping triggers."""
        self.log.write(step, "val", values)
        val = float(values["total"])
        self.val_history.append([step, val])
        if val < self.best:
            self.best, self.bad = val, 0
        else:
            self.bad += 1
        return bool(self.st.patience) and self.bad >= self.st.patience

    def run(self, codec, flow, train_step, val_step, stop_after: int | None) -> StageResult:
        """``train_step(step, rng) -> dict``; ``val_step() -> dict`` with a ``total`` key."""
        step = self.start
        early = False
        while step < self.st.steps:
            # the evaluation at a resume point is already inside the checkpoint
            if step % self.st.eval_every == 0 and not (self.resumed_ckpt is not None and step == self.start):
                early = self.evaluate(step, val_step())
                self.save(step, codec, flow, finished=False)
                if early:
                    log.info("stage %d: early stop at step %d", self.stage, step)
                    break
                if stop_after is not None and step >= stop_after and step > self.start:
                    return StageResult(self.path, step, False, self.val_history)
            values = train_step(step, self.rng(step))
            self.log.write(step, "train", values)
            step += 1
        if not early:
            self.evaluate(step, val_step())
        self.save(step, codec, flow, finished=True)
        return StageResult(self.path, step, True, self.val_history, early)


def _finished(path: Path, stage: int) -> StageResult | None:
    if not path.exists():
        return None
    ck = load_checkpoint(path)
    if ck.stage == STAGE_TAGS[stage] and ck.meta.get("finished"):
        return StageResult(path, int(ck.meta["step"]), True, ck.meta.get("val_history", []))
    return None


# ---------------------------------------------------------------- stage 1


def stage1_train(cfg: RunConfig, manifest: Manifest, out_dir, resume: bool = False, stop_after: int | None = None):
    """Train codec + quantizer on HR audio with recon and structure losses."""
    out_dir = Path(out_dir)
    if resume and (done := _finished(out_dir / "stage1.cflw", 1)):
        return done
    st = cfg.stage1
    codec, _ = build_models(cfg)
    loop = _Loop(1, cfg, st, out_dir, [("codec." + n, p) for n, p in codec.named_parameters()],
                 ["total", "waveform", "stft", "rvq", "margin", "mono", "grad_norm"], resume)
    train = load_split(manifest, "train", cfg.sample_rate, cfg.data.lr_band_hz)
    val = load_split(manifest, "val", cfg.sample_rate, cfg.data.lr_band_hz)
    n = _crop_samples(cfg)
    hop = cfg.codec.hop
    if loop.resumed_ckpt is not None:
        restore_models(loop.resumed_ckpt, codec, None)
    else:
        r = np.random.default_rng([cfg.seed, 1, INIT_STREAM])
        hr, _, _, _ = crop_batch(train, max(st.batch, 8), n, hop, r)
        with no_grad():
            init_from_data(codec.quantizer, codec.encode_batch(hr).data, r)
    val_hr = _fixed_crops(val, n, "hr")

    def train_step(step, rng):
        hr, _, _, _ = crop_batch(train, st.batch, n, hop, rng)
        z = codec.encode_batch(hr)
        q = quantize(z, codec.quantizer)
        y = codec.decode_batch(q.quantized)
        rec = recon_loss(y, hr)
        reg = scrvq_loss(q, z, codec.quantizer)
        loss = st.waveform_weight * rec["waveform"] + st.stft_weight * rec["stft"] + reg["total"]
        norm = loop.update(loss)
        record_usage(codec.quantizer, q)
        # stale moments would keep pushing a re-seeded entry along its old path
        for i, rows in reseed_dead_codes(codec.quantizer, q, rng).items():
            loop.opt.reset_rows(f"codec.quantizer.codebooks.{i}.entries", rows)
        out = _floats({"waveform": rec["waveform"], "stft": rec["stft"], "rvq": reg["rvq"], "margin": reg["margin"], "mono": reg["mono"]})
        out["total"] = float(loss.data)
        out["grad_norm"] = norm
        return out

    def val_step():
        with no_grad():
            z = codec.encode_batch(val_hr)
            q = quantize(z, codec.quantizer, track_distances=False)
            rec = recon_loss(codec.decode_batch(q.quantized), val_hr)
        return _floats(rec)

    return loop.run(codec, None, train_step, val_step, stop_after)


# ---------------------------------------------------------------- stage 2


@dataclass
class LatentSet:
    z_l: list
    z_h: list
    labels: list


def encode_pairs(codec: Codec, utts: list, cfg: RunConfig) -> LatentSet:
    """Full-utterance LR/HR latents and LR-derived voicing labels."""
    z_l, z_h, labels = [], [], []
    with no_grad():
        for u in utts:
            lr = codec.pad_to_hop(u.lr[None])
            hr = codec.pad_to_hop(u.hr[None])
            zl = codec.encode_batch(lr).data
            zh = codec.encode_batch(hr).data
            labels.append(extract_voicing(Waveform(u.lr, cfg.sample_rate), zl.shape[2], cfg.voicing).labels)
            z_l.append(zl[0])
            z_h.append(zh[0])
    return LatentSet(z_l, z_h, labels)


def latent_stats(lat: LatentSet) -> NormStats:
    dim = lat.z_l[0].shape[0]
    lr, hr = RunningStats(dim), RunningStats(dim)
    for a, b in zip(lat.z_l, lat.z_h):
        lr.update(a[None])
        hr.update(b[None])
    return _f32_stats(NormStats.from_running(lr, hr))


def crop_latents(lat: LatentSet, batch: int, frames: int, rng: np.random.Generator):
    d = lat.z_l[0].shape[0]
    zl = np.zeros((batch, d, frames), dtype=np.float32)
    zh = np.zeros((batch, d, frames), dtype=np.float32)
    s = np.zeros((batch, frames), dtype=np.int64)
    which = rng.integers(0, len(lat.z_l), size=batch)
    for b, i in enumerate(which):
        n = lat.z_l[i].shape[1]
        k = int(rng.integers(0, max(0, n - frames) + 1))
        m = min(frames, n - k)
        zl[b, :, :m] = lat.z_l[i][:, k : k + m]
        zh[b, :, :m] = lat.z_h[i][:, k : k + m]
        s[b, :m] = lat.labels[i][k : k + m]
    return zl, zh, s


def _require_stage(ck: Checkpoint, allowed: tuple, what: str) -> None:
    if ck.stage not in allowed:
        raise ConfigurationError(f"{what} needs a {' or '.join(allowed)} checkpoint, got {ck.stage!r}")


def _check_compatible(cfg: RunConfig, ck_cfg: RunConfig) -> None:
    if cfg.codec != ck_cfg.codec:
        raise ConfigurationError("codec configuration differs from the checkpoint it should continue")


def stage2_train(cfg: RunConfig, manifest: Manifest, stage1: Checkpoint, out_dir, resume: bool = False,
                 stop_after: int | None = None):
    """Train the converter on frozen-codec LR/HR latent pairs with the CFM loss."""
    out_dir = Path(out_dir)
    _require_stage(stage1, ("codec_pretrain", "fec", "finetune"), "stage 2")
    if resume and (done := _finished(out_dir / "stage2.cflw", 2)):
        return done
    ck_cfg, codec, _ = load_models(stage1, need_flow=False)
    _check_compatible(cfg, ck_cfg)
    flow = FlowModel(cfg.flow, np.random.default_rng([cfg.seed, 1]))
    st = cfg.stage2
    loop = _Loop(2, cfg, st, out_dir, [(_flow_key(n), p) for n, p in flow.named_parameters()], ["total", "grad_norm"], resume)
    if loop.resumed_ckpt is not None:
        restore_models(loop.resumed_ckpt, codec, flow)
    train = encode_pairs(codec, load_split(manifest, "train", cfg.sample_rate, cfg.data.lr_band_hz), cfg)
    val = encode_pairs(codec, load_split(manifest, "val", cfg.sample_rate, cfg.data.lr_band_hz), cfg)
    if flow.stats is None:
        flow.stats = latent_stats(train)
    stats = flow.stats
    frames = _crop_samples(cfg) // cfg.codec.hop
    val_zl, val_zh, val_s = crop_latents(val, len(val.z_l), frames, np.random.default_rng([cfg.seed, 2, EVAL_STREAM]))

    def train_step(step, rng):
        zl, zh, s = crop_latents(train, st.batch, frames, rng)
        cond = fuse_condition(flow, zl, s)
        loss = cfm_loss(flow, normalize(zh, stats.hr_mean, stats.hr_std), cond, rng)
        norm = loop.update(loss)
        return {"total": float(loss.data), "grad_norm": norm}

    def val_step():
        rng = np.random.default_rng([cfg.seed, 2, EVAL_STREAM])
        with no_grad():
            cond = fuse_condition(flow, val_zl, val_s)
            loss = cfm_loss(flow, normalize(val_zh, stats.hr_mean, stats.hr_std), cond, rng)
        return {"total": float(loss.data)}

    return loop.run(codec, flow, train_step, val_step, stop_after)


# ---------------------------------------------------------------- stage 3


def _frozen_snapshot(codec: Codec, flow: FlowModel) -> dict[str, bytes]:
    snap = {"q." + n: p.data.tobytes() for n, p in codec.quantizer.named_parameters()}
    snap.update({"f." + n: p.data.tobytes() for n, p in flow.named_parameters()})
    return snap


def _set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def stage3_finetune(cfg: RunConfig, manifest: Manifest, stage2: Checkpoint, out_dir, resume: bool = False,
                    stop_after: int | None = None):
    """Fine-tune encoder/decoder through the frozen converter and quantizer."""
    out_dir = Path(out_dir)
    _require_stage(stage2, ("fec", "finetune"), "stage 3")
    if resume and (done := _finished(out_dir / "stage3.cflw", 3)):
        return done
    ck_cfg, codec, flow = load_models(stage2)
    _check_compatible(cfg, ck_cfg)
    if cfg.flow != ck_cfg.flow:
        raise ConfigurationError("flow configuration differs from the stage-2 checkpoint")
    st = cfg.stage3

    def trainable(c: Codec):
        return [("codec.encoder." + n, p) for n, p in c.encoder.named_parameters()] + [
            ("codec.decoder." + n, p) for n, p in c.decoder.named_parameters()
        ]

    loop = _Loop(3, cfg, st, out_dir, trainable(codec), ["total", "waveform", "stft", "grad_norm"], resume)
    if loop.resumed_ckpt is not None:
        restore_models(loop.resumed_ckpt, codec, flow)
    frozen = codec.quantizer.parameters() + flow.parameters()
    before = _frozen_snapshot(codec, flow)
    train_utts = load_split(manifest, "train", cfg.sample_rate, cfg.data.lr_band_hz)
    val_utts = load_split(manifest, "val", cfg.sample_rate, cfg.data.lr_band_hz)
    labels = encode_pairs(codec, train_utts, cfg).labels if st.through_flow else None
    val_labels = encode_pairs(codec, val_utts, cfg).labels if st.through_flow else None
    n = _crop_samples(cfg)
    hop = cfg.codec.hop
    frames = n // hop
    val_hr = _fixed_crops(val_utts, n, "hr")
    val_lr = _fixed_crops(val_utts, n, "lr")
    val_s = np.stack([np.pad(lab[:frames], (0, max(0, frames - lab.size))) for lab in val_labels]) if st.through_flow else None

    def chain(hr, lr, s, seed):
        if st.through_flow:
            z_l = codec.encode_batch(lr)
            z_h = convert(flow, z_l, s, steps=st.ode_steps, alpha=cfg.flow.guidance, seed=seed)
        else:
            z_h = codec.encode_batch(hr)
        q = quantize(z_h, codec.quantizer, track_distances=False)
        return recon_loss(codec.decode_batch(q.quantized), hr)

    def train_step(step, rng):
        hr, lr, which, starts = crop_batch(train_utts, st.batch, n, hop, rng)
        s = None
        if st.through_flow:
            s = np.zeros((st.batch, frames), dtype=np.int64)
            for b, (i, k) in enumerate(zip(which, starts)):
                seg = labels[i][k : k + frames]
                s[b, : seg.size] = seg
        rec = chain(hr, lr, s, int(rng.integers(2**31)))
        loss = st.waveform_weight * rec["waveform"] + st.stft_weight * rec["stft"]
        norm = loop.update(loss)
        out = _floats({"waveform": rec["waveform"], "stft": rec["stft"]})
        out["total"] = float(loss.data)
        out["grad_norm"] = norm
        return out

    def val_step():
        with no_grad():
            return _floats(chain(val_hr, val_lr, val_s, cfg.seed))

    _set_trainable(frozen, False)
    try:
        result = loop.run(codec, flow, train_step, val_step, stop_after)
    finally:
        _set_trainable(frozen, True)
    if _frozen_snapshot(codec, flow) != before:
        raise CodecFlowError("stage 3 modified frozen converter or quantizer parameters")
    return result
