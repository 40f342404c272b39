"""``codecflow`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from codecflow.dsp import Waveform, load_wav
from codecflow.errors import CodecFlowError
from codecflow.pipeline import report
from codecflow.pipeline.checkpoint import load_checkpoint
from codecflow.pipeline.config import load_config, save_config
from codecflow.pipeline.data import gen_synthetic_corpus, load_split, read_manifest
from codecflow.pipeline.infer import Enhancer, evaluate, infer_file, write_csv, write_eval
from codecflow.pipeline.train import load_models, stage1_train, stage2_train, stage3_finetune
from codecflow.voicing import extract_voicing

log = logging.getLogger("codecflow")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs")
    p.add_argument("--steps", type=int, help="training steps (train) or Euler steps (infer/eval/plot)")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codecflow", description="Codec-latent bandwidth extension.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic HR/LR corpus and manifest")
    _common(p)

    p = sub.add_parser("train", help="run one training stage")
    _common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--init", type=Path, help="checkpoint of the previous stage (stages 2 and 3)")
    p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint in --out-dir")

    p = sub.add_parser("infer", help="extend the bandwidth of WAV files")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("inputs", type=Path, nargs="+")

    p = sub.add_parser("eval", help="LSD of extended outputs on a manifest split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--save-audio", action="store_true")

    p = sub.add_parser("voicing", help="write the voicing label sequence of a WAV")
    _common(p)
    p.add_argument("input", type=Path)
    p.add_argument("--plot", action="store_true", help="also draw the spectrogram")

    p = sub.add_parser("codebook-stats", help="per-stage codebook utilisation and residual energies")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="val")

    p = sub.add_parser("plot", help="spectrogram, loss curve or cosine-similarity plots")
    _common(p)
    p.add_argument("kind", choices=("spectrogram", "loss", "cosine"))
    p.add_argument("--input", type=Path, help="WAV (spectrogram) or loss CSV (loss)")
    p.add_argument("--checkpoint", type=Path, help="codec checkpoint (cosine)")
    p.add_argument("--manifest", type=Path, help="manifest (cosine)")
    p.add_argument("--split", default="test")
    return parser


def _config(args, extra: dict | None = None):
    overrides = dict(extra or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.guidance is not None:
        overrides["flow.guidance"] = args.guidance
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    manifest = gen_synthetic_corpus(args.out_dir, cfg.data, cfg.sample_rate, cfg.seed)
    save_config(cfg, args.out_dir / "config.yaml")
    print(f"wrote {len(manifest.entries)} utterances to {args.out_dir / 'manifest.csv'}")


def cmd_train(args) -> None:
    extra = {f"stage{args.stage}.steps": args.steps} if args.steps is not None else {}
    cfg = _config(args, extra)
    manifest = read_manifest(args.manifest)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out_dir / f"stage{args.stage}_config.yaml")
    if args.stage == 1:
        res = stage1_train(cfg, manifest, args.out_dir, resume=args.resume)
    else:
        if args.init is None:
            raise CodecFlowError(f"stage {args.stage} needs --init <checkpoint of stage {args.stage - 1}>")
        prev = load_checkpoint(args.init)
        run = stage2_train if args.stage == 2 else stage3_finetune
        res = run(cfg, manifest, prev, args.out_dir, resume=args.resume)
    print(f"stage {args.stage}: {res.steps_run} steps, checkpoint {res.checkpoint}")


def _ode_overrides(args) -> dict:
    seed = args.seed
    if seed is None and args.config is not None:
        seed = load_config(args.config).seed
    return {"steps": args.steps, "guidance": args.guidance, "seed": seed}


def cmd_infer(args) -> None:
    ov = _ode_overrides(args)
    for path in args.inputs:
        out, row = infer_file(args.checkpoint, path, args.out_dir, ov["steps"], ov["guidance"], ov["seed"])
        print(f"{path} -> {out} ({float(row['t_total']):.2f} s)")


def cmd_eval(args) -> None:
    enh = Enhancer.from_file(args.checkpoint)
    ov = _ode_overrides(args)
    audio_dir = args.out_dir / "audio" if args.save_audio else None
    result = evaluate(enh, read_manifest(args.manifest), args.split, ov["steps"], ov["guidance"], ov["seed"], audio_dir)
    path = args.out_dir / "eval.csv"
    write_eval(result, path)
    agg = result.aggregate
    print(f"{len(result.rows)} files: lsd {agg['lsd']:.3f} lsd_lf {agg['lsd_lf']:.3f} lsd_hf {agg['lsd_hf']:.3f} -> {path}")


def cmd_voicing(args) -> None:
    cfg = _config(args)
    wav = load_wav(args.input)
    n_frames = -(-wav.samples.size // cfg.voicing.hop)
    seq = extract_voicing(wav, n_frames, cfg.voicing)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out_dir / f"{args.input.stem}_voicing.txt"
    report.write_voicing_labels(out, seq)
    if args.plot:
        report.plot_spectrogram(args.out_dir / f"{args.input.stem}_spectrogram.png", wav, args.input.stem)
    counts = np.bincount(seq.labels, minlength=3)
    print(f"{out}: {counts[0]} silent, {counts[1]} unvoiced, {counts[2]} voiced frames")


def _split_latents(codec, cfg, manifest, split):
    utts = load_split(manifest, split, cfg.sample_rate, cfg.data.lr_band_hz)
    return utts, [report.encode_pair(codec, u.hr, u.lr) for u in utts]


def cmd_codebook_stats(args) -> None:
    cfg, codec, _ = load_models(load_checkpoint(args.checkpoint), need_flow=False)
    _, pairs = _split_latents(codec, cfg, read_manifest(args.manifest), args.split)
    z = np.concatenate([zh for _, zh in pairs], axis=1)[None]
    rows = report.codebook_rows(codec, z)
    path = args.out_dir / "codebook_stats.csv"
    write_csv(path, ("stage", "utilization", "residual_energy", "mean_gap"), rows)
    for r in rows:
        print(f"stage {r['stage']}: utilization {r['utilization']:.3f} energy {r['residual_energy']:.4g}")


def cmd_plot(args) -> None:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "spectrogram":
        if args.input is None:
            raise CodecFlowError("plot spectrogram needs --input <wav>")
        wav = load_wav(args.input)
        db = report.plot_spectrogram(args.out_dir / f"{args.input.stem}_spectrogram.png", wav, args.input.stem)
        np.savetxt(args.out_dir / f"{args.input.stem}_spectrogram.csv", db.T, delimiter=",", fmt="%.2f")
    elif args.kind == "loss":
        if args.input is None:
            raise CodecFlowError("plot loss needs --input <loss csv>")
        report.plot_losses(args.out_dir / f"{args.input.stem}.png", args.input)
    else:
        if args.checkpoint is None or args.manifest is None:
            raise CodecFlowError("plot cosine needs --checkpoint and --manifest")
        cfg, codec, _ = load_models(load_checkpoint(args.checkpoint), need_flow=False)
        utts, pairs = _split_latents(codec, cfg, read_manifest(args.manifest), args.split)
        tracks, labels, rows = [], [], []
        for u, (zl, zh) in zip(utts, pairs):
            lab = extract_voicing(Waveform(u.lr, cfg.sample_rate), zl.shape[1], cfg.voicing).labels
            cos = report.plot_cosine_track(args.out_dir / f"{u.id}_cosine.png", zl, zh, lab, cfg.codec.hop / cfg.sample_rate)
            tracks.append(cos)
            labels.append(lab)
            rows.extend({"id": u.id, "frame": i, "label": int(lab[i]), "cosine": float(c)} for i, c in enumerate(cos))
        write_csv(args.out_dir / "cosine_tracks.csv", ("id", "frame", "label", "cosine"), rows)
        means = report.cosine_by_label(tracks, labels)
        print("mean cosine by label: " + ", ".join(f"{k} {v:.3f}" for k, v in means.items()))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "voicing": cmd_voicing,
    "codebook-stats": cmd_codebook_stats,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CodecFlowError as exc:
        print(f"codecflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
