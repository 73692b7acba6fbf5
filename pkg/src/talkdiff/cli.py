"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from . import metrics
from .checkpoint import (
    atom_from_config,
    codec_from_config,
    load_checkpoint,
    save_checkpoint,
)
from .config import ExperimentConfig
from .corpus import CorpusConfig, gen_corpus, load_corpus, video_rate
from .io import FormatError, file_digest, load_tensors, read_manifest, save_tensors, write_manifest
from .pipeline import PipelineError, TalkingHeadPipeline, train_mtov
from .video import write_png_frames

log = logging.getLogger("talkdiff")

THREADS_ENV = "MDTK_NUM_THREADS"


class CommandError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# ---------------------------------------------------------------- helpers


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CommandError("config", f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    try:
        cfg.update(overrides)
    except (KeyError, ValueError) as exc:
        raise CommandError("config", str(exc)) from None
    return cfg


def _corpus(path):
    man = read_manifest(Path(path) / "manifest.txt")
    return load_corpus(path), file_digest(Path(path) / "manifest.txt"), man


def _check_corpus_matches(cfg: ExperimentConfig, corpus) -> None:
    c = corpus.config
    for key in ("n_frames", "feature_dim", "height", "width"):
        if getattr(c, key) != cfg[f"corpus.{key}"]:
            raise CommandError("inputs", f"corpus {key}={getattr(c, key)} disagrees with config corpus.{key}={cfg[f'corpus.{key}']}")


def _checkpoint(path, kind):
    model, man, cfg = load_checkpoint(path, kind)
    return model, man["model.sha256"], cfg


def _pipeline(args):
    atom, d_atom, _ = _checkpoint(args.atom, "atom")
    vc, d_vc, _ = _checkpoint(args.codec, "codec")
    mc, d_mc, _ = _checkpoint(args.motion_codec, "motion-codec")
    mtov, d_mtov, cfg = _checkpoint(args.mtov, "mtov")
    sigma = cfg["pipeline.blend_sigma"] if args.sigma is None else args.sigma
    pipe = TalkingHeadPipeline(atom, vc, mc, mtov, blend_sigma=sigma)
    digests = {"atom": d_atom, "codec": d_vc, "motion_codec": d_mc, "mtov": d_mtov}
    return pipe, digests, cfg


def _write_clip(out_dir, arrays: dict, entries: dict, video):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = dict(entries)
    entries["video.sha256"] = save_tensors(out / "video.bin", arrays)
    frames = write_png_frames(video, out / "frames")
    entries["frames"] = len(frames)
    write_manifest(out / "manifest.txt", entries)


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> None:
    cfg = _config(args)
    overrides = {"corpus.n_clips": args.clips, "corpus.n_frames": args.frames}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    cc = CorpusConfig(**cfg.section("corpus"))
    gen_corpus(cc, cfg["seed"], args.out)
    print(f"wrote {cc.n_clips} clips to {args.out}")


def cmd_train_atom(args) -> None:
    cfg = _config(args)
    corpus, d_corpus, _ = _corpus(args.corpus)
    _check_corpus_matches(cfg, corpus)
    model = atom_from_config(cfg).fit(corpus.features, corpus.frontal)
    final = model.loss_curve_[-1]["loss"] if model.loss_curve_ else float("nan")
    save_checkpoint(args.out, "atom", model, cfg, {"corpus": d_corpus}, {"final_loss": final}, model.loss_curve_)
    print(f"atom final loss {final:.6g}")


def cmd_train_codec(args) -> None:
    cfg = _config(args)
    corpus, d_corpus, _ = _corpus(args.corpus)
    _check_corpus_matches(cfg, corpus)
    model = codec_from_config(cfg).fit(corpus.video)
    psnr = metrics.psnr(model.reconstruct(corpus.video), corpus.video)
    extra = {"phase2_step": model.phase2_step_, "train_psnr": psnr, "decoder.sha256": model.decoder_digest()}
    save_checkpoint(args.out, "codec", model, cfg, {"corpus": d_corpus}, extra, model.loss_curve_)
    print(f"codec train PSNR {psnr:.2f} dB")


def cmd_finetune_motion_codec(args) -> None:
    codec, d_codec, cfg = _checkpoint(args.codec, "codec")
    cfg.update({k: v for k, v in {"motion.steps": args.steps, "motion.lr": args.lr}.items() if v is not None})
    corpus, d_corpus, _ = _corpus(args.corpus)
    _check_corpus_matches(cfg, corpus)
    H, W = corpus.video.shape[-2:]
    motion = np.stack([geo.rasterize_motion(seq, H, W) for seq in corpus.posed])
    before = codec.reconstruction_loss(motion, channels=1)
    tuned = codec.finetune_motion(motion, steps=cfg["motion.steps"], lr=cfg["motion.lr"], seed=cfg["seed"])
    after = tuned.reconstruction_loss(motion, channels=1)
    extra = {
        "motion_loss_before": before,
        "motion_loss_after": after,
        "decoder.sha256": tuned.decoder_digest(),
        "trainable": ",".join(tuned.finetuned_layers_),
    }
    save_checkpoint(args.out, "motion-codec", tuned, cfg, {"corpus": d_corpus, "codec": d_codec}, extra, tuned.finetune_curve_)
    print(f"motion reconstruction L1 {before:.5f} -> {after:.5f}")


def cmd_train_mtov(args) -> None:
    cfg = _config(args)
    corpus, d_corpus, _ = _corpus(args.corpus)
    _check_corpus_matches(cfg, corpus)
    vc, d_vc, _ = _checkpoint(args.codec, "codec")
    mc, d_mc, _ = _checkpoint(args.motion_codec, "motion-codec")
    model = train_mtov(corpus, vc, mc, seed=cfg["seed"], **cfg.schedule_params(), **cfg.section("mtov"))
    final = model.loss_curve_[-1]["loss"] if model.loss_curve_ else float("nan")
    inputs = {"corpus": d_corpus, "codec": d_vc, "motion_codec": d_mc}
    save_checkpoint(args.out, "mtov", model, cfg, inputs, {"final_loss": final}, model.loss_curve_)
    print(f"mtov final loss {final:.6g}")


def _load_lid(path) -> np.ndarray:
    arrays = load_tensors(path)
    for key in ("l_id", "landmarks", "template"):
        if key in arrays:
            a = np.asarray(arrays[key], dtype=np.float64)
            return a[0] if a.ndim == 3 else a
    raise CommandError("inputs", f"{path}: no 'l_id' or 'landmarks' entry")


def cmd_sample(args) -> None:
    atom, d_atom, _ = _checkpoint(args.atom, "atom")
    audio = load_tensors(args.audio)
    if "features" not in audio:
        raise CommandError("inputs", f"{args.audio}: no 'features' entry")
    l_id = _load_lid(args.lid)
    seq, calls = atom.sample_motion(audio["features"], l_id, args.steps, args.seed)
    digest = save_tensors(args.out, {"landmarks": seq})
    entries = {
        "kind": "landmarks",
        "input.atom": d_atom,
        "input.audio": file_digest(args.audio),
        "input.lid": file_digest(args.lid),
        "seed": args.seed,
        "n_steps": args.steps or atom.n_steps,
        "invocations": calls,
        "landmarks.sha256": digest,
    }
    write_manifest(str(args.out) + ".manifest.txt", entries)
    print(f"wrote landmarks {seq.shape} to {args.out}")


def cmd_generate(args) -> None:
    pipe, digests, _ = _pipeline(args)
    corpus, d_corpus, _ = _corpus(args.corpus)
    i = args.clip
    if not 0 <= i < len(corpus):
        raise CommandError("inputs", f"clip index {i} out of range for {len(corpus)} clips")
    out = pipe.generate_clip(
        corpus.features[i], corpus.identity[i], corpus.video[i], corpus.posed[i], corpus.l_id[i], args.steps, args.seed, mode=args.mode
    )
    entries = {
        "kind": "generated-clip",
        **{f"input.{k}": v for k, v in digests.items()},
        "input.corpus": d_corpus,
        "clip": i,
        "seed": args.seed,
        "mode": args.mode,
        "n_steps": args.steps or pipe.mtov.n_steps,
        "blend_sigma": pipe.blend_sigma,
        "invocations": out.invocations,
    }
    arrays = {"video": out.video, "raw": out.raw, "landmarks_frontal": out.landmarks_frontal, "landmarks_aligned": out.landmarks_aligned}
    _write_clip(args.out, arrays, entries, out.video)
    print(f"wrote {len(out.video)} frames to {args.out} ({out.invocations} denoiser calls)")


def cmd_generate_long(args) -> None:
    pipe, digests, _ = _pipeline(args)
    corpus, d_corpus, _ = _corpus(args.corpus)
    idx = [int(v) for v in args.clips.split(",")]
    if any(not 0 <= i < len(corpus) for i in idx):
        raise CommandError("inputs", f"clip indices {idx} out of range for {len(corpus)} clips")
    audio = np.concatenate([corpus.features[i] for i in idx])
    pose = np.concatenate([corpus.video[i] for i in idx])
    posed = np.concatenate([corpus.posed[i] for i in idx])
    out = pipe.generate_long(audio, corpus.identity[idx[0]], pose, posed, corpus.l_id[idx[0]], args.steps, args.seed)
    entries = {
        "kind": "generated-long",
        **{f"input.{k}": v for k, v in digests.items()},
        "input.corpus": d_corpus,
        "clips": ",".join(map(str, idx)),
        "seed": args.seed,
        "n_steps": args.steps or pipe.mtov.n_steps,
        "invocations": out.invocations,
    }
    arrays = {"video": out.video, "landmarks_frontal": out.landmarks_frontal}
    _write_clip(args.out, arrays, entries, out.video)
    print(f"wrote {len(out.video)} frames to {args.out} ({len(out.clips)} clips)")


def _load_reference(paths):
    parts = {"video": [], "frontal": [], "posed": [], "amplitude": []}
    for p in paths:
        p = Path(p)
        parts["video"].append(load_tensors(p / "video.bin")["video"])
        parts["frontal"].append(load_tensors(p / "landmarks_frontal.bin")["landmarks"])
        parts["posed"].append(load_tensors(p / "landmarks_posed.bin")["landmarks"])
        parts["amplitude"].append(video_rate(load_tensors(p / "features.bin")["amplitudes"]))
    return {k: np.concatenate(v) for k, v in parts.items()}


def cmd_evaluate(args) -> None:
    pred = load_tensors(Path(args.pred) / "video.bin")
    ref = _load_reference(args.ref)
    if len(pred["video"]) != len(ref["video"]):
        raise CommandError("evaluate", f"prediction has {len(pred['video'])} frames, reference {len(ref['video'])}")
    report = {
        "lmd": metrics.lmd(pred["landmarks_frontal"], ref["frontal"]),
        "lmd_full": metrics.lmd(pred["landmarks_frontal"], ref["frontal"], full_face=True),
        "psnr": metrics.psnr(pred["video"], ref["video"]),
        "sync_corr": metrics.sync_corr(metrics.raster_mouth_signal(pred["video"], ref["posed"]), ref["amplitude"]),
        "sync_corr_landmarks": metrics.sync_corr(metrics.mouth_open_signal(pred["landmarks_frontal"]), ref["amplitude"]),
        "temporal_consistency": metrics.temporal_consistency(pred["video"]),
    }
    entries = {"kind": "evaluation", "input.pred": file_digest(Path(args.pred) / "video.bin"), **report}
    if args.out:
        write_manifest(args.out, entries)
    for k, v in report.items():
        print(f"{k}: {v:.6g}")


def cmd_inspect(args) -> None:
    path = Path(args.path)
    if path.is_dir():
        path = path / "manifest.txt"
    data = path.read_bytes()
    if data[:4] == b"MDTK":
        arrays = load_tensors(path)
        print(f"container {path} sha256={file_digest(path)} entries={len(arrays)}")
        for name, a in arrays.items():
            print(f"  {name}: {a.dtype} {list(a.shape)}")
    else:
        for k, v in read_manifest(path).items():
            print(f"{k}: {v}")


# ---------------------------------------------------------------- parser


def _add_config(p, seed=True):
    p.add_argument("--config", help="experiment config file (key: value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    if seed:
        p.add_argument("--seed", type=int)


def _add_models(p):
    p.add_argument("--atom", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--motion-codec", required=True)
    p.add_argument("--mtov", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, help="blend boundary sigma (default from config)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkdiff", description="Audio-driven talking-head diffusion at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int)
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    for name, func, help_ in (
        ("train-atom", cmd_train_atom, "train the audio-to-motion model"),
        ("train-codec", cmd_train_codec, "train the RGB tri-plane codec"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_config(p)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("finetune-motion-codec", help="adapt the codec encoder to motion clips")
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_finetune_motion_codec)

    p = sub.add_parser("train-mtov", help="train the motion-to-video latent denoiser")
    _add_config(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--motion-codec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_mtov)

    p = sub.add_parser("sample", help="sample frontal landmarks for one audio window")
    p.add_argument("--atom", required=True)
    p.add_argument("--audio", required=True, help="container with a 'features' entry [2S, d]")
    p.add_argument("--lid", required=True, help="container with 'l_id' [68, 3] or 'landmarks'")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("generate", help="generate one clip")
    _add_models(p)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--mode", choices=("joint", "frame"), default="joint")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("generate-long", help="generate chained clips")
    _add_models(p)
    p.add_argument("--clips", required=True, help="comma-separated corpus clip indices")
    p.set_defaults(func=cmd_generate_long)

    p = sub.add_parser("evaluate", help="score a generated clip against reference clips")
    p.add_argument("--pred", required=True, help="generated output directory")
    p.add_argument("--ref", required=True, nargs="+", help="reference corpus clip directories")
    p.add_argument("--out", help="write the report as a manifest")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="describe a container, manifest or checkpoint")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error [config]: {THREADS_ENV} must be an integer, got {threads!r}", file=sys.stderr)
            return 2
    try:
        args.func(args)
    except CommandError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error [{args.command}/{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except (FormatError, FileNotFoundError, KeyError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error [{args.command}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
