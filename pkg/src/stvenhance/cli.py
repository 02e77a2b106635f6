"""Command-line entry point: ``stvenhance <command> ...`` or ``python -m stvenhance``.

Every command accepts ``--config FILE`` (YAML) and repeatable ``--set section.key=value``;
environment variables prefixed ``STVENHANCE_`` sit between the two (see ``config``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import build_training_example, sample_spec
from .autoencoder import VideoClip, model_latents_to_pixels
from .config import ConfigError, load_config
from .enhance import EnhanceRequest, enhance, evaluate
from .repro import PROFILES, RunDirs, load_clips, run_repro
from .schedule import build_schedule
from .synthdata import ClipFormatError, build_corpus, load_clip, save_clip
from .trainer import attach_controlnet, load_checkpoint, make_bundle, pretrain_base, save_checkpoint, train_controlnet

log = logging.getLogger("stvenhance")


def read_clip_dir(path, prompt=None) -> VideoClip:
    """A clip directory with a manifest, or a bare directory of PNG frames (sorted by name)."""
    d = Path(path)
    if (d / "manifest.json").exists():
        clip = load_clip(d)
        if prompt is not None:
            clip = VideoClip(clip.frames, prompt, clip.fps, clip.meta)
        return clip
    pngs = sorted(d.glob("*.png"))
    if not pngs:
        raise ClipFormatError(f"{d} holds neither manifest.json nor PNG frames")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in pngs])
    return VideoClip(frames, prompt or "")


def _run_config(args, **preset):
    overrides = [f"{k}={v}" for k, v in preset.items() if v is not None] + list(args.set)
    return load_config([args.config] if args.config else [], overrides)


def cmd_synth_data(args) -> int:
    cfg = _run_config(args)
    d = cfg.data
    out = args.out or d.corpus or "data/corpus"
    index = build_corpus(d.n_clips, d.seed, out, f=d.frames, H=d.height, W=d.width)
    print(f"wrote {index['num_clips']} clips to {out}")
    return 0


def cmd_augment_preview(args) -> int:
    cfg = _run_config(args)
    clip = read_clip_dir(args.input) if args.input else load_clips(cfg)[0]
    aug = cfg.train.augment_config()
    rng = np.random.default_rng(args.seed)
    sched = build_schedule()
    out = Path(args.out)
    rows = []
    for i in range(args.count):
        spec = sample_spec(rng, clip.num_frames, aug)
        _, cond = build_training_example(clip, spec, sched, cfg.autoencoder, keep_stages=True)
        d = out / f"sample_{i:03d}"
        for stage in ("keys", "degraded"):
            save_clip(VideoClip(np.clip(cond.stages[stage], 0, 1), clip.caption, clip.fps), d / stage)
        noisy = np.clip(model_latents_to_pixels(cond.latents, cfg.autoencoder), 0, 1)
        save_clip(VideoClip(noisy, clip.caption, clip.fps), d / "noised")
        rows.append({"sample": d.name, "m": spec.m, "s": spec.s, "t_prime": spec.t_prime,
                     "key_indices": list(spec.key_indices)})
    (out / "specs.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    print(f"wrote {len(rows)} previews to {out}")
    return 0


def _train(args, which: str) -> int:
    cfg = _run_config(args, name=args.name)
    dirs = RunDirs(Path(args.runs) / cfg.name).create()
    cfg.save(dirs.config)
    clips = load_clips(cfg)
    if which == "base":
        bundle = make_bundle(cfg.model, seed=cfg.pretrain.seed, ae=cfg.autoencoder)
        hist = pretrain_base(clips[:1], bundle, cfg.pretrain, out_dir=dirs.root)
        save_checkpoint(bundle, dirs.checkpoints / "base")
        window = cfg.pretrain.smooth_window
    else:
        resume = Path(args.resume) if args.resume else None
        if resume is None:
            if not args.base:
                raise SystemExit("train needs --base CHECKPOINT (from `pretrain`) or --resume CHECKPOINT")
            bundle = attach_controlnet(load_checkpoint(args.base), seed=cfg.train.seed)
        else:
            bundle = make_bundle(cfg.model, seed=cfg.pretrain.seed, ae=cfg.autoencoder)
        hist = train_controlnet(clips, bundle, cfg.train, out_dir=dirs.root, resume=resume)
        window = cfg.train.smooth_window
    if hist.losses:
        initial, final = hist.initial_final(window)
        print(f"{which}: {len(hist.losses)} steps, smoothed loss {initial:.4f} -> {final:.4f}")
    print(f"run directory: {dirs.root}")
    return 0


def cmd_enhance(args) -> int:
    cfg = _run_config(args, **{"enhance.scale": args.scale, "enhance.interp": args.interp,
                               "enhance.noise_level": args.noise_level, "enhance.cfg": args.cfg,
                               "enhance.steps": args.steps, "enhance.seed": args.seed})
    e = cfg.enhance
    clip = read_clip_dir(args.input, args.prompt)
    bundle = load_checkpoint(args.checkpoint)
    req = EnhanceRequest(clip, prompt=args.prompt, s_target=e.scale, n_interp=e.interp, t_prime=e.noise_level,
                         guidance=e.cfg, steps=e.steps, seed=e.seed)
    out = enhance(req, bundle)
    save_clip(out, args.out)
    f, h, w = out.frames.shape[:3]
    print(f"wrote {f} frames of {h}x{w} to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred, ref = read_clip_dir(args.pred), read_clip_dir(args.ref)
    keys = None
    manifest = Path(args.pred) / "manifest.json"
    if manifest.exists():
        keys = json.loads(manifest.read_text()).get("key_indices")
    if keys is None and pred.num_frames != ref.num_frames:
        raise SystemExit(f"prediction has {pred.num_frames} frames, reference {ref.num_frames}")
    report = evaluate(pred, ref, key_indices=keys)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(f"PSNR {report['psnr_mean']:.2f} dB (key frames {report['psnr_key_mean']:.2f}), "
          f"flicker {report['flicker']:.4f}")
    return 0


def cmd_repro(args) -> int:
    report = run_repro(args.profile, runs_dir=args.runs, overrides=args.set, config_path=args.config,
                       checkpoint=args.checkpoint)
    print(f"report: {Path(args.runs) / report['name'] / 'report' / 'report.txt'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.lr=1e-4 (repeatable)")

    p = argparse.ArgumentParser(prog="stvenhance", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic clip corpus")
    s.add_argument("--out", help="corpus directory (default: data.corpus or data/corpus)")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("augment-preview", parents=[common], help="export augmented training examples as frames")
    s.add_argument("--input", help="clip directory (default: first configured clip)")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment_preview)

    for name, which, text in (("pretrain", "base", "train the base video prior"),
                              ("train", "controlnet", "train the ControlNet on a frozen base")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--name", help="run name (runs/<name>/)")
        s.add_argument("--runs", default="runs")
        if which == "controlnet":
            s.add_argument("--base", help="checkpoint written by pretrain")
            s.add_argument("--resume", help="checkpoint to resume from")
        s.set_defaults(func=lambda a, w=which: _train(a, w))

    s = sub.add_parser("enhance", parents=[common], help="enhance a clip directory")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", help="defaults to the clip caption")
    s.add_argument("--scale", type=float)
    s.add_argument("--interp", type=int)
    s.add_argument("--noise-level", type=int)
    s.add_argument("--cfg", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval", help="PSNR and flicker of a prediction against a reference")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("repro", parents=[common], help="run a reproduction profile")
    s.add_argument("profile", choices=PROFILES)
    s.add_argument("--runs", default="runs")
    s.add_argument("--checkpoint", help="evaluate this checkpoint instead of training")
    s.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ClipFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
