"""Reproduction profiles and the metrics they report.

Every run lives in ``runs/<name>/`` with the resolved ``config.yaml``,
``checkpoints/``, ``logs/`` and ``report/``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import bilinear_resize
from .autoencoder import VideoClip
from .config import RunConfig, load_config
from .enhance import EnhanceRequest, enhance, psnr
from .synthdata import load_corpus, make_clips
from .trainer import (
    ModelBundle,
    TrainHistory,
    attach_controlnet,
    load_checkpoint,
    make_bundle,
    pretrain_base,
    save_checkpoint,
    train_controlnet,
)

log = logging.getLogger(__name__)

PROFILES = ("smoke", "overfit", "ablation")
ABLATION_SCALES = (1.0, 2.5, 4.0, 8.0)
ABLATION_NOISE = (0, 150, 300)
NOISE_KNOB_LEVELS = (0, 100, 200, 300)


@dataclass
class RunDirs:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def report(self) -> Path:
        return self.root / "report"

    def create(self) -> "RunDirs":
        for d in (self.checkpoints, self.logs, self.report):
            d.mkdir(parents=True, exist_ok=True)
        return self


def load_clips(cfg: RunConfig) -> list[VideoClip]:
    d = cfg.data
    if d.corpus:
        clips = load_corpus(d.corpus)
        if not clips:
            raise FileNotFoundError(f"corpus {d.corpus} holds no clips; run `stvenhance synth-data` first")
        return clips[: d.n_clips]
    return make_clips(d.n_clips, d.seed, f=d.frames, H=d.height, W=d.width)


# --- metrics --------------------------------------------------------------------


def low_res(clip: VideoClip, s: float) -> VideoClip:
    """The clip bilinearly shrunk by s, standing in for a low-resolution input."""
    h, w = clip.size
    size = (max(1, int(round(h / s))), max(1, int(round(w / s))))
    frames = clip.frames if size == (h, w) else np.clip(bilinear_resize(clip.frames, size), 0.0, 1.0)
    return VideoClip(frames, clip.caption, clip.fps)


def upsample_to(clip: VideoClip, size) -> np.ndarray:
    if clip.size == tuple(size):
        return clip.frames
    return np.clip(bilinear_resize(clip.frames, tuple(size)), 0.0, 1.0)


def _request(clip, cfg: RunConfig, **kw) -> EnhanceRequest:
    e = cfg.enhance
    base = dict(prompt=e.prompt or None, s_target=e.scale, n_interp=e.interp, t_prime=e.noise_level,
                guidance=e.cfg, steps=e.steps, seed=e.seed)
    base.update(kw)
    return EnhanceRequest(clip, **base)


def scale_metrics(bundle: ModelBundle, clips, cfg: RunConfig, s: float, t_prime: int = 0) -> dict:
    """Enhance s-times shrunk clips back to full size; compare with the originals and with bilinear."""
    ours, bilinear, deviation = [], [], []
    for clip in clips:
        small = low_res(clip, s)
        out = enhance(_request(small, cfg, s_target=s, n_interp=0, t_prime=t_prime), bundle)
        # round(round(H/s)*s) can miss H by a pixel for non-integer s; score at the reference size
        got = upsample_to(out, clip.size)
        up = upsample_to(small, clip.size)
        ours.append(psnr(got, clip.frames))
        bilinear.append(psnr(up, clip.frames))
        deviation.append(float(np.mean(np.abs(got - up))))
    return {"s": s, "t_prime": t_prime, "psnr": float(np.mean(ours)), "psnr_bilinear": float(np.mean(bilinear)),
            "deviation": float(np.mean(deviation))}


def identity_psnr(bundle: ModelBundle, clips, cfg: RunConfig) -> float:
    vals = [psnr(enhance(_request(c, cfg, s_target=1.0, n_interp=0, t_prime=0), bundle).frames, c.frames)
            for c in clips]
    return float(np.mean(vals))


def noise_knob(bundle: ModelBundle, clips, cfg: RunConfig, s: float = 4.0, levels=NOISE_KNOB_LEVELS) -> list[float]:
    """Mean deviation of the output from the bilinearly upsampled input at each noise level."""
    return [scale_metrics(bundle, clips, cfg, s, t)["deviation"] for t in levels]


def loss_ratio(history: TrainHistory, window: int) -> dict:
    initial, final = history.initial_final(window)
    return {"initial": initial, "final": final, "ratio": final / initial}


# --- pipeline ---------------------------------------------------------------------


def train_pipeline(cfg: RunConfig, dirs: RunDirs, clips=None) -> tuple[ModelBundle, dict]:
    """Pretrain the base on the first clip, then train the ControlNet on all clips."""
    clips = load_clips(cfg) if clips is None else clips
    torch.manual_seed(cfg.train.seed)
    bundle = make_bundle(cfg.model, seed=cfg.pretrain.seed, ae=cfg.autoencoder)
    t0 = time.time()
    base_hist = pretrain_base(clips[:1], bundle, cfg.pretrain, out_dir=dirs.root)
    save_checkpoint(bundle, dirs.checkpoints / "base")
    t1 = time.time()
    attach_controlnet(bundle, seed=cfg.train.seed)
    ctl_hist = train_controlnet(clips, bundle, cfg.train, out_dir=dirs.root)
    t2 = time.time()
    info = {
        "base_loss": loss_ratio(base_hist, cfg.pretrain.smooth_window),
        "controlnet_loss": loss_ratio(ctl_hist, cfg.train.smooth_window),
        "seconds": {"pretrain": t1 - t0, "train": t2 - t1},
        "histories": {"base": base_hist.losses, "controlnet": ctl_hist.losses},
    }
    return bundle, info


def _plot_losses(info: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import smoothed

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, key in zip(axes, ("base", "controlnet")):
        losses = info["histories"][key]
        ax.plot(losses, lw=0.5, alpha=0.4, label="loss")
        ax.plot(smoothed(losses, 25), lw=1.5, label="smoothed")
        ax.set_title(f"{key} training")
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_ablation(rows: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.2))
    for tp in sorted({r["t_prime"] for r in rows}):
        sel = [r for r in rows if r["t_prime"] == tp]
        a.plot([r["s"] for r in sel], [r["psnr"] for r in sel], "o-", label=f"t'={tp}")
    base = [r for r in rows if r["t_prime"] == rows[0]["t_prime"]]
    a.plot([r["s"] for r in base], [r["psnr_bilinear"] for r in base], "k--", label="bilinear")
    a.set_xlabel("scale s")
    a.set_ylabel("PSNR (dB)")
    a.legend()
    for s in sorted({r["s"] for r in rows}):
        sel = [r for r in rows if r["s"] == s]
        b.plot([r["t_prime"] for r in sel], [r["deviation"] for r in sel], "o-", label=f"s={s:g}")
    b.set_xlabel("noise level t'")
    b.set_ylabel("mean |output - upsampled input|")
    b.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _write_report(dirs: RunDirs, report: dict) -> Path:
    # wall-clock timings live apart so that reruns give byte-identical reports
    slim = {k: v for k, v in report.items() if k not in ("histories", "seconds")}
    if "seconds" in report:
        (dirs.report / "timing.json").write_text(json.dumps(report["seconds"], indent=2), encoding="utf-8")
    (dirs.report / "metrics.json").write_text(json.dumps(slim, indent=2), encoding="utf-8")
    lines = [f"profile: {report['profile']}"]
    for key, value in slim.items():
        if key in ("profile", "rows"):
            continue
        lines.append(f"{key}: {json.dumps(value)}")
    for row in report.get("rows", []):
        lines.append("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    path = dirs.report / "report.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# --- profiles -----------------------------------------------------------------------


def profile_config(profile: str, overrides=(), config_path=None) -> RunConfig:
    presets = {
        "smoke": ["name=smoke", "data.n_clips=2", "data.frames=5", "data.height=16", "data.width=16",
                  "pretrain.steps=20", "train.steps=50", "train.checkpoint_every=25", "enhance.steps=10"],
        "overfit": ["name=overfit"],
        "ablation": ["name=ablation"],
    }
    if profile not in presets:
        raise ValueError(f"unknown profile {profile!r}; choose from {PROFILES}")
    paths = [config_path] if config_path else []
    return load_config(paths, presets[profile] + list(overrides))


def run_repro(profile: str, runs_dir="runs", overrides=(), config_path=None, checkpoint=None) -> dict:
    """Run a profile end to end and return its report (also written under ``report/``)."""
    cfg = profile_config(profile, overrides, config_path)
    torch.set_num_threads(1)
    dirs = RunDirs(Path(runs_dir) / cfg.name).create()
    cfg.save(dirs.config)
    clips = load_clips(cfg)
    report = {"profile": profile, "name": cfg.name}

    if checkpoint is not None:
        bundle = load_checkpoint(checkpoint)
    elif profile == "ablation" and (Path(runs_dir) / "overfit" / "checkpoints" / "final").exists():
        bundle = load_checkpoint(Path(runs_dir) / "overfit" / "checkpoints" / "final")
        report["checkpoint"] = str(Path(runs_dir) / "overfit" / "checkpoints" / "final")
    else:
        bundle, info = train_pipeline(cfg, dirs, clips)
        report.update({k: v for k, v in info.items() if k != "histories"})
        report["histories"] = info["histories"]
        _plot_losses(info, dirs.report / "losses.png")

    if profile == "smoke":
        out = enhance(_request(low_res(clips[0], 2.0), cfg, s_target=2.0), bundle)
        report["enhanced_shape"] = list(out.frames.shape)
        report["psnr_s2"] = psnr(out.frames, clips[0].frames)
    elif profile == "overfit":
        report["identity_psnr"] = identity_psnr(bundle, clips, cfg)
        report["scale4"] = scale_metrics(bundle, clips, cfg, 4.0)
        report["noise_knob"] = dict(zip(map(str, NOISE_KNOB_LEVELS), noise_knob(bundle, clips, cfg)))
    else:
        rows = [scale_metrics(bundle, clips, cfg, s, tp) for s in ABLATION_SCALES for tp in ABLATION_NOISE]
        report["rows"] = rows
        _plot_ablation(rows, dirs.report / "ablation.png")
    _write_report(dirs, report)
    return report
