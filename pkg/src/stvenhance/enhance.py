"""Inference: space-time enhancement with DDIM sampling and classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .augment import bilinear_resize, noise_augment
from .autoencoder import VideoClip, model_latents_to_pixels, pixels_to_model_latents
from .controlnet import key_mask_from_indices, scatter_key_frames
from .schedule import cfg_combine, ddim_step, ddim_timesteps
from .trainer import ModelBundle

PSNR_CAP = 99.0


class UntrainedBundleError(RuntimeError):
    pass


@dataclass
class EnhanceRequest:
    clip: VideoClip
    prompt: str | None = None
    s_target: float = 4.0
    n_interp: int = 0
    t_prime: int = 0
    guidance: float = 7.5
    steps: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.s_target < 1:
            raise ValueError(f"scale must be >= 1, got {self.s_target}")
        if self.n_interp < 0 or self.n_interp + 1 > 8:
            raise ValueError(f"n_interp={self.n_interp} gives a window outside 1..8")
        if not 0 <= self.t_prime <= 300:
            raise ValueError(f"noise level {self.t_prime} outside [0, 300]")
        if self.guidance < 0 or self.steps < 1:
            raise ValueError("guidance must be >= 0 and steps >= 1")


def plan_frames(k: int, n_interp: int) -> tuple[int, list[int]]:
    """Output frame count and key-frame positions for k inputs with n inserted frames per gap."""
    if k < 1 or n_interp < 0:
        raise ValueError("need k >= 1 and n_interp >= 0")
    m = n_interp + 1
    return (k - 1) * m + 1, list(range(0, (k - 1) * m + 1, m))


def target_size(h: int, w: int, s: float, factor: int) -> tuple[int, int]:
    """Scaled size rounded to the nearest multiple of the autoencoder factor."""
    rnd = lambda x: max(factor, int(round(x * s / factor)) * factor)
    return rnd(h), rnd(w)


@torch.no_grad()
def enhance(req: EnhanceRequest, bundle: ModelBundle, allow_untrained: bool = False) -> VideoClip:
    req.validate()
    if bundle.controlnet is None or (bundle.controlnet_steps == 0 and not allow_untrained):
        raise UntrainedBundleError("bundle has no trained ControlNet; train one or pass allow_untrained=True")
    base, net, sched, ae = bundle.backbone, bundle.controlnet, bundle.schedule, bundle.autoencoder
    base.eval()
    net.eval()
    frames = req.clip.frames
    k, h, w = frames.shape[:3]
    size = target_size(h, w, req.s_target, ae.factor)
    up = frames if size == (h, w) else np.clip(bilinear_resize(frames, size), 0.0, 1.0)

    rng = np.random.default_rng(req.seed)
    cond = noise_augment(pixels_to_model_latents(up, ae), req.t_prime, sched, rng)
    f_out, keys = plan_frames(k, req.n_interp)
    if f_out > base.cfg.max_frames:
        raise ValueError(f"{f_out} output frames exceed the model's frame capacity {base.cfg.max_frames}")
    cond_full = scatter_key_frames(torch.from_numpy(cond.transpose(0, 3, 1, 2).copy()), keys, f_out)[None]
    mask = key_mask_from_indices(keys, f_out)
    C = ae.channels
    z = torch.from_numpy(rng.standard_normal((1, f_out, C) + tuple(x // ae.factor for x in size),
                                             dtype=np.float32))

    prompt = req.clip.caption if req.prompt is None else req.prompt
    guided = req.guidance != 1
    captions = [prompt, ""] if guided else [prompt]
    nb = len(captions)
    ctx = base.text(captions)
    cond_b, mask_b = cond_full.expand(nb, -1, -1, -1, -1), mask.expand(nb, -1)
    tp = torch.full((nb,), float(req.t_prime))
    sv = torch.full((nb,), float(req.s_target))

    ts = ddim_timesteps(sched.T, req.steps)
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        zb = z.expand(nb, -1, -1, -1, -1)
        tt = torch.full((nb,), t_cur, dtype=torch.long)
        control = net(zb, cond_b, mask_b, tt, tp, sv, ctx)
        v = base(zb, base.time_embedding(tt, f_out), ctx, control=control)
        v = cfg_combine(v[:1], v[1:], req.guidance) if guided else v
        z = ddim_step(z, v, t_cur, t_next, sched)

    lat = z[0].permute(0, 2, 3, 1).numpy()
    out = model_latents_to_pixels(lat, ae)
    return VideoClip(out, caption=prompt, fps=req.clip.fps,
                     meta={"key_indices": keys, "s_target": req.s_target, "t_prime": req.t_prime})


# --- metrics -----------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def flicker_score(frames: np.ndarray) -> float:
    """Mean absolute second temporal difference."""
    x = np.asarray(frames, np.float64)
    if x.shape[0] < 3:
        return 0.0
    return float(np.mean(np.abs(x[2:] - 2 * x[1:-1] + x[:-2])))


def evaluate(output: VideoClip, reference: VideoClip, key_indices=None) -> dict:
    a, b = output.frames, reference.frames
    if a.shape != b.shape:
        raise ValueError(f"output {a.shape} and reference {b.shape} differ in size")
    per_frame = [psnr(x, y) for x, y in zip(a, b)]
    keys = list(range(len(per_frame))) if key_indices is None else list(key_indices)
    return {
        "psnr_per_frame": per_frame,
        "psnr_mean": float(np.mean(per_frame)),
        "psnr_key_mean": float(np.mean([per_frame[i] for i in keys])),
        "flicker": flicker_score(a),
        "flicker_reference": flicker_score(b),
    }
