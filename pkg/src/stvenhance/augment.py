"""Space-time data augmentation.

Chain for one training example: all frames -> key frames every m-th frame ->
bilinear downscale by s -> bilinear upscale back -> frame-wise encode ->
noise augmentation at level t' using the diffusion schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import AutoencoderConfig, VideoClip, pixels_to_model_latents
from .schedule import DEFAULT_AUG_T_MAX, NoiseSchedule


@dataclass(frozen=True)
class AugmentConfig:
    windows: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    scale_min: float = 1.0
    scale_max: float = 8.0
    t_prime_max: int = DEFAULT_AUG_T_MAX

    def validate(self) -> None:
        if not self.windows or any(not 1 <= m <= 8 for m in self.windows):
            raise ValueError(f"windows must be a non-empty subset of 1..8, got {self.windows}")
        if not 1.0 <= self.scale_min <= self.scale_max <= 8.0:
            raise ValueError("scale range must satisfy 1 <= min <= max <= 8")
        if not 0 <= self.t_prime_max <= DEFAULT_AUG_T_MAX:
            raise ValueError(f"t_prime_max must lie in [0, {DEFAULT_AUG_T_MAX}]")


@dataclass(frozen=True)
class AugmentationSpec:
    m: int
    s: float
    t_prime: int
    key_indices: tuple
    seed: int

    def validate(self, f: int, t_prime_max: int = DEFAULT_AUG_T_MAX) -> None:
        if not 1 <= self.m <= 8:
            raise ValueError(f"window m={self.m} outside 1..8")
        if not 1.0 <= self.s <= 8.0:
            raise ValueError(f"scale s={self.s} outside [1, 8]")
        if not 0 <= self.t_prime <= t_prime_max:
            raise ValueError(f"t_prime={self.t_prime} outside [0, {t_prime_max}]")
        if tuple(self.key_indices) != tuple(select_key_frames(f, self.m)):
            raise ValueError("key indices inconsistent with (f, m)")


@dataclass
class ConditionLatents:
    latents: np.ndarray  # (k, h, w, C)
    spec: AugmentationSpec | None = None
    stages: dict = field(default_factory=dict, repr=False)


def admissible_windows(f: int, windows) -> list[int]:
    if f == 1:
        return [m for m in windows if m == 1]
    return sorted(m for m in windows if (f - 1) % m == 0)


def sample_scale(rng: np.random.Generator, lo: float = 1.0, hi: float = 8.0, size=None):
    """Draw s with density proportional to s on [lo, hi] (inverse CDF)."""
    u = rng.random(size)
    return np.sqrt(lo * lo + u * (hi * hi - lo * lo))


def sample_window(rng: np.random.Generator, admissible, size=None):
    m = np.asarray(admissible, dtype=np.int64)
    return rng.choice(m, size=size, p=m / m.sum())


def sample_spec(rng: np.random.Generator, f: int, config: AugmentConfig = AugmentConfig()) -> AugmentationSpec:
    adm = admissible_windows(f, config.windows)
    if not adm:
        raise ValueError(f"no admissible window in {config.windows} for f={f} (need (f-1) % m == 0)")
    m = int(sample_window(rng, adm))
    s = float(sample_scale(rng, config.scale_min, config.scale_max))
    t_prime = int(rng.integers(0, config.t_prime_max + 1))
    seed = int(rng.integers(0, 2**31 - 1))
    return AugmentationSpec(m=m, s=s, t_prime=t_prime, key_indices=tuple(select_key_frames(f, m)), seed=seed)


def select_key_frames(f: int, m: int) -> list[int]:
    if f < 1 or m < 1:
        raise ValueError("f and m must be positive")
    if (f - 1) % m:
        raise ValueError(f"(f - 1) = {f - 1} is not divisible by window m = {m}")
    return list(range(0, f, m))


def bilinear_resize(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """(N, H, W, 3) bilinear resize with half-pixel centres (align_corners=False)."""
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=False)
    return y.permute(0, 2, 3, 1).numpy()


def degrade_frames(key_frames: np.ndarray, s: float) -> np.ndarray:
    if s < 1:
        raise ValueError(f"downscaling factor must be >= 1, got {s}")
    key_frames = np.asarray(key_frames, dtype=np.float32)
    if s == 1:
        return key_frames.copy()
    H, W = key_frames.shape[1:3]
    small = (int(round(H / s)), int(round(W / s)))
    if min(small) < 1:
        raise ValueError(f"scale {s} shrinks {H}x{W} frames below one pixel")
    return bilinear_resize(bilinear_resize(key_frames, small), (H, W))


def noise_augment(cond: np.ndarray, t_prime: int, sched: NoiseSchedule, rng: np.random.Generator,
                  t_prime_max: int = DEFAULT_AUG_T_MAX) -> np.ndarray:
    if not 0 <= t_prime <= t_prime_max:
        raise ValueError(f"t_prime={t_prime} outside [0, {t_prime_max}]")
    cond = np.asarray(cond, dtype=np.float32)
    eps = rng.standard_normal(cond.shape, dtype=np.float32)
    if t_prime == 0:
        return cond.copy()
    a, s = sched.coeffs(t_prime)
    return (np.float32(a) * cond + np.float32(s) * eps).astype(np.float32)


def build_training_example(clip: VideoClip, spec: AugmentationSpec, sched: NoiseSchedule,
                           ae: AutoencoderConfig = AutoencoderConfig(),
                           rng: np.random.Generator | None = None, keep_stages: bool = False):
    """Returns (ground-truth latents of all f frames, ConditionLatents of the k key frames)."""
    f = clip.num_frames
    spec.validate(f)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    full = pixels_to_model_latents(clip.frames, ae)
    keys = clip.frames[list(spec.key_indices)]
    degraded = degrade_frames(keys, spec.s)
    encoded = pixels_to_model_latents(degraded, ae)
    noisy = noise_augment(encoded, spec.t_prime, sched, rng)
    stages = dict(keys=keys, degraded=degraded, encoded=encoded) if keep_stages else {}
    return full, ConditionLatents(noisy, spec, stages)
