"""Frame-wise pixel <-> latent mapping.

The default codec is an exact space-to-depth rearrangement: an r x r pixel
patch with 3 channels becomes one latent site with 3*r*r channels. Values are
moved, never mixed, so decode(encode(x)) == x bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_FPS = 24


@dataclass
class VideoClip:
    frames: np.ndarray  # (F, H, W, 3), float32 in [0, 1]
    caption: str = ""
    fps: int = DEFAULT_FPS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (F, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a clip needs at least one frame")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class LatentVideo:
    latents: np.ndarray  # (F, H/r, W/r, C)
    spatial_factor: int = 4


@dataclass(frozen=True)
class AutoencoderConfig:
    kind: str = "space_to_depth"
    factor: int = 4

    @property
    def channels(self) -> int:
        return 3 * self.factor * self.factor

    def validate(self) -> None:
        if self.kind != "space_to_depth":
            raise ValueError(f"unsupported autoencoder kind {self.kind!r}")
        if self.factor < 1:
            raise ValueError("autoencoder factor must be >= 1")


def encode_frames(frames: np.ndarray, factor: int = 4) -> np.ndarray:
    """(F, H, W, 3) -> (F, H/r, W/r, 3*r*r); channel order is (dy, dx, rgb)."""
    F_, H, W, c = frames.shape
    if H % factor or W % factor:
        raise ValueError(f"frame size {H}x{W} not divisible by autoencoder factor {factor}")
    x = frames.reshape(F_, H // factor, factor, W // factor, factor, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(F_, H // factor, W // factor, factor * factor * c))


def decode_frames(latents: np.ndarray, factor: int = 4, clip: bool = True) -> np.ndarray:
    F_, h, w, C = latents.shape
    if C != 3 * factor * factor:
        raise ValueError(f"latent has {C} channels, expected {3 * factor * factor} for factor {factor}")
    x = latents.reshape(F_, h, w, factor, factor, 3).transpose(0, 1, 3, 2, 4, 5)
    x = np.ascontiguousarray(x.reshape(F_, h * factor, w * factor, 3))
    return np.clip(x, 0.0, 1.0) if clip else x


def encode_video(clip: VideoClip, cfg: AutoencoderConfig = AutoencoderConfig()) -> LatentVideo:
    return LatentVideo(encode_frames(clip.frames, cfg.factor), cfg.factor)


def decode_video(lat: LatentVideo, cfg: AutoencoderConfig | None = None) -> np.ndarray:
    factor = cfg.factor if cfg is not None else lat.spatial_factor
    return decode_frames(lat.latents, factor)


def to_model_range(frames: np.ndarray) -> np.ndarray:
    """[0, 1] pixels -> [-1, 1], the range the diffusion model sees."""
    return frames * 2.0 - 1.0


def from_model_range(frames: np.ndarray) -> np.ndarray:
    return np.clip((frames + 1.0) * 0.5, 0.0, 1.0)


def pixels_to_model_latents(frames: np.ndarray, cfg: AutoencoderConfig) -> np.ndarray:
    return encode_frames(to_model_range(np.asarray(frames, dtype=np.float32)), cfg.factor)


def model_latents_to_pixels(latents: np.ndarray, cfg: AutoencoderConfig) -> np.ndarray:
    return from_model_range(decode_frames(latents, cfg.factor, clip=False)).astype(np.float32)
