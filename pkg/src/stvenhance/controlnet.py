"""Video ControlNet: trainable copy of the backbone encoder + middle block.

Condition latents enter only at key frames, right after the copied first
convolution, through a zero-initialised convolution. The noise-augmentation
level and the downscaling factor are embedded and added to the per-frame time
embedding of key frames only. Outputs pass through zero-initialised 1x1
convolutions and are added to the frozen backbone's skip and middle features.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    TextEmbedding,
    TimestepMLP,
    VideoUNet,
    _fold_frames,
    _unfold_frames,
    sinusoidal_embedding,
    skip_channels,
)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


@dataclass
class ConditioningEmbeddings:
    t_emb_seq: torch.Tensor  # (F, D)
    sigma_emb: torch.Tensor  # (D,)
    s_emb: torch.Tensor  # (D,)
    key_indices: list[int]


class VideoControlNet(nn.Module):
    def __init__(self, base: VideoUNet):
        super().__init__()
        cfg = self.cfg = base.cfg
        self.encoder = copy.deepcopy(base.encoder)
        self.time_mlp = copy.deepcopy(base.time_mlp)
        # same hyper-parameters as the copied first convolution
        ci = base.encoder.conv_in
        self.cond_conv_zero = _zero(nn.Conv2d(ci.in_channels, ci.out_channels, ci.kernel_size,
                                              stride=ci.stride, padding=ci.padding))
        self.sigma_zero = _zero(nn.Linear(cfg.time_dim, cfg.time_dim))
        self.scale_linear = nn.Linear(cfg.base_channels, cfg.time_dim)
        self.scale_zero = _zero(nn.Linear(cfg.time_dim, cfg.time_dim))
        self.zero_convs = nn.ModuleList([_zero(nn.Conv2d(c, c, 1)) for c in skip_channels(cfg)])
        self.mid_zero_conv = _zero(nn.Conv2d(cfg.channels[-1], cfg.channels[-1], 1))
        self.to(ci.weight.dtype)

    @property
    def dtype(self):
        return self.cond_conv_zero.weight.dtype

    def _sinusoid(self, x):
        return sinusoidal_embedding(x.to(self.dtype), self.cfg.base_channels)

    # embeddings --------------------------------------------------------

    def time_embedding(self, t: torch.Tensor, num_frames: int) -> torch.Tensor:
        emb = self.time_mlp(self._sinusoid(t))
        return emb[:, None, :].expand(-1, num_frames, -1)

    def sigma_mapping(self, t_prime: torch.Tensor) -> torch.Tensor:
        """Shared timestep encoding + MLP applied to the augmentation level (pre zero-linear)."""
        return self.time_mlp(self._sinusoid(t_prime))

    def sigma_embedding(self, t_prime: torch.Tensor) -> torch.Tensor:
        return self.sigma_zero(self.sigma_mapping(t_prime))

    def scale_embedding(self, s: torch.Tensor) -> torch.Tensor:
        return self.scale_zero(F.silu(self.scale_linear(self._sinusoid(s))))

    # forward -----------------------------------------------------------

    def first_layer(self, z_t, cond_full, key_mask):
        """Copied first conv on all frames plus Conv_zero(condition) on key frames."""
        h, f = _fold_frames(cond_full)
        extra = _unfold_frames(self.cond_conv_zero(h), f)
        return self.encoder.first_layer(z_t, extra, key_mask)

    def forward(self, z_t, cond_full, key_mask, t, t_prime, s, ctx):
        """Batched control pass.

        z_t, cond_full: (B, F, C, H, W), condition rows at non-key frames are ignored;
        key_mask: (B, F) bool; t, t_prime, s: (B,). Returns (skip_residuals, mid_residual).
        """
        if cond_full.shape != z_t.shape:
            raise ValueError(f"condition shape {tuple(cond_full.shape)} != latent shape {tuple(z_t.shape)}")
        f = z_t.shape[1]
        temb = self.time_embedding(t, f)
        temb = add_at_key_frames(temb, self.sigma_embedding(t_prime), key_mask)
        temb = add_at_key_frames(temb, self.scale_embedding(s), key_mask)
        h, fo = _fold_frames(cond_full)
        extra = _unfold_frames(self.cond_conv_zero(h), fo)
        skips, mid = self.encoder(z_t, temb, ctx, first_extra=extra, first_mask=key_mask)
        res = []
        for conv, feat in zip(self.zero_convs, skips, strict=True):
            x, fo = _fold_frames(feat)
            res.append(_unfold_frames(conv(x), fo))
        x, fo = _fold_frames(mid)
        return res, _unfold_frames(self.mid_zero_conv(x), fo)


def add_at_key_frames(temb: torch.Tensor, emb: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """temb (B, F, D) + emb (B, D) at key frames; other rows pass through bit-unchanged."""
    return torch.where(key_mask[..., None], temb + emb[:, None, :], temb)


def init_controlnet_from_base(base: VideoUNet, seed: int = 0) -> VideoControlNet:
    # only the scale projection draws random values; seed it so init is reproducible
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VideoControlNet(base)


def key_mask_from_indices(key_indices, num_frames: int, batch: int = 1) -> torch.Tensor:
    idx = list(key_indices)
    if any(i < 0 or i >= num_frames for i in idx):
        raise IndexError(f"key index out of range for {num_frames} frames: {idx}")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError(f"key indices must be strictly increasing: {idx}")
    mask = torch.zeros(batch, num_frames, dtype=torch.bool)
    mask[:, idx] = True
    return mask


def scatter_key_frames(cond_latents: torch.Tensor, key_indices, num_frames: int) -> torch.Tensor:
    """(k, ...) or (B, k, ...) key-frame latents -> zero-filled (.., F, ...) tensor."""
    single = cond_latents.ndim == 4
    c = cond_latents[None] if single else cond_latents
    if c.shape[1] != len(key_indices):
        raise ValueError(f"{c.shape[1]} condition frames for {len(key_indices)} key indices")
    full = c.new_zeros((c.shape[0], num_frames) + tuple(c.shape[2:]))
    full[:, list(key_indices)] = c
    return full[0] if single else full


# --- single-clip functional surface -----------------------------------------


def embed_timestep(t: float, f: int, net: VideoControlNet) -> torch.Tensor:
    if f < 1:
        raise ValueError("frame count must be >= 1")
    return net.time_embedding(torch.tensor([float(t)]), f)[0]


def embed_sigma(t_prime: int, net: VideoControlNet, t_max: int = 300) -> torch.Tensor:
    if not 0 <= t_prime <= t_max:
        raise ValueError(f"noise level {t_prime} outside [0, {t_max}]")
    return net.sigma_embedding(torch.tensor([float(t_prime)]))[0]


def embed_scale(s: float, net: VideoControlNet) -> torch.Tensor:
    if s < 1:
        raise ValueError(f"downscaling factor must be >= 1, got {s}")
    return net.scale_embedding(torch.tensor([float(s)]))[0]


def apply_video_aware(t_emb_seq, sigma_emb, s_emb, key_indices) -> torch.Tensor:
    """Add the sigma and scale embeddings to key-frame rows of a (F, D) sequence."""
    mask = key_mask_from_indices(key_indices, t_emb_seq.shape[0])
    out = add_at_key_frames(t_emb_seq[None], sigma_emb[None], mask)
    return add_at_key_frames(out, s_emb[None], mask)[0]


def conditioning_embeddings(t, f, t_prime, s, key_indices, net: VideoControlNet) -> ConditioningEmbeddings:
    return ConditioningEmbeddings(embed_timestep(t, f, net), embed_sigma(t_prime, net),
                                  embed_scale(s, net), list(key_indices))


def control_forward(z_t, cond_latents, key_indices, t, t_prime, s, text, net: VideoControlNet):
    """Single clip: z_t (F, C, H, W), cond_latents (k, C, H, W) -> ControlResiduals (unbatched)."""
    f = z_t.shape[0]
    if cond_latents.shape[1:] != z_t.shape[1:]:
        raise ValueError("condition latents must spatially match the noisy latents")
    cond_full = scatter_key_frames(cond_latents, key_indices, f)[None]
    mask = key_mask_from_indices(key_indices, f)
    ctx = text.tokens[None] if isinstance(text, TextEmbedding) else text[None]
    vec = lambda x: torch.tensor([float(x)])
    res, mid = net(z_t[None], cond_full, mask, vec(t), vec(t_prime), vec(s), ctx)
    return [r[0] for r in res], mid[0]


def denoise_full(z_t, cond_latents, key_indices, t, t_prime, s, text, base: VideoUNet,
                 net: VideoControlNet):
    """Backbone v-prediction with ControlNet residuals injected (single clip)."""
    f = z_t.shape[0]
    res, mid = control_forward(z_t, cond_latents, key_indices, t, t_prime, s, text, net)
    ctx = text.tokens[None] if isinstance(text, TextEmbedding) else text[None]
    temb = base.time_embedding(torch.tensor([float(t)]), f)
    control = ([r[None] for r in res], mid[None])
    return base(z_t[None], temb, ctx, control=control)[0]
