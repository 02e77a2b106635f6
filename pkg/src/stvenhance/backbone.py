"""Frozen video prior: a small 3D-UNet v-predictor.

Every spatial ResBlock is followed by a temporal convolution and every
spatial transformer by a temporal attention layer. Temporal layers are
residual branches whose output projections start at exactly zero, so an
untrained temporal stack is an identity map and frames decouple.

Activations are laid out as ``(B, F, C, H, W)``.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 48
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 3)
    attention_levels: tuple = (1, 2)
    temporal_kernel: int = 3
    num_heads: int = 4
    groups: int = 8
    text_dim: int = 64
    text_buckets: int = 1024
    max_tokens: int = 8
    max_frames: int = 25

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    @property
    def channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_mult)

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    def validate(self) -> None:
        if self.temporal_kernel != 3:
            raise ValueError("temporal kernel must be 3")
        if self.levels < 1:
            raise ValueError("need at least one resolution level")
        if self.levels - 1 not in self.attention_levels:
            raise ValueError("the lowest-resolution level must carry attention")
        if any(not 0 <= l < self.levels for l in self.attention_levels):
            raise ValueError(f"attention levels {self.attention_levels} outside 0..{self.levels - 1}")
        for ch in self.channels:
            if ch % self.groups or ch % self.num_heads:
                raise ValueError(f"channel width {ch} must be divisible by groups and heads")
        if self.base_channels % 2:
            raise ValueError("base_channels must be even (sinusoidal width)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        for key in ("channel_mult", "attention_levels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# desk-scale default and the micro config for CPU overfit runs (pairs with a factor-1 autoencoder)
DEFAULT_CONFIG = BackboneConfig()
MICRO_CONFIG = BackboneConfig(
    in_channels=3, base_channels=16, channel_mult=(1, 2), attention_levels=(1,), num_heads=2,
    groups=8, text_dim=32, text_buckets=256, max_tokens=6,
)


# ---------------------------------------------------------------------------
# embeddings


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved [sin, cos] encoding of real-valued positions: (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[..., None] * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


class TimestepMLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear_1 = nn.Linear(in_dim, out_dim)
        self.linear_2 = nn.Linear(out_dim, out_dim)

    def forward(self, x):
        return self.linear_2(F.silu(self.linear_1(x)))


_WORD = re.compile(r"[a-z0-9]+")


def tokenize(caption: str, buckets: int, max_tokens: int) -> list[int]:
    """Hash-bucket token ids in 1..buckets, padded with the null id 0."""
    ids = [zlib.crc32(w.encode("utf-8")) % buckets + 1 for w in _WORD.findall(caption.lower())]
    ids = ids[:max_tokens]
    return ids + [0] * (max_tokens - len(ids))


@dataclass
class TextEmbedding:
    tokens: torch.Tensor  # (L, text_dim)
    is_null: bool = False
    caption: str = field(default="", repr=False)


class TextEncoder(nn.Module):
    """Learned embedding table over hash buckets; row 0 is the null/pad vector."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.buckets, self.max_tokens = cfg.text_buckets, cfg.max_tokens
        self.table = nn.Embedding(cfg.text_buckets + 1, cfg.text_dim)
        nn.init.normal_(self.table.weight, std=1.0)

    def token_ids(self, caption: str) -> list[int]:
        return tokenize(caption, self.buckets, self.max_tokens)

    def forward(self, captions: list[str]) -> torch.Tensor:
        ids = torch.tensor([self.token_ids(c) for c in captions], dtype=torch.long,
                           device=self.table.weight.device)
        return self.table(ids)


# ---------------------------------------------------------------------------
# spatial layers (frames folded into the batch)


def _fold_frames(x):
    return rearrange(x, "b f c h w -> (b f) c h w"), x.shape[1]


def _unfold_frames(x, f):
    return rearrange(x, "(b f) c h w -> b f c h w", f=f)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        # temb: (B, F, time_dim), one embedding per frame
        h, f = _fold_frames(x)
        out = self.conv1(F.silu(self.norm1(h)))
        out = out + self.time_proj(F.silu(temb)).reshape(-1, out.shape[1], 1, 1)
        out = self.conv2(F.silu(self.norm2(out)))
        return _unfold_frames(self.skip(h) + out, f)


def _attention(q, k, v, heads):
    q, k, v = (rearrange(a, "n l (h d) -> n h l d", h=heads) for a in (q, k, v))
    out = F.scaled_dot_product_attention(q, k, v)
    return rearrange(out, "n h l d -> n l (h d)")


class SpatialTransformer(nn.Module):
    """Self-attention over H*W positions, then cross-attention to text tokens."""

    def __init__(self, ch: int, heads: int, text_dim: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.norm_self = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch, bias=False)
        self.out_self = nn.Linear(ch, ch)
        self.norm_cross = nn.LayerNorm(ch)
        self.q_cross = nn.Linear(ch, ch, bias=False)
        self.kv_cross = nn.Linear(text_dim, 2 * ch, bias=False)
        self.out_cross = nn.Linear(ch, ch)
        self.norm_ff = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, ctx):
        # ctx: (B, L, text_dim), shared by all frames of a sample
        h, f = _fold_frames(x)
        H, W = h.shape[-2:]
        y = rearrange(self.proj_in(self.norm(h)), "n c h w -> n (h w) c")
        q, k, v = self.qkv(self.norm_self(y)).chunk(3, dim=-1)
        y = y + self.out_self(_attention(q, k, v, self.heads))
        ctx = ctx.repeat_interleave(f, dim=0)
        k, v = self.kv_cross(ctx).chunk(2, dim=-1)
        y = y + self.out_cross(_attention(self.q_cross(self.norm_cross(y)), k, v, self.heads))
        y = y + self.ff(self.norm_ff(y))
        y = self.proj_out(rearrange(y, "n (h w) c -> n c h w", h=H, w=W))
        return _unfold_frames(h + y, f)


# ---------------------------------------------------------------------------
# temporal layers (spatial sites folded into the batch)


class TemporalConv(nn.Module):
    """1-D convolution stack along the frame axis; residual, zero-initialised output."""

    def __init__(self, ch: int, groups: int, kernel: int = 3):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch)
        self.conv1 = nn.Conv1d(ch, ch, kernel, padding=kernel // 2)
        self.norm2 = nn.GroupNorm(groups, ch)
        self.conv_out = nn.Conv1d(ch, ch, kernel, padding=kernel // 2)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x):
        b, f, c, H, W = x.shape
        h = rearrange(x, "b f c h w -> (b h w) c f")
        h = self.conv1(F.silu(self.norm1(h)))
        h = self.conv_out(F.silu(self.norm2(h)))
        return x + rearrange(h, "(b h w) c f -> b f c h w", b=b, h=H, w=W)


class TemporalAttention(nn.Module):
    """Self-attention along the frame axis at each spatial site."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch, bias=False)
        self.out = nn.Linear(ch, ch)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        b, f, c, H, W = x.shape
        h = rearrange(x, "b f c h w -> (b h w) f c")
        q, k, v = self.qkv(self.norm(h)).chunk(3, dim=-1)
        h = self.out(_attention(q, k, v, self.heads))
        return x + rearrange(h, "(b h w) f c -> b f c h w", b=b, h=H, w=W)


TEMPORAL_OUTPUT_LAYERS = ("conv_out", "out")


class STResBlock(nn.Module):
    def __init__(self, cin, cout, cfg: BackboneConfig):
        super().__init__()
        self.spatial = ResBlock(cin, cout, cfg.time_dim, cfg.groups)
        self.temporal = TemporalConv(cout, cfg.groups, cfg.temporal_kernel)

    def forward(self, x, temb, ctx):
        return self.temporal(self.spatial(x, temb))


class STAttention(nn.Module):
    def __init__(self, ch, cfg: BackboneConfig):
        super().__init__()
        self.spatial = SpatialTransformer(ch, cfg.num_heads, cfg.text_dim, cfg.groups)
        self.temporal = TemporalAttention(ch, cfg.num_heads)

    def forward(self, x, temb, ctx):
        return self.temporal(self.spatial(x, ctx))


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x, temb, ctx):
        h, f = _fold_frames(x)
        return _unfold_frames(self.conv(h), f)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, size):
        h, f = _fold_frames(x)
        h = F.interpolate(h, size=size, mode="nearest")
        return _unfold_frames(self.conv(h), f)


# ---------------------------------------------------------------------------
# UNet


class Encoder(nn.Module):
    """First convolution, down path and middle block; the part the ControlNet copies.

    ``forward`` returns the skip features (in creation order) and the middle
    feature. ``first_extra`` is added after ``conv_in`` where ``first_mask``
    (B, F) is true, leaving other frames untouched.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        chs = cfg.channels
        self.conv_in = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)
        self.down = nn.ModuleList()
        cin = chs[0]
        for level, ch in enumerate(chs):
            layers = nn.ModuleList([STResBlock(cin, ch, cfg)])
            if level in cfg.attention_levels:
                layers.append(STAttention(ch, cfg))
            self.down.append(layers)
            cin = ch
        self.downsamplers = nn.ModuleList([Downsample(ch) for ch in chs[:-1]])
        self.mid = nn.ModuleList([STResBlock(chs[-1], chs[-1], cfg), STAttention(chs[-1], cfg),
                                  STResBlock(chs[-1], chs[-1], cfg)])

    def first_layer(self, x, first_extra=None, first_mask=None):
        h, f = _fold_frames(x)
        h = _unfold_frames(self.conv_in(h), f)
        if first_extra is not None:
            mask = first_mask[:, :, None, None, None]
            h = torch.where(mask, h + first_extra, h)
        return h

    def forward(self, x, temb, ctx, first_extra=None, first_mask=None):
        h = self.first_layer(x, first_extra, first_mask)
        skips = [h]
        for level, layers in enumerate(self.down):
            for layer in layers:
                h = layer(h, temb, ctx)
            skips.append(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h, temb, ctx)
                skips.append(h)
        for layer in self.mid:
            h = layer(h, temb, ctx)
        return skips, h


def skip_channels(cfg: BackboneConfig) -> list[int]:
    chs = cfg.channels
    out = [chs[0]]
    for level, ch in enumerate(chs):
        out.append(ch)
        if level < cfg.levels - 1:
            out.append(ch)
    return out


class Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        chs = cfg.channels
        skip_ch = skip_channels(cfg)
        self.up = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        cin = chs[-1]
        for level in reversed(range(cfg.levels)):
            ch = chs[level]
            blocks = nn.ModuleList()
            for _ in range(2):
                layers = nn.ModuleList([STResBlock(cin + skip_ch.pop(), ch, cfg)])
                if level in cfg.attention_levels:
                    layers.append(STAttention(ch, cfg))
                blocks.append(layers)
                cin = ch
            self.up.append(blocks)
            if level > 0:
                self.upsamplers.append(Upsample(ch))
        self.norm_out = nn.GroupNorm(cfg.groups, chs[0])
        self.conv_out = nn.Conv2d(chs[0], cfg.in_channels, 3, padding=1)

    def forward(self, h, skips, temb, ctx):
        skips = list(skips)
        for i, blocks in enumerate(self.up):
            for layers in blocks:
                h = torch.cat([h, skips.pop()], dim=2)
                for layer in layers:
                    h = layer(h, temb, ctx)
            if i < len(self.upsamplers):
                h = self.upsamplers[i](h, skips[-1].shape[-2:])
        x, f = _fold_frames(h)
        return _unfold_frames(self.conv_out(F.silu(self.norm_out(x))), f)


class VideoUNet(nn.Module):
    """The base denoiser f_theta: (z_t, per-frame time embedding, text) -> v."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.text = TextEncoder(cfg)
        self.time_mlp = TimestepMLP(cfg.base_channels, cfg.time_dim)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def time_embedding(self, t: torch.Tensor, num_frames: int) -> torch.Tensor:
        """(B,) steps -> (B, F, time_dim), the same vector for every frame."""
        dtype = self.time_mlp.linear_1.weight.dtype
        emb = self.time_mlp(sinusoidal_embedding(t.to(dtype), self.cfg.base_channels))
        return emb[:, None, :].expand(-1, num_frames, -1)

    def check_input(self, z):
        if z.ndim != 5 or z.shape[2] != self.cfg.in_channels:
            raise ValueError(f"expected (B, F, {self.cfg.in_channels}, H, W) latents, got {tuple(z.shape)}")
        if z.shape[1] > self.cfg.max_frames:
            raise ValueError(f"{z.shape[1]} frames exceeds frame capacity {self.cfg.max_frames}")

    def forward(self, z_t, temb_seq, ctx, control=None):
        """``control`` is an optional (skip_residuals, mid_residual) pair."""
        self.check_input(z_t)
        if temb_seq.shape[:2] != z_t.shape[:2]:
            raise ValueError("need one time embedding per frame")
        skips, h = self.encoder(z_t, temb_seq, ctx)
        if control is not None:
            res, mid_res = control
            skips = [s + r for s, r in zip(skips, res, strict=True)]
            h = h + mid_res
        return self.decoder(h, skips, temb_seq, ctx)


def init_backbone(cfg: BackboneConfig = DEFAULT_CONFIG, seed: int = 0) -> VideoUNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VideoUNet(cfg)


def temporal_output_parameters(model: nn.Module) -> dict[str, torch.Tensor]:
    """Output-layer tensors of every temporal convolution / attention."""
    out = {}
    for name, mod in model.named_modules():
        if isinstance(mod, TemporalConv):
            out[f"{name}.conv_out.weight"] = mod.conv_out.weight
            out[f"{name}.conv_out.bias"] = mod.conv_out.bias
        elif isinstance(mod, TemporalAttention):
            out[f"{name}.out.weight"] = mod.out.weight
            out[f"{name}.out.bias"] = mod.out.bias
    return out


def embed_text(caption: str, model: VideoUNet) -> TextEmbedding:
    """Caption -> token embedding sequence; the empty string yields the null embedding."""
    tokens = model.text([caption])[0]
    is_null = not any(model.text.token_ids(caption))
    return TextEmbedding(tokens=tokens, is_null=is_null, caption=caption)


def denoise_base(z_t, t_emb_seq, text, model: VideoUNet):
    """Single-clip convenience: z_t is (F, C, H, W) or batched (B, F, C, H, W)."""
    ctx = text.tokens if isinstance(text, TextEmbedding) else text
    single = z_t.ndim == 4
    if single:
        z_t, t_emb_seq, ctx = z_t[None], t_emb_seq[None], ctx[None]
    out = model(z_t, t_emb_seq, ctx)
    return out[0] if single else out
