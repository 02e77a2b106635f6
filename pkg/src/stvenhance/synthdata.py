"""Synthetic moving-shape clips with templated captions, and frame-directory I/O.

Layout of a clip directory::

    manifest.json        {"caption", "fps", "num_frames", "height", "width",
                          "frames": ["frame_00000.png", ...], "recipe": {...}}
    frame_00000.png ...  8-bit RGB

A corpus directory holds ``corpus.json`` (``{"seed", "num_clips", "clips": [...]}``)
plus one ``clip_XXXX`` directory per clip.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autoencoder import DEFAULT_FPS, VideoClip

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.85, 0.2, 0.8),
    "orange": (1.0, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
}
BACKGROUNDS = {
    "black": (0.02, 0.02, 0.02),
    "navy": (0.05, 0.07, 0.25),
    "gray": (0.25, 0.25, 0.25),
}
CAPTION_TEMPLATE = "a {color} {shape} moving {direction}"
MANIFEST = "manifest.json"
CORPUS_INDEX = "corpus.json"
_CAPTION_RE = re.compile(r"^a (?P<color>\w+) (?P<shape>\w+) moving (?P<direction>[\w -]+)$")


class ClipFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ClipRecipe:
    shape: str
    color: str
    background: str
    motion: tuple  # (dx, dy) pixels per frame
    start: tuple  # (x, y) centre of the shape in frame 0
    size: float  # circle radius / half side / half height
    f: int
    H: int
    W: int
    seed: int = 0

    def centres(self) -> np.ndarray:
        i = np.arange(self.f)[:, None]
        return np.asarray(self.start, dtype=np.float64) + i * np.asarray(self.motion, dtype=np.float64)

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS or self.background not in BACKGROUNDS:
            raise ValueError(f"unknown color {self.color!r} or background {self.background!r}")
        if self.f < 1 or self.H < 1 or self.W < 1 or self.size <= 0:
            raise ValueError("frame count, size and extent must be positive")
        c = self.centres()
        if (c[:, 0].min() - self.size < 0 or c[:, 0].max() + self.size > self.W
                or c[:, 1].min() - self.size < 0 or c[:, 1].max() + self.size > self.H):
            raise ValueError("shape trajectory leaves the frame")


def direction_name(motion) -> str:
    dx, dy = motion
    vert = "up" if dy < 0 else "down" if dy > 0 else ""
    horiz = "left" if dx < 0 else "right" if dx > 0 else ""
    if vert and horiz:
        return f"{vert}-{horiz}"
    return vert or horiz or "in place"


def caption_for(recipe: ClipRecipe) -> str:
    return CAPTION_TEMPLATE.format(color=recipe.color, shape=recipe.shape,
                                   direction=direction_name(recipe.motion))


def parse_caption(caption: str) -> dict:
    m = _CAPTION_RE.match(caption)
    if m is None:
        raise ValueError(f"caption does not follow the template: {caption!r}")
    return m.groupdict()


def _shape_mask(shape: str, cx: float, cy: float, size: float, H: int, W: int) -> np.ndarray:
    py, px = np.mgrid[0:H, 0:W] + 0.5
    if shape == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= size**2
    if shape == "square":
        return (np.abs(px - cx) <= size) & (np.abs(py - cy) <= size)
    # isosceles triangle, apex up
    rel = (py - (cy - size)) / (2 * size)
    return (rel >= 0) & (rel <= 1) & (np.abs(px - cx) <= size * rel)


def gen_clip(recipe: ClipRecipe) -> VideoClip:
    recipe.validate()
    bg = np.asarray(BACKGROUNDS[recipe.background], dtype=np.float32)
    fg = np.asarray(COLORS[recipe.color], dtype=np.float32)
    frames = np.empty((recipe.f, recipe.H, recipe.W, 3), dtype=np.float32)
    for i, (cx, cy) in enumerate(recipe.centres()):
        mask = _shape_mask(recipe.shape, cx, cy, recipe.size, recipe.H, recipe.W)
        frames[i] = np.where(mask[..., None], fg, bg)
    return VideoClip(frames, caption=caption_for(recipe), fps=DEFAULT_FPS, meta={"recipe": asdict(recipe)})


def random_recipe(rng: np.random.Generator, f: int = 25, H: int = 64, W: int = 64, seed: int = 0) -> ClipRecipe:
    size = float(rng.integers(max(2, min(H, W) // 8), max(3, min(H, W) // 5) + 1))
    # fastest integer speed that keeps the whole trajectory inside the frame
    span_x, span_y = W - 2 * size - 2, H - 2 * size - 2
    vmax_x = int(span_x // max(f - 1, 1))
    vmax_y = int(span_y // max(f - 1, 1))
    dx = int(rng.integers(-min(vmax_x, 2), min(vmax_x, 2) + 1))
    dy = int(rng.integers(-min(vmax_y, 2), min(vmax_y, 2) + 1))
    travel_x, travel_y = abs(dx) * (f - 1), abs(dy) * (f - 1)
    x0 = float(rng.integers(int(size) + 1, int(W - size - travel_x)))
    y0 = float(rng.integers(int(size) + 1, int(H - size - travel_y)))
    if dx < 0:
        x0 += travel_x
    if dy < 0:
        y0 += travel_y
    return ClipRecipe(
        shape=str(rng.choice(SHAPES)),
        color=str(rng.choice(list(COLORS))),
        background=str(rng.choice(list(BACKGROUNDS))),
        motion=(dx, dy), start=(x0, y0), size=size, f=f, H=H, W=W, seed=seed,
    )


# --- I/O ---------------------------------------------------------------------


def frame_name(i: int) -> str:
    return f"frame_{i:05d}.png"


def save_clip(clip: VideoClip, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(clip.frames):
        name = frame_name(i)
        Image.fromarray(np.round(frame * 255.0).astype(np.uint8), mode="RGB").save(d / name)
        names.append(name)
    manifest = {
        "caption": clip.caption,
        "fps": clip.fps,
        "num_frames": clip.num_frames,
        "height": clip.size[0],
        "width": clip.size[1],
        "frames": names,
        "recipe": clip.meta.get("recipe"),
        "key_indices": clip.meta.get("key_indices"),
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return d


def load_clip(directory) -> VideoClip:
    d = Path(directory)
    path = d / MANIFEST
    if not path.exists():
        raise ClipFormatError(f"no {MANIFEST} in {d}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    names = manifest["frames"]
    if len(names) != manifest["num_frames"]:
        raise ClipFormatError(f"manifest lists {len(names)} frames but num_frames={manifest['num_frames']}")
    if names != [frame_name(i) for i in range(len(names))]:
        raise ClipFormatError("frame files must be contiguous and zero-padded from frame_00000.png")
    frames = []
    for name in names:
        if not (d / name).exists():
            raise ClipFormatError(f"missing frame {d / name}")
        frames.append(np.asarray(Image.open(d / name).convert("RGB"), dtype=np.float32) / 255.0)
    frames = np.stack(frames)
    if frames.shape[1:3] != (manifest["height"], manifest["width"]):
        raise ClipFormatError(f"frame size {frames.shape[1:3]} disagrees with manifest")
    meta = {k: manifest[k] for k in ("recipe", "key_indices") if manifest.get(k) is not None}
    return VideoClip(frames, caption=manifest["caption"], fps=manifest["fps"], meta=meta)


def build_corpus(n_clips: int, seed: int, out_dir, f: int = 25, H: int = 64, W: int = 64) -> dict:
    if n_clips < 1:
        raise ValueError("corpus needs at least one clip")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_clips)
    entries = []
    for i, child in enumerate(children):
        clip_seed = int(child.generate_state(1)[0])
        clip = gen_clip(random_recipe(np.random.default_rng(clip_seed), f, H, W, seed=clip_seed))
        name = f"clip_{i:04d}"
        save_clip(clip, out / name)
        entries.append({"dir": name, "caption": clip.caption})
    index = {"seed": seed, "num_clips": n_clips, "num_frames": f, "height": H, "width": W, "clips": entries}
    (out / CORPUS_INDEX).write_text(json.dumps(index, indent=2), encoding="utf-8")
    return index


def load_corpus(corpus_dir) -> list[VideoClip]:
    d = Path(corpus_dir)
    index = json.loads((d / CORPUS_INDEX).read_text(encoding="utf-8"))
    return [load_clip(d / e["dir"]) for e in index["clips"]]


def make_clips(n_clips: int, seed: int, f: int = 25, H: int = 64, W: int = 64) -> list[VideoClip]:
    """In-memory twin of ``build_corpus`` (same recipes, no quantisation)."""
    children = np.random.SeedSequence(seed).spawn(n_clips)
    clips = []
    for child in children:
        clip_seed = int(child.generate_state(1)[0])
        clips.append(gen_clip(random_recipe(np.random.default_rng(clip_seed), f, H, W, seed=clip_seed)))
    return clips
