"""Training: base-prior pretraining and ControlNet training with the v-prediction loss.

All randomness for step ``i`` comes from ``np.random.default_rng([seed, i])``,
so a run resumed from a checkpoint replays exactly the same batches.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import AugmentConfig, build_training_example, sample_spec
from .autoencoder import AutoencoderConfig, VideoClip
from .backbone import BackboneConfig, VideoUNet, init_backbone
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .controlnet import VideoControlNet, init_controlnet_from_base, scatter_key_frames
from .schedule import NoiseSchedule, build_schedule, forward_diffuse, v_target

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    steps: int = 2000
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    text_dropout: float = 0.10
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 10
    grad_clip: float = 1.0
    windows: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    scale_min: float = 1.0
    scale_max: float = 8.0
    t_prime_max: int = 300
    smooth_window: int = 25

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(windows=tuple(self.windows), scale_min=self.scale_min, scale_max=self.scale_max,
                             t_prime_max=self.t_prime_max)

    def validate(self) -> None:
        if not 0.0 <= self.text_dropout <= 1.0:
            raise ValueError(f"text_dropout must lie in [0, 1], got {self.text_dropout}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        self.augment_config().validate()


@dataclass
class ModelBundle:
    backbone: VideoUNet
    controlnet: VideoControlNet | None
    schedule: NoiseSchedule
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    backbone_frozen: bool = True
    base_steps: int = 0
    controlnet_steps: int = 0

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.cfg


def make_bundle(cfg: BackboneConfig, seed: int = 0, T: int = 1000,
                ae: AutoencoderConfig = AutoencoderConfig()) -> ModelBundle:
    if cfg.in_channels != ae.channels:
        raise ValueError(f"backbone expects {cfg.in_channels} channels, autoencoder gives {ae.channels}")
    base = init_backbone(cfg, seed)
    return ModelBundle(base, None, build_schedule(T), ae, backbone_frozen=False)


def attach_controlnet(bundle: ModelBundle, seed: int = 0) -> ModelBundle:
    bundle.controlnet = init_controlnet_from_base(bundle.backbone, seed)
    bundle.backbone_frozen = True
    bundle.backbone.requires_grad_(False)
    return bundle


# --- batches -------------------------------------------------------------------


@dataclass
class Batch:
    z0: torch.Tensor  # (B, F, C, h, w) ground-truth latents
    cond: torch.Tensor  # (B, F, C, h, w), zero rows at non-key frames
    key_mask: torch.Tensor  # (B, F)
    t: torch.Tensor  # (B,) long
    t_prime: torch.Tensor
    s: torch.Tensor
    z_t: torch.Tensor
    v: torch.Tensor
    captions: list[str]
    dropped: list[bool]


def _to_model_layout(lat: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(lat.transpose(0, 3, 1, 2)))


def make_batch(clips: list[VideoClip], rng: np.random.Generator, cfg: TrainConfig,
               sched: NoiseSchedule, ae: AutoencoderConfig) -> Batch:
    aug = cfg.augment_config()
    idx = rng.choice(len(clips), size=cfg.batch_size, replace=len(clips) < cfg.batch_size)
    rows = dict(z0=[], cond=[], mask=[], t=[], tp=[], s=[], zt=[], v=[])
    captions, dropped = [], []
    for i in idx:
        clip = clips[int(i)]
        f = clip.num_frames
        spec = sample_spec(rng, f, aug)
        full, cond = build_training_example(clip, spec, sched, ae)
        z0 = _to_model_layout(full)
        t = int(rng.integers(1, sched.T + 1))
        # target noise is drawn independently of the augmentation noise
        eps = torch.from_numpy(rng.standard_normal(z0.shape, dtype=np.float32))
        drop = bool(rng.random() < cfg.text_dropout)
        mask = torch.zeros(f, dtype=torch.bool)
        mask[list(spec.key_indices)] = True
        rows["z0"].append(z0)
        rows["cond"].append(scatter_key_frames(_to_model_layout(cond.latents), spec.key_indices, f))
        rows["mask"].append(mask)
        rows["t"].append(t)
        rows["tp"].append(spec.t_prime)
        rows["s"].append(spec.s)
        rows["zt"].append(forward_diffuse(z0, t, eps, sched))
        rows["v"].append(v_target(z0, eps, t, sched))
        captions.append("" if drop else clip.caption)
        dropped.append(drop)
    return Batch(
        z0=torch.stack(rows["z0"]), cond=torch.stack(rows["cond"]), key_mask=torch.stack(rows["mask"]),
        t=torch.tensor(rows["t"]), t_prime=torch.tensor(rows["tp"], dtype=torch.float32),
        s=torch.tensor(rows["s"], dtype=torch.float32), z_t=torch.stack(rows["zt"]),
        v=torch.stack(rows["v"]), captions=captions, dropped=dropped,
    )


def v_loss(v_pred: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Mean over batch, frames and latent elements of the squared v error."""
    return torch.mean((v_pred - v) ** 2)


def predict_base(bundle: ModelBundle, batch: Batch) -> torch.Tensor:
    base = bundle.backbone
    temb = base.time_embedding(batch.t, batch.z_t.shape[1])
    return base(batch.z_t, temb, base.text(batch.captions))


def predict_full(bundle: ModelBundle, batch: Batch) -> torch.Tensor:
    base, net = bundle.backbone, bundle.controlnet
    ctx = base.text(batch.captions)
    control = net(batch.z_t, batch.cond, batch.key_mask, batch.t, batch.t_prime, batch.s, ctx)
    temb = base.time_embedding(batch.t, batch.z_t.shape[1])
    return base(batch.z_t, temb, ctx, control=control)


# --- optimisation ------------------------------------------------------------------


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(params), lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def _check_finite(loss: torch.Tensor, step: int, batch: Batch) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {loss.item()} at step {step} "
            f"(t={batch.t.tolist()}, t'={batch.t_prime.tolist()}, s={batch.s.tolist()})"
        )


def train_step(bundle: ModelBundle, batch: Batch, optimizer: torch.optim.Optimizer, cfg: TrainConfig,
               step: int = 0, which: str = "controlnet") -> float:
    model = bundle.controlnet if which == "controlnet" else bundle.backbone
    optimizer.zero_grad(set_to_none=True)
    pred = predict_full(bundle, batch) if which == "controlnet" else predict_base(bundle, batch)
    loss = v_loss(pred, batch.v)
    _check_finite(loss, step, batch)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return float(loss.item())


def smoothed(losses, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def smoothed(self, window: int = 25) -> np.ndarray:
        return smoothed(self.losses, window)

    def initial_final(self, window: int = 25) -> tuple[float, float]:
        """Mean of the first and of the last ``window`` losses."""
        x = np.asarray(self.losses)
        w = max(1, min(window, len(x) // 2))
        return float(x[:w].mean()), float(x[-w:].mean())


class _RunLog:
    def __init__(self, out_dir):
        self.dir = Path(out_dir) if out_dir is not None else None
        if self.dir is not None:
            (self.dir / "logs").mkdir(parents=True, exist_ok=True)

    def write(self, name: str, step: int, loss: float, lr: float, smooth: float) -> None:
        if self.dir is None:
            return
        with open(self.dir / "logs" / f"{name}.log", "a", encoding="utf-8") as fh:
            fh.write(f"{step} {loss:.6f} {lr:.3g}\n")
        with open(self.dir / "logs" / f"{name}_metrics.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"step": step, "loss": loss, "smoothed": smooth, "lr": lr}) + "\n")


def _fit(bundle, clips, cfg, which, out_dir, optimizer, start_step, hook, on_checkpoint):
    history = TrainHistory()
    runlog = _RunLog(out_dir)
    model = bundle.controlnet if which == "controlnet" else bundle.backbone
    model.train()
    for step in range(start_step + 1, cfg.steps + 1):
        rng = np.random.default_rng([cfg.seed, step])
        batch = make_batch(clips, rng, cfg, bundle.schedule, bundle.autoencoder)
        if hook is not None:
            hook(step, batch)
        loss = train_step(bundle, batch, optimizer, cfg, step, which)
        history.steps.append(step)
        history.losses.append(loss)
        if which == "controlnet":
            bundle.controlnet_steps = step
        else:
            bundle.base_steps = step
        if step % cfg.log_every == 0 or step == cfg.steps:
            smooth = float(history.smoothed(cfg.smooth_window)[-1])
            log.info("%s step %d loss %.5f smoothed %.5f", which, step, loss, smooth)
            runlog.write(which, step, loss, cfg.lr, smooth)
        if on_checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(step, optimizer)
    model.eval()
    return history


def pretrain_base(clips: list[VideoClip], bundle: ModelBundle, cfg: TrainConfig, out_dir=None,
                  hook: Callable | None = None) -> TrainHistory:
    """Fit the backbone prior with the v-prediction loss (stands in for a pretrained model)."""
    if not clips:
        raise ValueError("dataset is empty")
    cfg.validate()
    bundle.backbone.requires_grad_(True)
    optimizer = make_optimizer(bundle.backbone.parameters(), cfg)
    hist = _fit(bundle, clips, cfg, "base", out_dir, optimizer, 0, hook, None)
    return hist


def train_controlnet(clips: list[VideoClip], bundle: ModelBundle, cfg: TrainConfig, out_dir=None,
                     resume=None, hook: Callable | None = None) -> TrainHistory:
    """Train the condition branch against the frozen backbone.

    Checkpoints (with optimiser state) land in ``out_dir/checkpoints/step_XXXXXX``;
    ``resume`` is such a directory and continues the run from its step.
    """
    if not clips:
        raise ValueError("dataset is empty")
    cfg.validate()
    start = 0
    if resume is not None:
        loaded, extra = load_checkpoint(resume, with_optimizer=True)
        bundle.backbone, bundle.controlnet = loaded.backbone, loaded.controlnet
        bundle.controlnet_steps = start = loaded.controlnet_steps
    if bundle.controlnet is None:
        attach_controlnet(bundle)
    bundle.backbone.requires_grad_(False)
    bundle.backbone.eval()
    bundle.backbone_frozen = True
    optimizer = make_optimizer(bundle.controlnet.parameters(), cfg)
    if resume is not None and extra.get("optimizer") is not None:
        _restore_optimizer(optimizer, bundle.controlnet, extra["optimizer"])

    def on_checkpoint(step, opt):
        if out_dir is not None:
            save_checkpoint(bundle, Path(out_dir) / "checkpoints" / f"step_{step:06d}", optimizer=opt)

    hist = _fit(bundle, clips, cfg, "controlnet", out_dir, optimizer, start, hook, on_checkpoint)
    if out_dir is not None:
        save_checkpoint(bundle, Path(out_dir) / "checkpoints" / "final", optimizer=optimizer)
    return hist


# --- checkpoints ---------------------------------------------------------------------


def _numpy_state(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _optimizer_tensors(optimizer, module) -> tuple[dict, dict]:
    names = {id(p): n for n, p in module.named_parameters()}
    tensors, steps = {}, {}
    for p, state in optimizer.state.items():
        name = names[id(p)]
        tensors[f"optim.{name}.exp_avg"] = state["exp_avg"].numpy()
        tensors[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
        steps[name] = float(state["step"])
    return tensors, steps


def _restore_optimizer(optimizer, module, saved: dict) -> None:
    tensors, steps = saved["tensors"], saved["steps"]
    for name, p in module.named_parameters():
        if name not in steps:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(steps[name], dtype=torch.float32),
            "exp_avg": torch.from_numpy(tensors[f"optim.{name}.exp_avg"]),
            "exp_avg_sq": torch.from_numpy(tensors[f"optim.{name}.exp_avg_sq"]),
        }


def save_checkpoint(bundle: ModelBundle, path, optimizer=None) -> Path:
    tensors = _numpy_state(bundle.backbone, "backbone")
    trainable = {k: not bundle.backbone_frozen for k in tensors}
    if bundle.controlnet is not None:
        ctl = _numpy_state(bundle.controlnet, "controlnet")
        tensors.update(ctl)
        trainable.update({k: True for k in ctl})
    meta = {
        "backbone_config": bundle.config.to_dict(),
        "schedule": {"T": bundle.schedule.T, "kind": bundle.schedule.kind},
        "autoencoder": asdict(bundle.autoencoder),
        "backbone_frozen": bundle.backbone_frozen,
        "has_controlnet": bundle.controlnet is not None,
        "base_steps": bundle.base_steps,
        "controlnet_steps": bundle.controlnet_steps,
    }
    if optimizer is not None and bundle.controlnet is not None:
        opt_tensors, steps = _optimizer_tensors(optimizer, bundle.controlnet)
        tensors.update(opt_tensors)
        meta["optimizer_steps"] = steps
    return save_tensors(path, tensors, meta, trainable)


def _load_module(module: torch.nn.Module, tensors: dict, prefix: str) -> None:
    state = module.state_dict()
    for key, ref in state.items():
        name = f"{prefix}.{key}"
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointError(f"{name}: shape {tuple(tensors[name].shape)} != expected {tuple(ref.shape)}")
    extra = [n for n in tensors if n.startswith(prefix + ".") and n[len(prefix) + 1:] not in state]
    if extra:
        raise CheckpointError(f"unexpected tensors in checkpoint: {extra[:3]}")
    module.load_state_dict({k: torch.from_numpy(tensors[f"{prefix}.{k}"]) for k in state})


def load_checkpoint(path, with_optimizer: bool = False):
    tensors, meta, flags = load_tensors(path)
    cfg = BackboneConfig.from_dict(meta["backbone_config"])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        base = VideoUNet(cfg)
        _load_module(base, tensors, "backbone")
        net = None
        if meta["has_controlnet"]:
            net = VideoControlNet(base)
            _load_module(net, tensors, "controlnet")
    frozen = bool(meta["backbone_frozen"])
    base.requires_grad_(not frozen)
    base.eval()
    if net is not None:
        net.eval()
    bundle = ModelBundle(
        backbone=base, controlnet=net,
        schedule=build_schedule(meta["schedule"]["T"], meta["schedule"]["kind"]),
        autoencoder=AutoencoderConfig(**meta["autoencoder"]),
        backbone_frozen=frozen, base_steps=meta["base_steps"], controlnet_steps=meta["controlnet_steps"],
    )
    if not with_optimizer:
        return bundle
    opt = None
    if "optimizer_steps" in meta:
        opt = {"steps": meta["optimizer_steps"],
               "tensors": {k: v for k, v in tensors.items() if k.startswith("optim.")}}
    return bundle, {"optimizer": opt, "trainable": flags}


def tensor_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
