"""Diffusion-process numerics: schedule, forward process, v-algebra, DDIM, CFG.

Schedule arrays live in float64; the tensor operations accept numpy arrays or
torch tensors and cast the scalar coefficients to the operand dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

SCHEDULE_KINDS = ("cosine",)
COSINE_OFFSET = 0.008
DEFAULT_T = 1000
DEFAULT_AUG_T_MAX = 300


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str = "cosine"

    def __post_init__(self):
        if self.alpha.shape != (self.T + 1,) or self.sigma.shape != (self.T + 1,):
            raise ValueError("schedule arrays must have length T+1")

    def coeffs(self, t: int) -> tuple[float, float]:
        t = _check_step(t, self.T)
        return float(self.alpha[t]), float(self.sigma[t])

    def log_snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.alpha**2) - np.log(self.sigma**2)


@dataclass(frozen=True)
class AugNoiseRange:
    T_prime: int = DEFAULT_AUG_T_MAX

    def validate(self, T: int) -> None:
        if not 1 <= self.T_prime < T:
            raise ValueError(f"T_prime must satisfy 1 <= T_prime < T={T}, got {self.T_prime}")


def cosine_alpha_bar(t, T: int, offset: float = COSINE_OFFSET):
    """Cumulative signal power of the cosine schedule, normalised so that t=0 gives 1."""
    f = lambda u: np.cos((u / T + offset) / (1.0 + offset) * math.pi / 2) ** 2
    return f(np.asarray(t, dtype=np.float64)) / f(0.0)


def build_schedule(T: int = DEFAULT_T, kind: str = "cosine") -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = np.clip(cosine_alpha_bar(np.arange(T + 1), T), 0.0, 1.0)
    alpha_bar[0] = 1.0
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T=int(T), alpha=alpha, sigma=sigma, kind=kind)


def _check_step(t, T: int) -> int:
    t = int(t)
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return t


def _shape(a) -> tuple:
    return tuple(a.shape) if hasattr(a, "shape") else ()


def _check_shapes(a, b, what: str) -> None:
    if _shape(a) != _shape(b):
        raise ValueError(f"{what}: shape mismatch {_shape(a)} vs {_shape(b)}")


def _coef(value: float, like):
    # keep the result in the operand's dtype (float32 model math, float64 tests)
    if isinstance(like, torch.Tensor):
        return torch.tensor(value, dtype=like.dtype, device=like.device)
    dtype = np.asarray(like).dtype
    return np.asarray(value, dtype=dtype if dtype.kind == "f" else np.float64)


def forward_diffuse(z, t: int, eps, sched: NoiseSchedule):
    _check_shapes(z, eps, "forward_diffuse")
    a, s = sched.coeffs(t)
    return _coef(a, z) * z + _coef(s, z) * eps


def v_target(z, eps, t: int, sched: NoiseSchedule):
    _check_shapes(z, eps, "v_target")
    a, s = sched.coeffs(t)
    return _coef(a, z) * eps - _coef(s, z) * z


def recover_from_v(z_t, v, t: int, sched: NoiseSchedule):
    """Return ``(z0_hat, eps_hat)`` from a noisy latent and a v-prediction."""
    _check_shapes(z_t, v, "recover_from_v")
    a, s = sched.coeffs(t)
    a, s = _coef(a, z_t), _coef(s, z_t)
    return a * z_t - s * v, s * z_t + a * v


def ddim_step(z_t, v_pred, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from step ``t`` to ``t_prev``."""
    t, t_prev = _check_step(t, sched.T), _check_step(t_prev, sched.T)
    if t_prev > t:
        raise ValueError(f"t_prev={t_prev} must not exceed t={t}")
    _check_shapes(z_t, v_pred, "ddim_step")
    if t_prev == t:
        return z_t
    z0_hat, eps_hat = recover_from_v(z_t, v_pred, t, sched)
    a, s = sched.coeffs(t_prev)
    return _coef(a, z_t) * z0_hat + _coef(s, z_t) * eps_hat


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Decreasing integer step sequence ``T = t_0 > ... > t_steps = 0``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    out = [int(ts[0])]
    for t in ts[1:]:
        if t < out[-1]:
            out.append(int(t))
    return out


def cfg_combine(v_cond, v_uncond, w: float):
    _check_shapes(v_cond, v_uncond, "cfg_combine")
    if w < 0:
        raise ValueError("guidance weight must be non-negative")
    # exact endpoints; the affine form below is not bit-exact at w in {0, 1}
    if w == 1:
        return v_cond
    if w == 0:
        return v_uncond
    return v_uncond + w * (v_cond - v_uncond)
