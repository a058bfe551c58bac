"""Noise schedules, DDPM forward noising, DDIM sampling and deterministic inversion.

Timestep conventions used throughout the package:

* training timesteps ``t`` are integers in ``[0, T_train)``; the special value
  ``-1`` denotes the clean state (cumulative retention 1.0).
* inference indices ``s`` are integers in ``[0, inference_steps]``; ``s = 0``
  is the clean image and ``s >= 1`` corresponds to training timestep
  ``step_map[s - 1]``.

All operations are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import torch

from .errors import ConfigError

PredictFn = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class Latent:
    """A latent tensor tagged with the inference index it lives at (0 = clean)."""

    data: torch.Tensor
    t_index: int


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha tables plus the inference-step index map."""

    T_train: int
    betas: torch.Tensor        # (T_train,) float64
    alphas: torch.Tensor       # (T_train,) float64, 1 - beta
    alpha_bars: torch.Tensor   # (T_train,) float64, running product of alphas
    inference_steps: int
    step_map: torch.Tensor     # (inference_steps,) int64, inference idx -> train t

    def alpha_bar(self, t: int) -> float:
        """Cumulative retention at training timestep t; t = -1 means clean (1.0)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T_train:
            raise ValueError(f"training timestep {t} outside [0, {self.T_train})")
        return float(self.alpha_bars[t])

    def t_of_index(self, s: int) -> int:
        """Training timestep for inference index s (s = 0 -> -1, the clean state)."""
        if not 0 <= s <= self.inference_steps:
            raise ValueError(f"inference index {s} outside [0, {self.inference_steps}]")
        return -1 if s == 0 else int(self.step_map[s - 1])

    def params(self) -> dict:
        return {
            "T_train": self.T_train,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
            "inference_steps": self.inference_steps,
        }


def build_schedule(T_train: int, beta_start: float, beta_end: float,
                   inference_steps: int) -> NoiseSchedule:
    """Linear beta schedule with an evenly spaced inference-step map."""
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if T_train < 1:
        raise ConfigError(f"T_train must be >= 1, got {T_train}")
    if inference_steps < 1 or T_train % inference_steps != 0:
        raise ConfigError(
            f"inference_steps must divide T_train evenly, got {inference_steps} / {T_train}")

    betas = torch.linspace(beta_start, beta_end, T_train, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    ratio = T_train // inference_steps
    step_map = torch.arange(1, inference_steps + 1, dtype=torch.int64) * ratio - 1
    return NoiseSchedule(T_train, betas, alphas, alpha_bars, inference_steps, step_map)


def _check_like(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def ddpm_forward(z0: torch.Tensor, t: int, eps: torch.Tensor,
                 sched: NoiseSchedule) -> torch.Tensor:
    """Forward noising from clean: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    _check_like(z0, eps, "ddpm_forward noise")
    abar = sched.alpha_bar(t)
    return abar ** 0.5 * z0 + (1.0 - abar) ** 0.5 * eps


def ddim_step(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule) -> torch.Tensor:
    """One deterministic DDIM denoising step from training timestep t to t_prev < t."""
    if t_prev >= t:
        raise ValueError(f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    _check_like(z_t, eps_pred, "ddim_step eps_pred")
    abar_t = sched.alpha_bar(t)
    abar_prev = sched.alpha_bar(t_prev)
    x0 = (z_t - (1.0 - abar_t) ** 0.5 * eps_pred) / abar_t ** 0.5
    return abar_prev ** 0.5 * x0 + (1.0 - abar_prev) ** 0.5 * eps_pred


def ddim_invert_step(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_next: int,
                     sched: NoiseSchedule) -> torch.Tensor:
    """Mirror of ddim_step toward larger t: deterministic DDIM inversion."""
    if t_next <= t:
        raise ValueError(f"ddim_invert_step needs t_next > t, got {t_next} <= {t}")
    _check_like(z_t, eps_pred, "ddim_invert_step eps_pred")
    abar_t = sched.alpha_bar(t)
    abar_next = sched.alpha_bar(t_next)
    x0 = (z_t - (1.0 - abar_t) ** 0.5 * eps_pred) / abar_t ** 0.5
    return abar_next ** 0.5 * x0 + (1.0 - abar_next) ** 0.5 * eps_pred


def invert_to(z0: torch.Tensor, predict_fn: PredictFn, sched: NoiseSchedule,
              target_inference_index: int) -> List[Latent]:
    """Deterministically invert a clean latent up to an inference index.

    ``predict_fn(z, t)`` supplies the noise prediction; for the hop landing at
    inference index s+1 it is evaluated at the destination training timestep
    (the same timestep the matching denoise hop uses).

    Returns the full trajectory ``[z at 0, z at 1, ..., z at target]``.
    """
    if not 0 <= target_inference_index <= sched.inference_steps:
        raise ValueError(f"target index {target_inference_index} outside schedule")
    traj = [Latent(z0, 0)]
    z = z0
    for s in range(target_inference_index):
        t_next = sched.t_of_index(s + 1)
        t_cur = sched.t_of_index(s)
        eps = predict_fn(z, t_next)
        z = ddim_invert_step(z, eps, t_cur, t_next, sched)
        traj.append(Latent(z, s + 1))
    return traj


def denoise(z: torch.Tensor, predict_fn: PredictFn, sched: NoiseSchedule,
            from_index: int, to_index: int = 0) -> torch.Tensor:
    """DDIM-denoise from inference index ``from_index`` down to ``to_index``."""
    if not 0 <= to_index < from_index <= sched.inference_steps:
        raise ValueError(f"bad denoise range {from_index} -> {to_index}")
    for s in range(from_index, to_index, -1):
        t_cur = sched.t_of_index(s)
        t_prev = sched.t_of_index(s - 1)
        eps = predict_fn(z, t_cur)
        z = ddim_step(z, eps, t_cur, t_prev, sched)
    return z
