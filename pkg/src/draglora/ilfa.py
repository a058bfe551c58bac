"""Input latent adaptation: the masked denoise-renoise cycle at the drag timestep.

The default variant denoises one DDIM hop with the adapted model and renoises
with fresh Gaussian noise (closed form below); the alternative renoises by
deterministic DDIM inversion instead. Only the editable (mask == 1) region is
rewritten; the background stays bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .lora import LoRAAdapter
from .model import ToyUNet, predict_noise
from .schedule import NoiseSchedule, ddim_invert_step, ddim_step

VARIANTS = ("sds", "dds")


@dataclass(frozen=True)
class IlfaConfig:
    variant: str = "sds"
    burst_cap: int = 20          # iterations per activation
    session_budget: int = 160    # adaptation-only iterations per session
    enabled: bool = True         # False: pure gradient-mode baseline, no adaptation

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, pick one of {VARIANTS}")


def sds_update(z: torch.Tensor, eps_hat: torch.Tensor, eps_rand: torch.Tensor,
               abar_t: float, abar_prev: float) -> torch.Tensor:
    """Closed form of one DDIM denoise hop followed by a Gaussian renoise.

    With ``a = abar_t / abar_prev`` (the retention over the hop) the
    composition collapses to
    ``z + sqrt(1 - a) * eps_rand - (sqrt(1 - abar_t) - sqrt(a - abar_t)) * eps_hat``;
    for adjacent training timesteps ``a`` is the single-step alpha.
    """
    a = abar_t / abar_prev
    coef = (1.0 - abar_t) ** 0.5 - (a - abar_t) ** 0.5
    return z + (1.0 - a) ** 0.5 * eps_rand - coef * eps_hat


def ilfa_step(z: torch.Tensor, model: ToyUNet, lora: Optional[LoRAAdapter],
              mask: torch.Tensor, sched: NoiseSchedule, cfg: IlfaConfig,
              rng: torch.Generator, cond: Optional[int] = None,
              drag_index: int = 35) -> torch.Tensor:
    """One masked denoise-renoise cycle of the latent at the drag index."""
    if mask.shape[-2:] != z.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match latent "
                         f"{tuple(z.shape)}")
    t = sched.t_of_index(drag_index)
    t_prev = sched.t_of_index(drag_index - 1)
    with torch.no_grad():
        eps_hat = predict_noise(model, lora, z, t, cond)
        if cfg.variant == "sds":
            eps_rand = torch.randn(z.shape, generator=rng, dtype=z.dtype)
            u = sds_update(z, eps_hat, eps_rand, sched.alpha_bar(t), sched.alpha_bar(t_prev))
        else:
            z_prev = ddim_step(z, eps_hat, t, t_prev, sched)
            eps_up = predict_noise(model, lora, z_prev, t, cond)
            u = ddim_invert_step(z_prev, eps_up, t_prev, t, sched)
    keep = mask.expand_as(z) > 0.5
    return torch.where(keep, u, z)


# The hook re-extracts features and re-tracks every point after a latent
# update; it reports the aggregate state the loop conditions need.
TrackHook = Callable[[torch.Tensor], "BurstState"]


@dataclass
class BurstState:
    max_min_d: float
    all_reached: bool
    record: object  # pipeline-level StepRecord, opaque here


def ilfa_burst(z: torch.Tensor, model: ToyUNet, lora: Optional[LoRAAdapter],
               mask: torch.Tensor, sched: NoiseSchedule, cfg: IlfaConfig,
               rng: torch.Generator, track_hook: TrackHook, entry: BurstState,
               d2: float, budget_left: int, cond: Optional[int] = None,
               drag_index: int = 35) -> tuple[torch.Tensor, list, int]:
    """Adapt-and-track until confidence drops below d2, all points arrive, or a cap hits.

    The continuation condition is evaluated on the state produced by the
    previous tracking pass, so a burst entered with max_min_d >= d2 performs
    zero iterations.
    """
    records = []
    state = entry
    iters = 0
    cap = min(cfg.burst_cap, budget_left)
    while iters < cap and state.max_min_d < d2 and not state.all_reached:
        z = ilfa_step(z, model, lora, mask, sched, cfg, rng, cond, drag_index)
        state = track_hook(z)
        records.append(state.record)
        iters += 1
    return z, records, iters
