"""Dual-objective optimization: drag loss, background mask loss, and the
regularizing denoising-score gradient, combined into a single gradient map.

Loss values accumulate in double precision; gradients flow only through the
live feature/noise predictions, never through the cached references.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .lora import LoRAAdapter
from .model import FeatureMap, ToyUNet, predict_noise, sample_feature
from .schedule import NoiseSchedule, ddim_step, ddpm_forward

Point = tuple[float, float]


@dataclass(frozen=True)
class LossWeights:
    lambda_mask: float = 0.1
    lambda_dds: float = 50.0

    def __post_init__(self):
        if self.lambda_mask < 0 or self.lambda_dds < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class DragTargets:
    """Immutable per-session references: initial feature map, handle points,
    their detached feature patches, and the latent one denoising step below."""

    f0: FeatureMap
    h0: list[Point]
    ref_patches: list[torch.Tensor]
    z34_ref: torch.Tensor
    r1: int


def make_drag_targets(f0: FeatureMap, h0: Sequence[Point], z34_ref: torch.Tensor,
                      r1: int) -> DragTargets:
    f0 = FeatureMap(f0.data.detach(), f0.layer_id, f0.t_index)
    patches = [sample_feature(f0, p, r1).detach() for p in h0]
    return DragTargets(f0, [tuple(map(float, p)) for p in h0], patches,
                       z34_ref.detach(), r1)


def drag_loss(f_cur: FeatureMap, targets: DragTargets,
              temporal_targets: Sequence[Optional[Point]], r1: int) -> torch.Tensor:
    """Sum over active points of the L1 distance between the detached reference
    patch at the initial handle and the live patch at the temporal target.

    Points with a ``None`` temporal target (already at their goal) are skipped.
    """
    if len(temporal_targets) != len(targets.h0):
        raise ValueError(f"expected {len(targets.h0)} temporal targets, "
                         f"got {len(temporal_targets)}")
    if not targets.h0:
        raise ValueError("drag_loss needs at least one point")
    total = torch.zeros((), dtype=torch.float64)
    for ref_patch, n in zip(targets.ref_patches, temporal_targets):
        if n is None:
            continue
        live = sample_feature(f_cur, n, r1)
        total = total + (ref_patch.double() - live.double()).abs().sum()
    return total


def mask_loss(z34: torch.Tensor, z34_ref: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """L1 norm of the latent difference outside the editable region (mask == 1)."""
    if mask.shape[-2:] != z34.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match latent "
                         f"{tuple(z34.shape)}")
    keep = 1.0 - mask.double()
    return ((z34.double() - z34_ref.double()) * keep).abs().sum()


def dds_gradient(model: ToyUNet, lora: LoRAAdapter, z35: torch.Tensor,
                 sched: NoiseSchedule, weights: LossWeights, rng: torch.Generator,
                 cond: Optional[int] = None, drag_index: int = 35,
                 ) -> tuple[dict[str, torch.Tensor], float]:
    """Regularizing gradient that pulls the adapted model toward the base model.

    The clean estimate is predicted with the adapter, renoised at a random
    timestep, and both models' predictions on the renoised latent are detached;
    the gradient reaches the adapter only through the clean estimate.
    """
    t35 = sched.t_of_index(drag_index)
    lora.requires_grad_(True)
    eps35 = predict_noise(model, lora, z35, t35, cond)
    surrogate = _dds_surrogate(model, lora, z35, eps35, t35, sched, weights, rng, cond)
    grads = torch.autograd.grad(surrogate, lora.tensors())
    grad_map = {name: g for (name, _), g in zip(lora.tensor_items(), grads)}
    return grad_map, float(surrogate.detach())


def _dds_surrogate(model: ToyUNet, lora: LoRAAdapter, z35: torch.Tensor,
                   eps35: torch.Tensor, t35: int, sched: NoiseSchedule,
                   weights: LossWeights, rng: torch.Generator,
                   cond: Optional[int]) -> torch.Tensor:
    abar = sched.alpha_bar(t35)
    z0_hat = (z35 - (1.0 - abar) ** 0.5 * eps35) / abar ** 0.5
    lo = int(round(0.1 * sched.T_train))
    hi = int(round(0.9 * sched.T_train))
    t_prime = int(torch.randint(lo, hi + 1, (1,), generator=rng))
    eps_prime = torch.randn(z35.shape, generator=rng, dtype=z35.dtype)
    with torch.no_grad():
        z_tp = ddpm_forward(z0_hat.detach(), t_prime, eps_prime, sched)
        e_drag = predict_noise(model, lora, z_tp, t_prime, cond)
        e_ori = predict_noise(model, None, z_tp, t_prime, cond)
    diff = (e_ori - e_drag).detach()
    # per-element mean keeps the weight's meaning independent of latent size
    return weights.lambda_dds * (diff.double() * z0_hat.double()).mean()


@dataclass
class LossValues:
    drag: float
    mask: float
    dds_surrogate: float

    def as_dict(self) -> dict:
        return {"drag": self.drag, "mask": self.mask, "dds_surrogate": self.dds_surrogate}


def total_loss_step(model: ToyUNet, lora: LoRAAdapter, z35: torch.Tensor,
                    targets: DragTargets, temporal_targets: Sequence[Optional[Point]],
                    mask: torch.Tensor, sched: NoiseSchedule, weights: LossWeights,
                    rng: torch.Generator, cond: Optional[int] = None,
                    drag_index: int = 35) -> tuple[dict[str, torch.Tensor], LossValues]:
    """Summed gradient map of drag + mask + regularizer terms for one Adam step.

    A single forward pass supplies both the live feature map and the noise
    prediction, so the three contributions share one graph; additivity over
    separately computed components is preserved.
    """
    t35 = sched.t_of_index(drag_index)
    t34 = sched.t_of_index(drag_index - 1)
    lora.requires_grad_(True)
    tb = torch.tensor([t35], dtype=torch.long)
    cb = None if cond is None else torch.tensor([cond], dtype=torch.long)
    eps35_b, feat = model(z35.unsqueeze(0), tb, cb, lora=lora, want_features=True)
    eps35 = eps35_b.squeeze(0)
    if feat.shape[-2:] != z35.shape[-2:]:
        feat = torch.nn.functional.interpolate(
            feat, size=z35.shape[-2:], mode="bilinear", align_corners=True)
    f_cur = FeatureMap(feat.squeeze(0), model.config.feature_layer, drag_index)

    l_drag = drag_loss(f_cur, targets, temporal_targets, targets.r1)
    total = l_drag
    l_mask = torch.zeros((), dtype=torch.float64)
    if weights.lambda_mask > 0:
        z34 = ddim_step(z35, eps35, t35, t34, sched)
        l_mask = mask_loss(z34, targets.z34_ref, mask)
        total = total + weights.lambda_mask * l_mask
    surrogate = torch.zeros((), dtype=torch.float64)
    if weights.lambda_dds > 0:
        surrogate = _dds_surrogate(model, lora, z35, eps35, t35, sched, weights, rng, cond)
        total = total + surrogate

    grads = torch.autograd.grad(total, lora.tensors())
    grad_map = {name: g for (name, _), g in zip(lora.tensor_items(), grads)}
    return grad_map, LossValues(float(l_drag.detach()), float(l_mask.detach()),
                                float(surrogate.detach()))
