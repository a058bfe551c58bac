"""Low-rank adapters on attention projections, Adam updates, reconstruction training.

An adapter is value-like: a map from projection layer id to an (A, B) factor
pair with ``delta = scale * B @ A``. B starts at zero so a fresh adapter leaves
the base model untouched. Updates are functional: ``adam_step`` returns new
tensors rather than mutating in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import container
from .errors import ConfigError
from .model import ToyUNet
from .schedule import NoiseSchedule, ddpm_forward


@dataclass
class LoraPair:
    A: torch.Tensor  # (rank, d_in)
    B: torch.Tensor  # (d_out, rank)


@dataclass
class LoRAAdapter:
    rank: int
    scale: float
    layers: dict[str, LoraPair]

    def tensor_items(self) -> list[tuple[str, torch.Tensor]]:
        """Deterministically ordered (name, tensor) pairs, names '<layer>.A' / '<layer>.B'."""
        items = []
        for layer_id in sorted(self.layers):
            pair = self.layers[layer_id]
            items.append((f"{layer_id}.A", pair.A))
            items.append((f"{layer_id}.B", pair.B))
        return items

    def tensors(self) -> list[torch.Tensor]:
        return [t for _, t in self.tensor_items()]

    def requires_grad_(self, flag: bool = True) -> "LoRAAdapter":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def to_dtype(self, dtype: torch.dtype) -> "LoRAAdapter":
        return LoRAAdapter(self.rank, self.scale, {
            k: LoraPair(p.A.detach().to(dtype), p.B.detach().to(dtype))
            for k, p in self.layers.items()
        })


def init_adapter(model: ToyUNet, rank: int = 16, seed: int = 0,
                 scale: float = 1.0) -> LoRAAdapter:
    """Fresh adapter: A small random, B zero, one pair per attention projection."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    gen = torch.Generator().manual_seed(seed)
    layers = {}
    for layer_id, (d_out, d_in) in model.lora_layer_shapes().items():
        if rank > min(d_in, d_out):
            raise ConfigError(
                f"rank {rank} exceeds layer dimension {min(d_in, d_out)} at {layer_id}")
        A = torch.randn(rank, d_in, generator=gen) / d_in ** 0.5
        B = torch.zeros(d_out, rank)
        layers[layer_id] = LoraPair(A, B)
    return LoRAAdapter(rank, scale, layers)


def clone_from(rec: LoRAAdapter) -> LoRAAdapter:
    """Deep copy; updates to the clone never touch the source."""
    return LoRAAdapter(rec.rank, rec.scale, {
        k: LoraPair(p.A.detach().clone(), p.B.detach().clone())
        for k, p in rec.layers.items()
    })


def merged_weight(base_weight: torch.Tensor, pair: LoraPair, scale: float) -> torch.Tensor:
    """Effective weight W + scale * B @ A for a projection layer."""
    return base_weight + scale * pair.B @ pair.A


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(adapter: LoRAAdapter, grads: dict[str, torch.Tensor],
              state: AdamState) -> tuple[LoRAAdapter, AdamState]:
    """One bias-corrected Adam update over the adapter's tensors."""
    names = [name for name, _ in adapter.tensor_items()]
    if set(grads) != set(names):
        missing = set(names) ^ set(grads)
        raise KeyError(f"gradient keys do not match adapter tensors: {sorted(missing)}")
    t = state.step + 1
    new_m, new_v = {}, {}
    updated: dict[str, torch.Tensor] = {}
    for name, param in adapter.tensor_items():
        g = grads[name]
        m = state.m.get(name, torch.zeros_like(param))
        v = state.v.get(name, torch.zeros_like(param))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        updated[name] = (param.detach() - state.lr * m_hat / (v_hat.sqrt() + state.eps))
        new_m[name], new_v[name] = m, v
    layers = {}
    for layer_id in adapter.layers:
        layers[layer_id] = LoraPair(updated[f"{layer_id}.A"], updated[f"{layer_id}.B"])
    next_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return LoRAAdapter(adapter.rank, adapter.scale, layers), next_state


def denoising_loss(model: ToyUNet, lora: Optional[LoRAAdapter], image: torch.Tensor,
                   sched: NoiseSchedule, probes: list[tuple[int, torch.Tensor]],
                   cond: Optional[int] = None) -> float:
    """Mean epsilon-prediction MSE over a fixed (t, noise) probe set."""
    total = 0.0
    with torch.no_grad():
        for t, eps in probes:
            z_t = ddpm_forward(image, t, eps, sched)
            tb = torch.tensor([t], dtype=torch.long)
            cb = None if cond is None else torch.tensor([cond], dtype=torch.long)
            pred = model(z_t.unsqueeze(0), tb, cb, lora=lora).squeeze(0)
            total += float(((pred - eps) ** 2).mean())
    return total / len(probes)


def train_reconstruction_lora(model: ToyUNet, image: torch.Tensor, sched: NoiseSchedule,
                              steps: int = 80, lr: float = 5e-4, seed: int = 0,
                              rank: int = 16, cond: Optional[int] = None) -> LoRAAdapter:
    """Fine-tune an adapter to reconstruct a single image under denoising loss."""
    adapter = init_adapter(model, rank=rank, seed=seed)
    if steps == 0:
        return adapter
    state = AdamState(lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        t = int(torch.randint(0, sched.T_train, (1,), generator=gen))
        eps = torch.randn(image.shape, generator=gen)
        z_t = ddpm_forward(image, t, eps, sched)
        adapter.requires_grad_(True)
        tb = torch.tensor([t], dtype=torch.long)
        cb = None if cond is None else torch.tensor([cond], dtype=torch.long)
        pred = model(z_t.unsqueeze(0), tb, cb, lora=adapter).squeeze(0)
        loss = ((pred - eps) ** 2).mean()
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"reconstruction training diverged at step {step}: loss={float(loss)}")
        grads = torch.autograd.grad(loss, adapter.tensors())
        grad_map = {name: g for (name, _), g in zip(adapter.tensor_items(), grads)}
        adapter, state = adam_step(adapter, grad_map, state)
    return adapter.requires_grad_(False)


# ---- adapter file format (same container as checkpoints) ----

def save_adapter(adapter: LoRAAdapter, path: str | Path, base_model_hash: str = "") -> None:
    tensors = {name: t.detach().numpy() for name, t in adapter.tensor_items()}
    meta = {"rank": adapter.rank, "scale": adapter.scale,
            "base_model_hash": base_model_hash}
    container.save_container(path, "adapter", meta, tensors)


def load_adapter(path: str | Path) -> tuple[LoRAAdapter, dict]:
    kind, meta, tensors, _ = container.load_container(path)
    if kind != "adapter":
        raise ConfigError(f"{path}: container holds a {kind!r}, expected an adapter")
    layers: dict[str, LoraPair] = {}
    for name, arr in tensors.items():
        layer_id, part = name.rsplit(".", 1)
        pair = layers.setdefault(layer_id, LoraPair(None, None))  # type: ignore[arg-type]
        setattr(pair, part, torch.from_numpy(np.array(arr)))
    for layer_id, pair in layers.items():
        if pair.A is None or pair.B is None:
            raise ConfigError(f"{path}: incomplete factor pair for {layer_id}")
    return LoRAAdapter(meta["rank"], meta["scale"], layers), meta
