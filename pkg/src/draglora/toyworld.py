"""Synthetic scene rendering, dataset generation, and toy model training.

Scenes are single bright shapes (disc, square, triangle; the class ids) over a
dark low-frequency background, rendered into 3x32x32 images in [-1, 1] with a
one-pixel soft edge. Every render keeps its SceneSpec beside it so tests can
construct ground-truth drags by moving the shape center.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import container
from .errors import CheckpointError
from .model import ToyUNet, ToyUNetConfig, architecture_descriptor, model_from_descriptor
from .schedule import NoiseSchedule, build_schedule
from .utils import sha256_hex, tensor_bytes

log = logging.getLogger(__name__)

SHAPES = ("disc", "square", "triangle")
MARGIN = 2.0


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    center: tuple[float, float]   # (x, y)
    size: float                   # radius / half-width
    fill: tuple[float, float, float]
    bg_seed: int
    image_size: int = 32

    @property
    def class_id(self) -> int:
        return SHAPES.index(self.shape)

    def shifted(self, dx: float, dy: float) -> "SceneSpec":
        return SceneSpec(self.shape, (self.center[0] + dx, self.center[1] + dy),
                         self.size, self.fill, self.bg_seed, self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(d["shape"], tuple(d["center"]), d["size"], tuple(d["fill"]),
                         d["bg_seed"], d.get("image_size", 32))


def _signed_distance(spec: SceneSpec, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    cx, cy = spec.center
    if spec.shape == "disc":
        return torch.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) - spec.size
    if spec.shape == "square":
        return torch.maximum((xs - cx).abs(), (ys - cy).abs()) - spec.size
    # triangle: upward equilateral-ish triangle as intersection of three half planes
    s = spec.size
    v = [(cx, cy - s), (cx - 0.866 * s, cy + 0.5 * s), (cx + 0.866 * s, cy + 0.5 * s)]
    sd = torch.full_like(xs, -math.inf)
    for i in range(3):
        x0, y0 = v[i]
        x1, y1 = v[(i + 1) % 3]
        ex, ey = x1 - x0, y1 - y0
        norm = math.hypot(ex, ey)
        # outward normal in image coordinates (y grows downward)
        nx, ny = -ey / norm, ex / norm
        sd = torch.maximum(sd, (xs - x0) * nx + (ys - y0) * ny)
    return sd


def render_scene(spec: SceneSpec) -> torch.Tensor:
    """Render a spec to a (3, H, W) image in [-1, 1]."""
    n = spec.image_size
    gen = torch.Generator().manual_seed(spec.bg_seed)
    coarse = torch.rand(3, 4, 4, generator=gen) * 0.3 - 0.85   # dark base in [-0.85, -0.55]
    bg = F.interpolate(coarse.unsqueeze(0), size=(n, n), mode="bilinear",
                       align_corners=True).squeeze(0)
    ys, xs = torch.meshgrid(torch.arange(n, dtype=torch.float32),
                            torch.arange(n, dtype=torch.float32), indexing="ij")
    sd = _signed_distance(spec, xs, ys)
    coverage = (0.5 - sd).clamp(0.0, 1.0)
    fill = torch.tensor(spec.fill, dtype=torch.float32)[:, None, None]
    img = bg * (1.0 - coverage) + fill * coverage
    return img.clamp(-1.0, 1.0)


def shape_mask(spec: SceneSpec, dilate: float = 0.0) -> torch.Tensor:
    """Binary (H, W) mask of the shape, optionally grown by ``dilate`` pixels."""
    n = spec.image_size
    ys, xs = torch.meshgrid(torch.arange(n, dtype=torch.float32),
                            torch.arange(n, dtype=torch.float32), indexing="ij")
    sd = _signed_distance(spec, xs, ys)
    return (sd <= dilate).float()


def gen_dataset(seed: int, n: int) -> list[tuple[torch.Tensor, int, SceneSpec]]:
    """Deterministic procedural dataset of (image, class id, spec)."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    out = []
    for i in range(n):
        shape = SHAPES[int(torch.randint(0, len(SHAPES), (1,), generator=gen))]
        size = float(torch.empty(1).uniform_(4.0, 7.0, generator=gen))
        lo = size + MARGIN + 0.5
        hi = 31.0 - size - MARGIN - 0.5
        cx = float(torch.empty(1).uniform_(lo, hi, generator=gen))
        cy = float(torch.empty(1).uniform_(lo, hi, generator=gen))
        fill = tuple(float(v) for v in torch.empty(3).uniform_(0.1, 1.0, generator=gen))
        bg_seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=gen))
        spec = SceneSpec(shape, (cx, cy), size, fill, bg_seed)
        out.append((render_scene(spec), spec.class_id, spec))
    return out


def dataset_hash(dataset: list[tuple[torch.Tensor, int, SceneSpec]]) -> str:
    return sha256_hex(*(tensor_bytes(img) for img, _, _ in dataset))


# ---- training ----

@dataclass
class TrainResult:
    model: ToyUNet
    curve: list[dict]
    meta: dict


def train_toy_model(dataset: list[tuple[torch.Tensor, int, SceneSpec]],
                    sched: NoiseSchedule, steps: int, lr: float, seed: int,
                    batch_size: int = 32, config: Optional[ToyUNetConfig] = None,
                    log_every: int = 200, weight_ema: float = 0.999,
                    lr_final_frac: float = 0.1) -> TrainResult:
    """Epsilon-prediction training; fully seed-deterministic on CPU.

    Cosine learning-rate decay plus a weight EMA (returned as the model) keep
    the predictor smooth between adjacent latents, which is what deterministic
    inversion quality depends on. Set weight_ema=0 to keep raw weights.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    torch.manual_seed(seed)
    model = ToyUNet(config or ToyUNetConfig())
    meta = {
        "architecture": architecture_descriptor(model.config),
        "schedule": sched.params(),
        "train_seed": seed,
        "dataset_hash": dataset_hash(dataset),
        "train_steps": steps,
        "lr": lr,
        "weight_ema": weight_ema,
        "lr_final_frac": lr_final_frac,
    }
    curve: list[dict] = []
    if steps == 0:
        return TrainResult(model, curve, meta)

    images = torch.stack([img for img, _, _ in dataset])
    classes = torch.tensor([cid for _, cid, _ in dataset], dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sqrt_ab = torch.sqrt(sched.alpha_bars.float())
    sqrt_1mab = torch.sqrt(1.0 - sched.alpha_bars.float())
    ema_weights = ({name: p.detach().clone() for name, p in model.state_dict().items()}
                   if weight_ema > 0 else None)

    ema = None
    last_good = copy.deepcopy(model.state_dict())
    for step in range(steps):
        frac = step / max(steps - 1, 1)
        scale = lr_final_frac + (1 - lr_final_frac) * 0.5 * (1 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = lr * scale
        idx = torch.randint(0, len(dataset), (batch_size,), generator=gen)
        x0 = images[idx]
        cond = classes[idx]
        t = torch.randint(0, sched.T_train, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        zt = sqrt_ab[t][:, None, None, None] * x0 + sqrt_1mab[t][:, None, None, None] * eps
        pred = model(zt, t, cond)
        loss = ((pred - eps) ** 2).mean()
        if not torch.isfinite(loss):
            log.warning("training diverged at step %d; returning last good snapshot", step)
            model.load_state_dict(last_good)
            meta["diverged_at"] = step
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        if ema_weights is not None:
            with torch.no_grad():
                for name, p in model.state_dict().items():
                    ema_weights[name].mul_(weight_ema).add_(p, alpha=1 - weight_ema)
        cur = float(loss.detach())
        ema = cur if ema is None else 0.99 * ema + 0.01 * cur
        if step % log_every == 0 or step == steps - 1:
            curve.append({"step": step, "loss": cur, "ema": ema})
            last_good = copy.deepcopy(model.state_dict())
    if ema_weights is not None and "diverged_at" not in meta:
        model.load_state_dict(ema_weights)
    return TrainResult(model, curve, meta)


# ---- checkpoint container ----

def save_checkpoint(model: ToyUNet, meta: dict, path: str | Path) -> str:
    tensors = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    container.save_container(path, "checkpoint", meta, tensors)
    _, _, _, payload_hash = container.load_container(path)
    return payload_hash


def load_checkpoint(path: str | Path) -> tuple[ToyUNet, dict, str]:
    """Returns (model, meta, payload hash); validates container integrity."""
    kind, meta, tensors, payload_hash = container.load_container(path)
    if kind != "checkpoint":
        raise CheckpointError(f"{path}: container holds a {kind!r}, expected a checkpoint")
    model = model_from_descriptor(meta["architecture"])
    state = {name: torch.from_numpy(np.array(arr)) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model, meta, payload_hash


def schedule_from_meta(meta: dict) -> NoiseSchedule:
    p = meta["schedule"]
    return build_schedule(p["T_train"], p["beta_start"], p["beta_end"],
                          p["inference_steps"])


def save_curve(curve: list[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps(curve, indent=1))
