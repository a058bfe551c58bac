"""Desk-scale evaluation analogs: mean distance via feature correspondence,
feature-space fidelity, and per-step curves from record streams.

Correspondence uses the toy model's own decoder features at a mid-schedule
timestep with a fixed noise draw. Absolute values are NOT comparable to
published benchmark numbers; every report carries a desk-scale banner.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch

from .model import FeatureMap, ToyUNet, extract_features
from .schedule import NoiseSchedule, ddpm_forward

Point = tuple[float, float]

DESK_SCALE_BANNER = ("desk-scale analog: toy-model feature metrics, "
                     "not comparable to published benchmark values")

FeatureFn = Callable[[torch.Tensor], FeatureMap]


def correspondence_features(model: ToyUNet, sched: NoiseSchedule,
                            t_frac: float = 0.3, noise_seed: int = 0,
                            cond: Optional[int] = None) -> FeatureFn:
    """Feature extractor at a fixed mid-schedule timestep with a fixed noise draw."""
    t = int(round(t_frac * sched.T_train))
    t = min(max(t, 0), sched.T_train - 1)

    def fn(image: torch.Tensor) -> FeatureMap:
        gen = torch.Generator().manual_seed(noise_seed)
        eps = torch.randn(image.shape, generator=gen, dtype=image.dtype)
        with torch.no_grad():
            z_t = ddpm_forward(image, t, eps, sched)
            return extract_features(model, None, z_t, t, cond)

    return fn


def _cosine_distance_grid(feat: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity of the query vector against every spatial position."""
    C, H, W = feat.shape
    flat = feat.reshape(C, H * W)
    fn = flat / flat.norm(dim=0, keepdim=True).clamp_min(1e-12)
    qn = query / query.norm().clamp_min(1e-12)
    return (1.0 - qn @ fn).reshape(H, W)


def mean_distance(original: torch.Tensor, edited: torch.Tensor,
                  handles: Sequence[Point], targets: Sequence[Point],
                  model: Optional[ToyUNet] = None, sched: Optional[NoiseSchedule] = None,
                  mask: Optional[torch.Tensor] = None,
                  feature_fn: Optional[FeatureFn] = None,
                  ) -> tuple[float, list[Point]]:
    """Mean distance between matched handle locations in the edit and the targets.

    For each handle, the edited-image position with minimal cosine feature
    distance to the original-image handle feature is found over the whole grid,
    or over the mask when one is given (the masked variant). Ties break
    lexicographically.
    """
    if feature_fn is None:
        if model is None or sched is None:
            raise ValueError("mean_distance needs either feature_fn or model+sched")
        feature_fn = correspondence_features(model, sched)
    if len(handles) != len(targets) or not handles:
        raise ValueError("handles and targets must be equal-length, non-empty")
    f_ori = feature_fn(original).data
    f_edit = feature_fn(edited).data
    H, W = f_edit.shape[-2:]
    if mask is not None:
        if mask.shape[-2:] != (H, W):
            raise ValueError("mask shape does not match feature grid")
        allowed = mask.reshape(-1) > 0.5
        if not bool(allowed.any()):
            raise ValueError("masked matching requested with an empty mask")
    matches: list[Point] = []
    total = 0.0
    for (hx, hy), (gx, gy) in zip(handles, targets):
        q = f_ori[:, int(round(hy)), int(round(hx))]
        dist = _cosine_distance_grid(f_edit, q).reshape(-1)
        if mask is not None:
            dist = torch.where(allowed, dist, torch.full_like(dist, math.inf))
        best = int(torch.argmin(dist))  # torch.argmin returns the first minimum
        my, mx = divmod(best, W)
        matches.append((float(mx), float(my)))
        total += math.hypot(mx - gx, my - gy)
    return total / len(handles), matches


def fidelity(original: torch.Tensor, edited: torch.Tensor,
             model: Optional[ToyUNet] = None, sched: Optional[NoiseSchedule] = None,
             feature_fn: Optional[FeatureFn] = None) -> float:
    """Root-mean-square feature distance between two images; 0 for identical inputs."""
    if original.shape != edited.shape:
        raise ValueError("fidelity inputs must share a shape")
    if feature_fn is None:
        if model is None or sched is None:
            raise ValueError("fidelity needs either feature_fn or model+sched")
        feature_fn = correspondence_features(model, sched)
    fa = feature_fn(original).data.double()
    fb = feature_fn(edited).data.double()
    return float(((fa - fb) ** 2).mean().sqrt())


# ---- curves over record streams ----

def curves(records: Sequence) -> dict:
    """Per-step mean tracking distance and handle-target distance series."""
    if not records:
        raise ValueError("curves need at least one record")
    rows = []
    for rec in records:
        d = rec.to_dict() if hasattr(rec, "to_dict") else rec
        min_ds = [p["min_d"] for p in d["points"] if p["min_d"] is not None]
        dts = [p["dist_target"] for p in d["points"]]
        losses = d.get("losses") or {}
        rows.append({
            "step": d["ordinal"],
            "mode": d["mode"],
            "mean_minD": sum(min_ds) / len(min_ds) if min_ds else None,
            "mean_dT": sum(dts) / len(dts),
            "loss_drag": losses.get("drag"),
            "loss_mask": losses.get("mask"),
        })
    return {"series": rows}


def curves_csv(series: dict) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["step", "mode", "mean_minD", "mean_dT", "loss_drag", "loss_mask"])
    for row in series["series"]:
        writer.writerow([row["step"], row["mode"], row["mean_minD"], row["mean_dT"],
                         row["loss_drag"], row["loss_mask"]])
    return out.getvalue()


@dataclass
class TaskResult:
    task_id: str
    md: float
    m_md: Optional[float]
    fidelity: float
    initial_dt: float
    final_dt: float
    steps_total: int
    doo_steps: int
    ilfa_steps: int
    wall_s: float

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id, "md": self.md, "m_md": self.m_md,
            "fidelity": self.fidelity, "initial_dT": self.initial_dt,
            "final_dT": self.final_dt, "steps_total": self.steps_total,
            "doo_steps": self.doo_steps, "ilfa_steps": self.ilfa_steps,
            "wall_s": self.wall_s,
        }


@dataclass
class EvalReport:
    banner: str = DESK_SCALE_BANNER
    tasks: list[TaskResult] = field(default_factory=list)

    def aggregate(self) -> dict:
        def stats(values):
            vals = sorted(v for v in values if v is not None)
            if not vals:
                return {"mean": None, "median": None}
            return {"mean": sum(vals) / len(vals),
                    "median": vals[len(vals) // 2] if len(vals) % 2 == 1
                    else 0.5 * (vals[len(vals) // 2 - 1] + vals[len(vals) // 2])}
        return {
            "md": stats([t.md for t in self.tasks]),
            "m_md": stats([t.m_md for t in self.tasks]),
            "fidelity": stats([t.fidelity for t in self.tasks]),
            "final_dT": stats([t.final_dt for t in self.tasks]),
            "wall_s": stats([t.wall_s for t in self.tasks]),
        }

    def to_json(self) -> str:
        return json.dumps({
            "banner": self.banner,
            "tasks": [t.to_dict() for t in self.tasks],
            "aggregate": self.aggregate(),
        }, indent=1)
