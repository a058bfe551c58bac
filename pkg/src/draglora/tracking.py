"""Point tracking: candidate geometries, feature-space argmin, confidence retreat.

Four candidate strategies over the latent grid, all clipped by the square
neighborhood of radius r2 around the handle:

* ``neighborhood`` — every integer point within Chebyshev distance r2;
* ``distance``     — neighborhood points no farther from the target than the
                     handle is (circle centered at the target);
* ``angle``        — neighborhood points inside the sector at the handle that
                     opens toward the target (radius = handle-target distance);
* ``linear``       — fractional points evenly spaced on the handle-to-target
                     segment, capped at length r2 (needs feature interpolation).

Patch distances are mean absolute difference per feature element, so the
confidence thresholds stay comparable across patch radii and channel counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .model import FeatureMap, sample_feature

Point = tuple[float, float]

STRATEGIES = ("neighborhood", "distance", "angle", "linear")


@dataclass
class PointPair:
    p: Point                       # initial source point
    g: Point                       # target point
    h: Point                       # current handle
    n: Optional[Point] = None      # last temporal target h + d, unset before first DOO step
    reached: bool = False
    last_min_d: Optional[float] = None


@dataclass(frozen=True)
class TrackConfig:
    r2: int = 3
    strategy: str = "distance"
    d2_retreat: float = 1.3
    angle_limit_deg: float = 45.0
    linear_samples: int = 10
    r1: int = 1

    def __post_init__(self):
        if self.r2 < 1:
            raise ValueError(f"r2 must be >= 1, got {self.r2}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, pick one of {STRATEGIES}")
        if self.linear_samples < 2:
            raise ValueError("linear_samples must be >= 2")


def _dist(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _neighborhood(h: Point, r2: int) -> list[Point]:
    xs = range(math.ceil(h[0] - r2), math.floor(h[0] + r2) + 1)
    ys = range(math.ceil(h[1] - r2), math.floor(h[1] + r2) + 1)
    return [(float(x), float(y)) for y in ys for x in xs]


def candidate_set(h: Point, g: Point, cfg: TrackConfig) -> list[Point]:
    """Candidate points for the next handle position; empty when h == g."""
    if h == g:
        return []
    if cfg.strategy == "linear":
        span = min(float(cfg.r2), _dist(h, g))
        dx = (g[0] - h[0]) / _dist(h, g)
        dy = (g[1] - h[1]) / _dist(h, g)
        n = cfg.linear_samples
        return [(h[0] + dx * span * j / (n - 1), h[1] + dy * span * j / (n - 1))
                for j in range(n)]

    box = _neighborhood(h, cfg.r2)
    if cfg.strategy == "neighborhood":
        return box
    if cfg.strategy == "distance":
        radius = _dist(h, g)
        return [q for q in box if _dist(q, g) <= radius]
    # angle: sector at the handle opening toward the target; the handle itself
    # (zero displacement) counts as angle 0.
    radius = _dist(h, g)
    limit = math.radians(cfg.angle_limit_deg)
    to_g = ((g[0] - h[0]) / radius, (g[1] - h[1]) / radius)
    out = []
    for q in box:
        step = (q[0] - h[0], q[1] - h[1])
        norm = math.hypot(*step)
        if norm > radius:
            continue
        if norm == 0.0:
            out.append(q)
            continue
        cos = (step[0] * to_g[0] + step[1] * to_g[1]) / norm
        if math.acos(max(-1.0, min(1.0, cos))) <= limit + 1e-12:
            out.append(q)
    return out


def patch_distance(fmap: FeatureMap, q: Point, ref_patch: torch.Tensor, r1: int) -> float:
    """Mean absolute difference between the live patch at q and the reference."""
    live = sample_feature(fmap, q, r1)
    return float((live - ref_patch).abs().mean())


def track_point(fmap: FeatureMap, ref_patch: torch.Tensor, pair: PointPair,
                cfg: TrackConfig) -> tuple[Point, float]:
    """Feature-space argmin over the candidate set.

    Ties break toward the target, then lexicographically; an empty candidate
    set keeps the current handle and its previous confidence value.
    """
    if pair.reached:
        raise ValueError("track_point called on a reached point")
    candidates = candidate_set(pair.h, pair.g, cfg)
    if not candidates:
        prev = pair.last_min_d if pair.last_min_d is not None else math.inf
        return pair.h, prev
    best: tuple[float, float, float, float] | None = None
    best_q: Point = pair.h
    best_d = math.inf
    with torch.no_grad():
        for q in candidates:
            d = patch_distance(fmap, q, ref_patch, cfg.r1)
            key = (d, _dist(q, pair.g), q[0], q[1])
            if best is None or key < best:
                best, best_q, best_d = key, q, d
    return best_q, best_d


def retreat_filter(prev_h: Point, new_h: Point, min_d: float, cfg: TrackConfig) -> Point:
    """Keep the previous handle when the best match is not confident enough."""
    return prev_h if min_d > cfg.d2_retreat else new_h


def temporal_target(pair: PointPair) -> Point:
    """One unit step from the handle toward the target."""
    dist = _dist(pair.h, pair.g)
    if dist == 0.0:
        raise ValueError("temporal target undefined for h == g; mark the pair reached")
    return (pair.h[0] + (pair.g[0] - pair.h[0]) / dist,
            pair.h[1] + (pair.g[1] - pair.h[1]) / dist)
