"""Drag-update controller: adaptive switching between the gradient mode
(dual-objective optimization plus one latent adaptation per step) and the
adaptation-only mode, plus session setup, final generation, and drag-back.

Record semantics: every controller action emits one StepRecord. A gradient-mode
record carries the tracking stats measured at the top of its iteration (so the
first record shows the untouched session, and curve step 0 equals the initial
handle-target distance) together with that step's loss values. Adaptation-only
records carry the tracking stats measured right after their latent update. The
first record of each adaptation-only run additionally embeds the guard values
that admitted it, so mode legality is auditable from the stream alone.

Wall-clock durations are kept on records in memory but excluded from canonical
JSON so that equal seeds reproduce byte-identical record streams.
"""

from __future__ import annotations

import math
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import torch

from .ilfa import BurstState, IlfaConfig, ilfa_burst, ilfa_step
from .lora import AdamState, LoRAAdapter, adam_step, clone_from, train_reconstruction_lora
from .losses import DragTargets, LossWeights, make_drag_targets, total_loss_step
from .model import ToyUNet, extract_features, predict_noise
from .schedule import NoiseSchedule, denoise, invert_to
from .tracking import PointPair, TrackConfig, retreat_filter, temporal_target, track_point
from .utils import canonical_json, derive_seed, sha256_hex, tensor_bytes

Point = tuple[float, float]

MODE_DOO = "DOO_ILFA"
MODE_ILFA = "ILFA_ONLY"


@dataclass(frozen=True)
class PipelineConfig:
    K: int = 80
    k_ini: int = 10
    l1: float = 1.0
    l2: float = 1.4
    d1: float = 1.0
    d2: float = 1.3
    lr_drag: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    track: TrackConfig = field(default_factory=TrackConfig)
    ilfa: IlfaConfig = field(default_factory=IlfaConfig)
    drag_index: int = 35
    recon_steps: int = 80
    recon_lr: float = 5e-4
    rank: int = 16
    seed: int = 0
    cond: Optional[int] = None

    def __post_init__(self):
        if self.d1 > self.d2:
            raise ValueError(f"need d1 <= d2, got {self.d1} > {self.d2}")
        if self.l1 >= self.l2:
            raise ValueError(f"need l1 < l2, got {self.l1} >= {self.l2}")
        if not self.K > self.k_ini >= 0:
            raise ValueError(f"need K > k_ini >= 0, got K={self.K}, k_ini={self.k_ini}")

    def to_dict(self) -> dict:
        return {
            "K": self.K, "k_ini": self.k_ini, "l1": self.l1, "l2": self.l2,
            "d1": self.d1, "d2": self.d2, "lr_drag": self.lr_drag,
            "lambda_mask": self.weights.lambda_mask, "lambda_dds": self.weights.lambda_dds,
            "r2": self.track.r2, "ept": self.track.strategy,
            "d2_retreat": self.track.d2_retreat,
            "angle_limit_deg": self.track.angle_limit_deg,
            "linear_samples": self.track.linear_samples, "r1": self.track.r1,
            "ilfa_variant": self.ilfa.variant, "ilfa_burst_cap": self.ilfa.burst_cap,
            "ilfa_budget": self.ilfa.session_budget, "ilfa_enabled": self.ilfa.enabled,
            "drag_index": self.drag_index, "recon_steps": self.recon_steps,
            "recon_lr": self.recon_lr, "rank": self.rank, "seed": self.seed,
            "cond": self.cond,
        }

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        base = PipelineConfig()
        weights = LossWeights(
            lambda_mask=d.get("lambda_mask", base.weights.lambda_mask),
            lambda_dds=d.get("lambda_dds", base.weights.lambda_dds))
        track = TrackConfig(
            r2=d.get("r2", base.track.r2),
            strategy=d.get("ept", base.track.strategy),
            d2_retreat=d.get("d2_retreat", base.track.d2_retreat),
            angle_limit_deg=d.get("angle_limit_deg", base.track.angle_limit_deg),
            linear_samples=d.get("linear_samples", base.track.linear_samples),
            r1=d.get("r1", base.track.r1))
        ilfa = IlfaConfig(
            variant=d.get("ilfa_variant", base.ilfa.variant),
            burst_cap=d.get("ilfa_burst_cap", base.ilfa.burst_cap),
            session_budget=d.get("ilfa_budget", base.ilfa.session_budget),
            enabled=d.get("ilfa_enabled", base.ilfa.enabled))
        return PipelineConfig(
            K=d.get("K", base.K), k_ini=d.get("k_ini", base.k_ini),
            l1=d.get("l1", base.l1), l2=d.get("l2", base.l2),
            d1=d.get("d1", base.d1), d2=d.get("d2", base.d2),
            lr_drag=d.get("lr_drag", base.lr_drag), weights=weights, track=track,
            ilfa=ilfa, drag_index=d.get("drag_index", base.drag_index),
            recon_steps=d.get("recon_steps", base.recon_steps),
            recon_lr=d.get("recon_lr", base.recon_lr), rank=d.get("rank", base.rank),
            seed=d.get("seed", base.seed), cond=d.get("cond", base.cond))


@dataclass
class PointStat:
    h: Point
    min_d: Optional[float]
    dist_target: float
    dist_temporal: Optional[float]
    reached: bool

    def to_dict(self) -> dict:
        return {
            "h": [self.h[0], self.h[1]],
            "min_d": self.min_d,
            "dist_target": self.dist_target,
            "dist_temporal": self.dist_temporal,
            "reached": self.reached,
        }


@dataclass
class StepRecord:
    ordinal: int
    mode: str
    k: int
    points: list[PointStat]
    losses: Optional[dict] = None
    burst_entry: Optional[dict] = None
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        """Canonical form: excludes wall-clock so equal seeds serialize equally."""
        return {
            "ordinal": self.ordinal,
            "mode": self.mode,
            "k": self.k,
            "points": [p.to_dict() for p in self.points],
            "losses": self.losses,
            "burst_entry": self.burst_entry,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


@dataclass
class DragSession:
    session_id: str
    z0: torch.Tensor
    mask: torch.Tensor
    pairs: list[PointPair]
    cond: Optional[int]
    rec_adapter: LoRAAdapter
    adapter: LoRAAdapter
    adam: AdamState
    z35: torch.Tensor
    z35_ref: torch.Tensor
    z34_ref: torch.Tensor
    targets: DragTargets
    k: int = 0
    ilfa_used: int = 0
    records: list[StepRecord] = field(default_factory=list)
    status: str = "idle"
    failure_reason: Optional[str] = None
    done_reason: Optional[str] = None
    cancel_requested: bool = False
    rng_dds: Optional[torch.Generator] = None
    rng_ilfa: Optional[torch.Generator] = None

    def state_hash(self) -> str:
        chunks = [tensor_bytes(self.z0), tensor_bytes(self.mask),
                  tensor_bytes(self.z35_ref), tensor_bytes(self.z34_ref),
                  tensor_bytes(self.targets.f0.data)]
        for _, t in self.adapter.tensor_items():
            chunks.append(tensor_bytes(t))
        points = canonical_json([[*p.p, *p.g] for p in self.pairs]).encode()
        return sha256_hex(points, *chunks)


def _as_pairs(points: Sequence) -> list[PointPair]:
    pairs = []
    for entry in points:
        if len(entry) == 4:
            px, py, gx, gy = entry
        else:
            (px, py), (gx, gy) = entry
        pairs.append(PointPair(p=(float(px), float(py)), g=(float(gx), float(gy)),
                               h=(float(px), float(py))))
    return pairs


def start_session(image: torch.Tensor, mask: torch.Tensor, points: Sequence,
                  model: ToyUNet, sched: NoiseSchedule, cfg: PipelineConfig,
                  rec_adapter: Optional[LoRAAdapter] = None,
                  session_id: Optional[str] = None) -> DragSession:
    """Prepare a drag session: reconstruction adapter, inversion, cached references."""
    if len(points) == 0:
        raise ValueError("a drag session needs at least one point pair")
    C, H, W = image.shape
    pairs = _as_pairs(points)
    for pair in pairs:
        for (x, y) in (pair.p, pair.g):
            if not (0 <= x <= W - 1 and 0 <= y <= H - 1):
                raise ValueError(f"point ({x}, {y}) outside the {W}x{H} grid")
    if mask.shape[-2:] != (H, W):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match image")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")

    if rec_adapter is None:
        rec_adapter = train_reconstruction_lora(
            model, image, sched, steps=cfg.recon_steps, lr=cfg.recon_lr,
            seed=derive_seed(cfg.seed, "recon"), rank=cfg.rank, cond=cfg.cond)

    t35 = sched.t_of_index(cfg.drag_index)
    with torch.no_grad():
        traj = invert_to(
            image, lambda z, t: predict_noise(model, rec_adapter, z, t, cfg.cond),
            sched, cfg.drag_index)
        z35_ref = traj[cfg.drag_index].data
        z34_ref = traj[cfg.drag_index - 1].data
        f0 = extract_features(model, rec_adapter, z35_ref, t35, cfg.cond,
                              t_index=cfg.drag_index)
    targets = make_drag_targets(f0, [p.p for p in pairs], z34_ref, cfg.track.r1)

    for pair in pairs:
        if math.hypot(pair.h[0] - pair.g[0], pair.h[1] - pair.g[1]) <= cfg.l1:
            pair.reached = True

    adapter = clone_from(rec_adapter)
    return DragSession(
        session_id=session_id or str(uuid.uuid4()),
        z0=image.detach().clone(), mask=mask.detach().clone().float(), pairs=pairs,
        cond=cfg.cond, rec_adapter=rec_adapter, adapter=adapter,
        adam=AdamState(lr=cfg.lr_drag),
        z35=z35_ref.detach().clone(), z35_ref=z35_ref, z34_ref=z34_ref,
        targets=targets,
        rng_dds=torch.Generator().manual_seed(derive_seed(cfg.seed, "dds")),
        rng_ilfa=torch.Generator().manual_seed(derive_seed(cfg.seed, "ilfa")),
    )


def _track_all(session: DragSession, model: ToyUNet, sched: NoiseSchedule,
               cfg: PipelineConfig) -> list[PointStat]:
    """One tracking pass over unreached points (with retreat); returns per-point stats."""
    t35 = sched.t_of_index(cfg.drag_index)
    with torch.no_grad():
        fmap = extract_features(model, session.adapter, session.z35, t35,
                                session.cond, t_index=cfg.drag_index)
    stats = []
    for pair, ref_patch in zip(session.pairs, session.targets.ref_patches):
        if not pair.reached:
            new_h, min_d = track_point(fmap, ref_patch, pair, cfg.track)
            pair.h = retreat_filter(pair.h, new_h, min_d, cfg.track)
            pair.last_min_d = min_d
            if math.hypot(pair.h[0] - pair.g[0], pair.h[1] - pair.g[1]) <= cfg.l1:
                pair.reached = True
        dist_target = math.hypot(pair.h[0] - pair.g[0], pair.h[1] - pair.g[1])
        dist_temporal = (math.hypot(pair.h[0] - pair.n[0], pair.h[1] - pair.n[1])
                         if pair.n is not None else None)
        stats.append(PointStat(h=pair.h, min_d=pair.last_min_d,
                               dist_target=dist_target, dist_temporal=dist_temporal,
                               reached=pair.reached))
    return stats


def _guard_values(session: DragSession, stats: list[PointStat]) -> tuple[Optional[float], Optional[float]]:
    """Max tracking distance and max temporal-target distance over unreached points.

    Returns (None, None) when any unreached point lacks a temporal target yet."""
    unreached = [(pair, st) for pair, st in zip(session.pairs, stats) if not pair.reached]
    if not unreached:
        return None, None
    if any(pair.n is None or st.min_d is None for pair, st in unreached):
        return None, None
    return (max(st.min_d for _, st in unreached),
            max(st.dist_temporal for _, st in unreached))


StepSink = Callable[[StepRecord], None]


def run_drag(session: DragSession, model: ToyUNet, sched: NoiseSchedule,
             cfg: PipelineConfig, sink: Optional[StepSink] = None) -> DragSession:
    """The adaptive two-mode drag loop; see the module docstring for record semantics."""
    if session.status != "idle":
        raise ValueError(f"session is {session.status}, expected idle")
    session.status = "running"

    def emit(record: StepRecord):
        session.records.append(record)
        if sink is not None:
            sink(record)

    try:
        while True:
            if all(pair.reached for pair in session.pairs):
                session.done_reason = "all points reached"
                break
            if session.k >= cfg.K:
                session.done_reason = "optimization step cap"
                break
            if cfg.ilfa.enabled and session.ilfa_used >= cfg.ilfa.session_budget:
                session.done_reason = "latent adaptation budget exhausted"
                break
            if session.cancel_requested:
                session.status = "failed"
                session.failure_reason = "cancelled"
                return session

            t_start = time.perf_counter()
            stats = _track_all(session, model, sched, cfg)
            if all(pair.reached for pair in session.pairs):
                session.done_reason = "all points reached"
                break

            max_min_d, max_dist_n = _guard_values(session, stats)
            confident = (cfg.ilfa.enabled and session.k > cfg.k_ini
                         and max_min_d is not None
                         and max_min_d < cfg.d1 and max_dist_n < cfg.l2)

            if confident:
                entry_info = {"k": session.k, "max_min_d": max_min_d,
                              "max_dist_temporal": max_dist_n}
                ordinal_base = len(session.records)
                burst_pos = [0]

                def hook(z: torch.Tensor) -> BurstState:
                    session.z35 = z
                    st = _track_all(session, model, sched, cfg)
                    mmd, _ = _guard_values(session, st)
                    all_reached = all(p.reached for p in session.pairs)
                    rec = StepRecord(
                        ordinal=ordinal_base + burst_pos[0],
                        mode=MODE_ILFA, k=session.k, points=st,
                        burst_entry=entry_info if burst_pos[0] == 0 else None,
                        wall_ms=0.0)
                    burst_pos[0] += 1
                    return BurstState(
                        max_min_d=mmd if mmd is not None else math.inf,
                        all_reached=all_reached, record=rec)

                entry = BurstState(max_min_d=max_min_d, all_reached=False, record=None)
                budget_left = cfg.ilfa.session_budget - session.ilfa_used
                z_new, burst_records, iters = ilfa_burst(
                    session.z35, model, session.adapter, session.mask, sched,
                    cfg.ilfa, session.rng_ilfa, hook, entry, cfg.d2, budget_left,
                    session.cond, cfg.drag_index)
                session.z35 = z_new
                session.ilfa_used += iters
                elapsed = (time.perf_counter() - t_start) * 1000.0
                for rec in burst_records:
                    rec.wall_ms = elapsed / max(len(burst_records), 1)
                    emit(rec)
                if iters == 0:
                    # burst_cap or budget left no room to run; stop rather than spin
                    session.done_reason = "latent adaptation unavailable (cap or budget)"
                    break
                continue

            # gradient mode: refresh temporal targets, one optimization step,
            # one latent adaptation
            temporal: list[Optional[Point]] = []
            for pair in session.pairs:
                if pair.reached:
                    temporal.append(None)
                else:
                    pair.n = temporal_target(pair)
                    temporal.append(pair.n)

            grads, loss_values = total_loss_step(
                model, session.adapter, session.z35, session.targets, temporal,
                session.mask, sched, cfg.weights, session.rng_dds, session.cond,
                cfg.drag_index)
            if not all(math.isfinite(v) for v in loss_values.as_dict().values()):
                session.status = "failed"
                session.failure_reason = (
                    f"non-finite loss at k={session.k}: {loss_values.as_dict()}")
                return session
            session.adapter, session.adam = adam_step(session.adapter, grads, session.adam)
            if cfg.ilfa.enabled:
                session.z35 = ilfa_step(session.z35, model, session.adapter,
                                        session.mask, sched, cfg.ilfa,
                                        session.rng_ilfa, session.cond,
                                        cfg.drag_index)
            session.k += 1
            emit(StepRecord(
                ordinal=len(session.records), mode=MODE_DOO, k=session.k,
                points=stats, losses=loss_values.as_dict(),
                wall_ms=(time.perf_counter() - t_start) * 1000.0))

        session.status = "done"
        return session
    except Exception as e:
        session.status = "failed"
        session.failure_reason = f"{type(e).__name__}: {e}"
        raise


def finalize(session: DragSession, model: ToyUNet, sched: NoiseSchedule,
             cfg: Optional[PipelineConfig] = None) -> torch.Tensor:
    """Denoise the edited latent back to a clean image with the adapted model."""
    if session.status != "done":
        raise ValueError(f"cannot finalize a session in status {session.status!r}")
    drag_index = cfg.drag_index if cfg is not None else 35
    with torch.no_grad():
        return denoise(
            session.z35,
            lambda z, t: predict_noise(model, session.adapter, z, t, session.cond),
            sched, from_index=drag_index, to_index=0)


@dataclass
class DragBackResult:
    first: DragSession
    second: DragSession
    edited_first: torch.Tensor
    edited_second: torch.Tensor
    similarity: float


def drag_back(image: torch.Tensor, mask: torch.Tensor, points: Sequence,
              model: ToyUNet, sched: NoiseSchedule, cfg: PipelineConfig,
              sink_first: Optional[StepSink] = None,
              sink_second: Optional[StepSink] = None) -> DragBackResult:
    """Round trip: drag, then drag the edit back with swapped points, and report
    the feature-space distance between the second edit and the original."""
    from .metrics import fidelity

    first = start_session(image, mask, points, model, sched, cfg)
    run_drag(first, model, sched, cfg, sink_first)
    edited_first = finalize(first, model, sched, cfg)

    swapped = [[*pair.g, *pair.p] for pair in first.pairs]
    cfg_back = replace(cfg, seed=derive_seed(cfg.seed, "dragback"))
    second = start_session(edited_first, mask, swapped, model, sched, cfg_back)
    run_drag(second, model, sched, cfg_back, sink_second)
    edited_second = finalize(second, model, sched, cfg_back)

    similarity = fidelity(image, edited_second, model, sched)
    return DragBackResult(first, second, edited_first, edited_second, similarity)
