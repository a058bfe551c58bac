"""HTTP session service: create drag sessions, run them on a bounded worker
pool, stream step records over server-sent events, and persist every artifact
under one directory per session.

Statuses: ``idle`` (created; preparing or prepared) -> ``running`` ->
``done`` | ``failed``. Restart recovery marks interrupted sessions failed;
completed artifacts are never rewritten.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from fastapi import FastAPI, Form, Header, Request, Response, UploadFile
from fastapi.responses import JSONResponse, StreamingResponse

from .metrics import curves, curves_csv, fidelity
from .pipeline import (DragSession, PipelineConfig, StepRecord, finalize,
                       run_drag, start_session)
from .schedule import NoiseSchedule
from .model import ToyUNet
from .toyworld import SceneSpec, load_checkpoint, render_scene, schedule_from_meta
from .utils import derive_seed

MAX_QUEUE_FACTOR = 4


def _png_to_tensor(data: bytes) -> torch.Tensor:
    from PIL import Image
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def _tensor_to_png(tensor: torch.Tensor) -> bytes:
    from PIL import Image
    arr = ((tensor.clamp(-1, 1) + 1.0) * 127.5).round().byte()
    buf = io.BytesIO()
    Image.fromarray(arr.permute(1, 2, 0).contiguous().numpy(), "RGB").save(
        buf, format="PNG")
    return buf.getvalue()


class Holder:
    """Mutable per-session service state plus its on-disk mirror."""

    def __init__(self, session_id: str, dirpath: Path, cfg: PipelineConfig,
                 points: list, parent_id: Optional[str] = None):
        self.id = session_id
        self.dir = dirpath
        self.cfg = cfg
        self.points = points
        self.parent_id = parent_id
        self.child_id: Optional[str] = None
        self.status = "idle"
        self.prepared = False
        self.failure_reason: Optional[str] = None
        self.done_reason: Optional[str] = None
        self.records: list[dict] = []
        self.cond = threading.Condition()
        self.session: Optional[DragSession] = None
        self.image: Optional[torch.Tensor] = None
        self.mask: Optional[torch.Tensor] = None
        self.edited: Optional[torch.Tensor] = None
        self.drag_queued = False
        self.created_at = time.time()

    def envelope(self) -> dict:
        return {
            "id": self.id,
            "status": self.status,
            "prepared": self.prepared,
            "created_at": self.created_at,
            "config": self.cfg.to_dict(),
            "points": self.points,
            "parent_id": self.parent_id,
            "child_id": self.child_id,
            "failure_reason": self.failure_reason,
            "done_reason": self.done_reason,
            "records": len(self.records),
            "artifacts": {
                "records": str(self.dir / "records.jsonl"),
                "edited": str(self.dir / "edited.png"),
            },
        }

    def persist_envelope(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "envelope.json").write_text(json.dumps(self.envelope(), indent=1))

    def transition(self, status: str, failure: Optional[str] = None,
                   done: Optional[str] = None) -> None:
        with self.cond:
            self.status = status
            if failure:
                self.failure_reason = failure
            if done:
                self.done_reason = done
            self.persist_envelope()
            self.cond.notify_all()

    def append_record(self, record: StepRecord) -> None:
        line = record.to_json()
        with self.cond:
            self.records.append(record.to_dict())
            with open(self.dir / "records.jsonl", "a") as f:
                f.write(line + "\n")
            self.cond.notify_all()

    def terminal(self) -> bool:
        return self.status in ("done", "failed")


class Service:
    def __init__(self, model: ToyUNet, sched: NoiseSchedule, data_dir: Path,
                 workers: int = 2, base_config: Optional[dict] = None):
        self.model = model
        self.sched = sched
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.workers = workers
        self.base_config = base_config or {}
        self.executor = ThreadPoolExecutor(max_workers=workers)
        self.pending = 0
        self.lock = threading.Lock()
        self.holders: dict[str, Holder] = {}
        self.idempotency: dict[str, str] = {}
        self._recover()

    # -- restart recovery: interrupted sessions become failed, artifacts stay --
    def _recover(self) -> None:
        for env_path in self.data_dir.glob("*/envelope.json"):
            try:
                env = json.loads(env_path.read_text())
            except json.JSONDecodeError:
                continue
            if env.get("status") in ("idle", "running"):
                env["status"] = "failed"
                env["failure_reason"] = "interrupted by service restart"
                env_path.write_text(json.dumps(env, indent=1))

    def saturated(self) -> bool:
        with self.lock:
            return self.pending >= self.workers * MAX_QUEUE_FACTOR

    def submit(self, fn) -> None:
        with self.lock:
            self.pending += 1

        def wrapped():
            try:
                fn()
            finally:
                with self.lock:
                    self.pending -= 1

        self.executor.submit(wrapped)

    # -- session lifecycle --

    def create(self, image: torch.Tensor, mask: torch.Tensor, points: list,
               cfg: PipelineConfig, parent_id: Optional[str] = None) -> Holder:
        sid = str(uuid.uuid4())
        holder = Holder(sid, self.data_dir / sid, cfg, points, parent_id)
        holder.image = image
        holder.mask = mask
        self.holders[sid] = holder
        holder.persist_envelope()
        (holder.dir / "input.png").write_bytes(_tensor_to_png(image))
        mask_png = (mask * 2.0 - 1.0).expand(3, *mask.shape)
        (holder.dir / "mask.png").write_bytes(_tensor_to_png(mask_png))

        def prepare():
            try:
                holder.session = start_session(image, mask, points, self.model,
                                               self.sched, cfg, session_id=sid)
                with holder.cond:
                    holder.prepared = True
                    holder.persist_envelope()
                    holder.cond.notify_all()
            except Exception as e:
                holder.transition("failed", failure=f"prepare failed: {e}")

        self.submit(prepare)
        return holder

    def start_drag(self, holder: Holder) -> None:
        def work():
            holder.transition("running")
            try:
                run_drag(holder.session, self.model, self.sched, holder.cfg,
                         sink=holder.append_record)
            except Exception as e:
                holder.transition("failed", failure=str(e))
                return
            if holder.session.status == "failed":
                holder.transition("failed", failure=holder.session.failure_reason)
                return
            edited = finalize(holder.session, self.model, self.sched, holder.cfg)
            holder.edited = edited
            (holder.dir / "edited.png").write_bytes(_tensor_to_png(edited))
            if holder.records:
                (holder.dir / "curves.csv").write_text(_curves_from_dicts(holder.records))
            holder.transition("done", done=holder.session.done_reason)

        self.submit(work)


def _curves_from_dicts(records: list[dict]) -> str:
    return curves_csv(curves(records))


def create_app(ckpt_path: Optional[str] = None, data_dir: str = "./draglora-data",
               workers: int = 2, model: Optional[ToyUNet] = None,
               sched: Optional[NoiseSchedule] = None,
               base_config: Optional[dict] = None) -> FastAPI:
    if model is None:
        if ckpt_path is None:
            raise ValueError("create_app needs a checkpoint path or a model")
        model, meta, _ = load_checkpoint(ckpt_path)
        sched = schedule_from_meta(meta)
    svc = Service(model, sched, Path(data_dir), workers, base_config)
    app = FastAPI(title="draglora service")
    app.state.service = svc

    from fastapi.middleware.cors import CORSMiddleware
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    def bad_request(field: str, message: str) -> JSONResponse:
        return JSONResponse({"error": message, "field": field}, status_code=400)

    @app.get("/v1/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(svc.holders)}

    @app.post("/v1/sessions", status_code=201)
    async def create_session(
        request: Request,
        image: Optional[UploadFile] = None,
        mask: Optional[UploadFile] = None,
        generator: Optional[str] = Form(None),
        points: str = Form(...),
        config: Optional[str] = Form(None),
        mask_mode: Optional[str] = Form(None),
        idempotency_key: Optional[str] = Form(None),
    ):
        if idempotency_key and idempotency_key in svc.idempotency:
            known = svc.holders[svc.idempotency[idempotency_key]]
            return JSONResponse(known.envelope(), status_code=200)
        if svc.saturated():
            return JSONResponse({"error": "worker pool saturated"}, status_code=503)

        size = model.config.image_size
        spec = None
        if generator:
            try:
                spec = SceneSpec.from_dict(json.loads(generator))
            except (json.JSONDecodeError, KeyError) as e:
                return bad_request("generator", f"bad scene spec: {e}")
            img = render_scene(spec)
        elif image is not None:
            data = await image.read()
            try:
                img = _png_to_tensor(data)
            except Exception as e:
                return bad_request("image", f"unreadable PNG: {e}")
            if img.shape[-2] > size or img.shape[-1] > size:
                return JSONResponse(
                    {"error": f"image exceeds {size}x{size}", "field": "image"},
                    status_code=413)
            if img.shape[-2:] != (size, size):
                return bad_request("image", f"image must be {size}x{size}")
        else:
            return bad_request("image", "provide an image file or a generator spec")

        try:
            pts = json.loads(points)
            assert isinstance(pts, list) and pts
            for entry in pts:
                assert len(entry) == 4
                for v in entry:
                    float(v)
        except Exception:
            return bad_request("points", "points must be a non-empty list of [px,py,gx,gy]")
        for i, entry in enumerate(pts):
            for j, v in enumerate(entry):
                if not (0 <= float(v) <= size - 1):
                    return bad_request(f"points[{i}][{j}]", "point outside image")

        overrides = {}
        if config:
            try:
                overrides = json.loads(config)
            except json.JSONDecodeError as e:
                return bad_request("config", f"bad config JSON: {e}")
        if spec is not None and "cond" not in overrides:
            overrides["cond"] = spec.class_id
        try:
            cfg = PipelineConfig.from_dict({**svc.base_config, **overrides})
        except ValueError as e:
            return bad_request("config", str(e))

        if mask is not None:
            try:
                arr = np.asarray(__import__("PIL.Image", fromlist=["Image"])
                                 .open(io.BytesIO(await mask.read())).convert("L"))
            except Exception as e:
                return bad_request("mask", f"unreadable mask: {e}")
            if arr.shape != (size, size):
                return bad_request("mask", f"mask must be {size}x{size}")
            m = torch.from_numpy((arr > 127).astype(np.float32))
        elif mask_mode == "all" or spec is None:
            m = torch.ones(size, size)
        else:
            from .tasks import corridor_mask
            dx = float(pts[0][2]) - float(pts[0][0])
            dy = float(pts[0][3]) - float(pts[0][1])
            m = corridor_mask(spec, (dx, dy))

        holder = svc.create(img, m, pts, cfg)
        if idempotency_key:
            svc.idempotency[idempotency_key] = holder.id
        return holder.envelope()

    def get_holder(session_id: str) -> Optional[Holder]:
        return svc.holders.get(session_id)

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        holder = get_holder(session_id)
        if holder is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        return holder.envelope()

    @app.post("/v1/sessions/{session_id}/drag", status_code=202)
    def drag(session_id: str):
        holder = get_holder(session_id)
        if holder is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        with holder.cond:
            if holder.status != "idle" or holder.drag_queued:
                return JSONResponse(
                    {"error": f"session is {holder.status}", "status": holder.status},
                    status_code=409)
            if not holder.prepared:
                return JSONResponse({"error": "session not prepared yet"},
                                    status_code=409)
            holder.drag_queued = True
        svc.start_drag(holder)
        return {"id": holder.id, "status": "queued"}

    @app.post("/v1/sessions/{session_id}/cancel", status_code=202)
    def cancel(session_id: str):
        holder = get_holder(session_id)
        if holder is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        if holder.session is not None:
            holder.session.cancel_requested = True
        if holder.status == "idle":
            holder.transition("failed", failure="cancelled")
        return {"id": holder.id, "status": holder.status}

    @app.post("/v1/sessions/{session_id}/dragback", status_code=202)
    def dragback(session_id: str):
        holder = get_holder(session_id)
        if holder is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        if holder.status != "done" or holder.edited is None:
            return JSONResponse({"error": "not done"}, status_code=409)
        if holder.child_id is not None:
            return JSONResponse({"error": "drag-back already started",
                                 "child_id": holder.child_id}, status_code=409)
        swapped = [[p[2], p[3], p[0], p[1]] for p in holder.points]
        cfg_back = PipelineConfig.from_dict(
            {**holder.cfg.to_dict(), "seed": derive_seed(holder.cfg.seed, "dragback")})
        child = svc.create(holder.edited.clone(), holder.mask.clone(), swapped,
                           cfg_back, parent_id=holder.id)
        holder.child_id = child.id
        holder.persist_envelope()

        def chain():
            with child.cond:
                child.cond.wait_for(lambda: child.prepared or child.terminal(),
                                    timeout=600)
            if child.prepared and not child.terminal():
                child.drag_queued = True
                svc.start_drag(child)

        svc.submit(chain)
        return {"id": holder.id, "child_id": child.id}

    @app.get("/v1/sessions/{session_id}/result")
    def result(session_id: str):
        holder = get_holder(session_id)
        if holder is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        if holder.status != "done" or holder.edited is None:
            return JSONResponse({"error": "not done"}, status_code=409)
        return Response(content=(holder.dir / "edited.png").read_bytes(),
                        media_type="image/png")

    @app.get("/v1/sessions/{session_id}/report")
    def report(session_id: str):
        holder = get_holder(session_id)
        if holder is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        payload = {"envelope": holder.envelope(), "records": holder.records}
        if holder.parent_id and holder.parent_id in svc.holders:
            parent = svc.holders[holder.parent_id]
            payload["parent_records"] = parent.records
            if holder.status == "done" and parent.image is not None \
                    and holder.edited is not None:
                payload["similarity"] = fidelity(parent.image, holder.edited,
                                                 svc.model, svc.sched)
        return payload

    @app.get("/v1/sessions/{session_id}/events")
    def events(session_id: str, request: Request,
               last_event_id: Optional[str] = Header(None, alias="Last-Event-ID")):
        holder = get_holder(session_id)
        if holder is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        start_from = 0
        qp = request.query_params.get("last_event_id")
        raw = qp if qp is not None else last_event_id
        if raw is not None:
            try:
                start_from = int(raw) + 1
            except ValueError:
                start_from = 0

        def stream():
            cursor = start_from
            while True:
                with holder.cond:
                    holder.cond.wait_for(
                        lambda: len(holder.records) > cursor or holder.terminal(),
                        timeout=30)
                    batch = holder.records[cursor:]
                    terminal = holder.terminal() and len(holder.records) <= cursor + len(batch)
                for rec in batch:
                    yield (f"id: {rec['ordinal']}\nevent: step\n"
                           f"data: {json.dumps(rec, sort_keys=True, separators=(',', ':'))}\n\n")
                cursor += len(batch)
                if terminal and len(holder.records) <= cursor:
                    yield ("event: end\ndata: " + json.dumps(
                        {"status": holder.status,
                         "reason": holder.failure_reason or holder.done_reason},
                        sort_keys=True) + "\n\n")
                    return

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
