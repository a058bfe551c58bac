"""Command-line entry points: toy training, adapter training, drag editing,
drag-back, batch evaluation, and the HTTP service.

Config resolution order: flags > config file > defaults. Every run directory
receives the resolved config plus the checkpoint hash, so outputs reproduce
bit-exactly from the directory contents alone.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .lora import save_adapter, train_reconstruction_lora
from .metrics import curves, curves_csv
from .pipeline import PipelineConfig, drag_back, finalize, run_drag, start_session
from .tasks import DragTask, corridor_mask, evaluate_tasks, make_translation_tasks
from .toyworld import (SceneSpec, gen_dataset, load_checkpoint, render_scene,
                       save_checkpoint, save_curve, schedule_from_meta,
                       train_toy_model)


class ValidationError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we map usage to 1
        raise ValidationError(message)


# ---- IO helpers ----

def load_image_png(path: str) -> torch.Tensor:
    from PIL import Image
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def save_image_png(tensor: torch.Tensor, path: str | Path) -> None:
    from PIL import Image
    arr = ((tensor.clamp(-1, 1) + 1.0) * 127.5).round().byte()
    Image.fromarray(arr.permute(1, 2, 0).numpy(), "RGB").save(path)


def load_mask(spec: str, size: int) -> torch.Tensor:
    if spec == "all":
        return torch.ones(size, size)
    from PIL import Image
    arr = np.asarray(Image.open(spec).convert("L"))
    if arr.shape != (size, size):
        raise ValidationError(f"mask {spec} is {arr.shape}, expected {(size, size)}")
    return torch.from_numpy((arr > 127).astype(np.float32))


def parse_points(text: str) -> list[list[float]]:
    points = []
    for chunk in text.split(";"):
        parts = chunk.split(",")
        if len(parts) != 4:
            raise ValidationError(f"point {chunk!r} is not 'px,py,gx,gy'")
        points.append([float(v) for v in parts])
    if not points:
        raise ValidationError("no points given")
    return points


def resolve_config(args) -> PipelineConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    flag_over = {}
    for key in ("seed", "cond"):
        val = getattr(args, key, None)
        if val is not None:
            flag_over[key] = val
    if getattr(args, "ept", None):
        flag_over["ept"] = args.ept
    if getattr(args, "ilfa", None):
        flag_over["ilfa_variant"] = args.ilfa
    merged = {**base, **flag_over}
    try:
        return PipelineConfig.from_dict(merged)
    except ValueError as e:
        raise ValidationError(str(e)) from e


def _load_input_image(args, image_size: int) -> tuple[torch.Tensor, SceneSpec | None]:
    if getattr(args, "scene", None):
        spec = SceneSpec.from_dict(json.loads(Path(args.scene).read_text()))
        return render_scene(spec), spec
    if getattr(args, "image", None):
        img = load_image_png(args.image)
        if img.shape[-1] != image_size or img.shape[-2] != image_size:
            raise ValidationError(
                f"image is {tuple(img.shape[-2:])}, model wants {image_size}x{image_size}")
        return img, None
    raise ValidationError("provide --image or --scene")


def _write_run_outputs(out: Path, cfg: PipelineConfig, ckpt_hash: str, session,
                       edited: torch.Tensor) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "checkpoint_hash": ckpt_hash}, indent=1))
    with open(out / "records.jsonl", "w") as f:
        for rec in session.records:
            f.write(rec.to_json() + "\n")
    if session.records:
        series = curves(session.records)
        (out / "curves.csv").write_text(curves_csv(series))
        (out / "curves.json").write_text(json.dumps(series, indent=1))
    save_image_png(edited, out / "edited.png")


# ---- subcommands ----

def cmd_train_toy(args) -> int:
    sched_cfg = (1000, 1e-4, 0.02, 50)
    from .schedule import build_schedule
    sched = build_schedule(*sched_cfg)
    data = gen_dataset(seed=args.data_seed, n=args.images)
    result = train_toy_model(data, sched, steps=args.steps, lr=args.lr,
                             seed=args.seed, batch_size=args.batch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, result.meta, out)
    save_curve(result.curve, str(out) + ".curve.json")
    print(f"wrote {out} ({result.model.param_count()} params)")
    return 0


def cmd_recon_lora(args) -> int:
    model, meta, ckpt_hash = load_checkpoint(args.ckpt)
    sched = schedule_from_meta(meta)
    image, spec = _load_input_image(args, model.config.image_size)
    cond = args.cond if args.cond is not None else (spec.class_id if spec else None)
    adapter = train_reconstruction_lora(model, image, sched, steps=args.steps,
                                        lr=args.lr, seed=args.seed,
                                        rank=args.rank, cond=cond)
    save_adapter(adapter, args.out, base_model_hash=ckpt_hash)
    print(f"wrote {args.out}")
    return 0


def cmd_drag(args) -> int:
    model, meta, ckpt_hash = load_checkpoint(args.ckpt)
    sched = schedule_from_meta(meta)
    image, spec = _load_input_image(args, model.config.image_size)
    cfg = resolve_config(args)
    if cfg.cond is None and spec is not None:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), "cond": spec.class_id})
    points = parse_points(args.points)
    if args.mask == "auto" and spec is not None:
        dx = points[0][2] - points[0][0]
        dy = points[0][3] - points[0][1]
        mask = corridor_mask(spec, (dx, dy))
    else:
        mask = load_mask(args.mask, model.config.image_size)
    session = start_session(image, mask, points, model, sched, cfg)
    run_drag(session, model, sched, cfg)
    if session.status == "failed":
        print(f"drag failed: {session.failure_reason}", file=sys.stderr)
        return 2
    edited = finalize(session, model, sched, cfg)
    _write_run_outputs(Path(args.out), cfg, ckpt_hash, session, edited)
    final_dt = sum(
        ((p.h[0] - p.g[0]) ** 2 + (p.h[1] - p.g[1]) ** 2) ** 0.5
        for p in session.pairs) / len(session.pairs)
    print(f"done: {session.done_reason}; records {len(session.records)}; "
          f"final mean dT {final_dt:.2f}; outputs in {args.out}")
    return 0


def cmd_dragback(args) -> int:
    model, meta, ckpt_hash = load_checkpoint(args.ckpt)
    sched = schedule_from_meta(meta)
    image, spec = _load_input_image(args, model.config.image_size)
    cfg = resolve_config(args)
    if cfg.cond is None and spec is not None:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), "cond": spec.class_id})
    points = parse_points(args.points)
    if args.mask == "auto" and spec is not None:
        dx = points[0][2] - points[0][0]
        dy = points[0][3] - points[0][1]
        mask = corridor_mask(spec, (dx, dy))
    else:
        mask = load_mask(args.mask, model.config.image_size)
    result = drag_back(image, mask, points, model, sched, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "checkpoint_hash": ckpt_hash}, indent=1))
    save_image_png(result.edited_first, out / "edited_first.png")
    save_image_png(result.edited_second, out / "edited_second.png")
    for name, session in (("first", result.first), ("second", result.second)):
        with open(out / f"records_{name}.jsonl", "w") as f:
            for rec in session.records:
                f.write(rec.to_json() + "\n")
    (out / "report.json").write_text(json.dumps({
        "similarity": result.similarity,
        "first_records": len(result.first.records),
        "second_records": len(result.second.records),
    }, indent=1))
    print(f"drag-back similarity {result.similarity:.4f}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    model, meta, ckpt_hash = load_checkpoint(args.ckpt)
    sched = schedule_from_meta(meta)
    cfg = resolve_config(args)
    if args.tasks == "builtin":
        tasks = make_translation_tasks(n=args.n_tasks)
    else:
        entries = json.loads(Path(args.tasks).read_text())
        tasks = [DragTask.from_dict(e) for e in entries]
    report, runs = evaluate_tasks(tasks, model, sched, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "checkpoint_hash": ckpt_hash}, indent=1))
    (out / "report.json").write_text(report.to_json())
    for run in runs:
        if run.session.records:
            (out / f"curves_{run.task.task_id}.csv").write_text(
                curves_csv(curves(run.session.records)))
    print(f"evaluated {len(tasks)} tasks; report in {out / 'report.json'}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    app = create_app(ckpt_path=args.ckpt, data_dir=args.data_dir,
                     workers=args.workers)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> Parser:
    p = Parser(prog="draglora", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train-toy", help="train the toy diffusion checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=12000)
    t.add_argument("--images", type=int, default=2000)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data-seed", type=int, default=7)
    t.set_defaults(fn=cmd_train_toy)

    r = sub.add_parser("recon-lora", help="train a reconstruction adapter for one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image")
    r.add_argument("--scene")
    r.add_argument("--out", required=True)
    r.add_argument("--steps", type=int, default=80)
    r.add_argument("--lr", type=float, default=5e-4)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--rank", type=int, default=16)
    r.add_argument("--cond", type=int)
    r.set_defaults(fn=cmd_recon_lora)

    for name, fn in (("drag", cmd_drag), ("dragback", cmd_dragback)):
        d = sub.add_parser(name, help=f"run {name} on one image")
        d.add_argument("--ckpt", required=True)
        d.add_argument("--image")
        d.add_argument("--scene")
        d.add_argument("--mask", default="auto",
                       help="PNG path, 'all', or 'auto' (scene corridor)")
        d.add_argument("--points", required=True, help="px,py,gx,gy[;...]")
        d.add_argument("--out", required=True)
        d.add_argument("--config")
        d.add_argument("--ept", choices=["neighborhood", "distance", "angle", "linear"])
        d.add_argument("--ilfa", choices=["sds", "dds"])
        d.add_argument("--seed", type=int)
        d.add_argument("--cond", type=int)
        d.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="evaluate a task suite")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--tasks", default="builtin", help="tasks JSON file or 'builtin'")
    e.add_argument("--n-tasks", type=int, default=10)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--cond", type=int)
    e.set_defaults(fn=cmd_eval)

    import os
    s = sub.add_parser("serve", help="run the HTTP session service")
    s.add_argument("--ckpt", default=os.environ.get("DRAGLORA_CKPT"),
                   required="DRAGLORA_CKPT" not in os.environ)
    s.add_argument("--data-dir",
                   default=os.environ.get("DRAGLORA_DATA_DIR", "./draglora-data"))
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int,
                   default=int(os.environ.get("DRAGLORA_PORT", "8008")))
    s.add_argument("--workers", type=int, default=2)
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
