"""Train a probe checkpoint and measure the desk-scale quality gates:
inversion round-trip error, tracking confidence scales, and a trial drag."""

import argparse
import json
import time

import torch

from draglora.lora import train_reconstruction_lora
from draglora.model import extract_features, predict_noise
from draglora.pipeline import PipelineConfig
from draglora.schedule import build_schedule, denoise, invert_to
from draglora.tasks import make_translation_tasks, run_task
from draglora.toyworld import gen_dataset, save_checkpoint, save_curve, train_toy_model

p = argparse.ArgumentParser()
p.add_argument("--steps", type=int, default=1500)
p.add_argument("--images", type=int, default=2000)
p.add_argument("--batch", type=int, default=16)
p.add_argument("--lr", type=float, default=2e-4)
p.add_argument("--seed", type=int, default=77)
p.add_argument("--out", default="/tmp/probe.dlc")
p.add_argument("--skip-train", action="store_true")
p.add_argument("--tasks", type=int, default=3)
p.add_argument("--drag-overrides", default="{}")
args = p.parse_args()

sched = build_schedule(1000, 1e-4, 0.02, 50)

if not args.skip_train:
    data = gen_dataset(seed=7, n=args.images)
    t0 = time.perf_counter()
    res = train_toy_model(data, sched, steps=args.steps, lr=args.lr, seed=args.seed,
                          batch_size=args.batch)
    print(f"trained {args.steps} steps in {(time.perf_counter()-t0)/60:.1f} min; "
          f"curve tail: {res.curve[-3:]}", flush=True)
    save_checkpoint(res.model, res.meta, args.out)
    save_curve(res.curve, args.out + ".curve.json")

from draglora.toyworld import load_checkpoint
model, meta, _ = load_checkpoint(args.out)
model.eval()

# --- inversion round trip on held-out scenes ---
held = gen_dataset(seed=4242, n=10)
rels = []
for img, cid, spec in held:
    with torch.no_grad():
        traj = invert_to(img, lambda z, t: predict_noise(model, None, z, t, cid), sched, 35)
        back = denoise(traj[35].data, lambda z, t: predict_noise(model, None, z, t, cid),
                       sched, 35, 0)
    rels.append(float((back - img).norm() / img.norm()))
print("round-trip rel L2: ", [round(r, 4) for r in rels], flush=True)
print("max:", max(rels))

# --- reconstruction LoRA quality on one image ---
img, cid, spec = held[0]
from draglora.lora import denoising_loss, init_adapter
gen = torch.Generator().manual_seed(1)
probes = [(int(torch.randint(0, 1000, (1,), generator=gen)),
           torch.randn(3, 32, 32, generator=gen)) for _ in range(16)]
before = denoising_loss(model, init_adapter(model, 16, 0), img, sched, probes, cond=cid)
rec = train_reconstruction_lora(model, img, sched, steps=80, lr=5e-4, seed=0, cond=cid)
after = denoising_loss(model, rec, img, sched, probes, cond=cid)
print(f"recon lora probe loss: before {before:.4f} after {after:.4f} "
      f"drop {(1 - after / before) * 100:.1f}%", flush=True)

# --- minD scale on the untouched latent and after one ilfa ---
from draglora.tasks import corridor_mask
from draglora.ilfa import IlfaConfig, ilfa_step
from draglora.model import sample_feature
t35 = sched.t_of_index(35)
with torch.no_grad():
    traj = invert_to(img, lambda z, t: predict_noise(model, rec, z, t, cid), sched, 35)
    z35 = traj[35].data
    f0 = extract_features(model, rec, z35, t35, cid)
    center = spec.center
    ref = sample_feature(f0, center, 1)
    mask = corridor_mask(spec, (6.0, 0.0))
    rng = torch.Generator().manual_seed(0)
    z_ilfa = ilfa_step(z35, model, rec, mask, sched, IlfaConfig(), rng, cid)
    f1 = extract_features(model, rec, z_ilfa, t35, cid)
    d_same = float((sample_feature(f1, center, 1) - ref).abs().mean())
    d_1px = float((sample_feature(f0, (center[0]+1, center[1]), 1) - ref).abs().mean())
    d_3px = float((sample_feature(f0, (center[0]+3, center[1]), 1) - ref).abs().mean())
    feat_std = float(f0.data.std())
print(f"feature std {feat_std:.3f}; minD after 1 ilfa at h0: {d_same:.3f}; "
      f"1px offset {d_1px:.3f}; 3px offset {d_3px:.3f}", flush=True)

# --- trial drags ---
overrides = json.loads(args.drag_overrides)
tasks = make_translation_tasks(n=args.tasks, base_seed=1000, shift=(6.0, 0.0),
                               config_overrides=overrides)
base = PipelineConfig()
for task in tasks:
    t0 = time.perf_counter()
    run = run_task(task, model, sched, base)
    r = run.result
    print(f"{task.task_id}: dT {r.initial_dt:.2f} -> {r.final_dt:.2f}; "
          f"doo {r.doo_steps} ilfa {r.ilfa_steps}; md {r.md:.2f} m_md {r.m_md:.2f}; "
          f"{time.perf_counter()-t0:.1f}s", flush=True)
    min_ds = [pt.min_d for rec2 in run.session.records for pt in rec2.points
              if pt.min_d is not None]
    if min_ds:
        import statistics
        print(f"   minD: min {min(min_ds):.3f} median {statistics.median(min_ds):.3f} "
              f"max {max(min_ds):.3f}; done: {run.session.done_reason}", flush=True)
