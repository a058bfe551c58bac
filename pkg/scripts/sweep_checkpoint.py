"""Sweep training length and measure every desk-scale gate per snapshot:
inversion round trip, reconstruction-adapter headroom, adaptation-cycle content
retention, and a trial drag."""

import argparse
import copy
import math
import time

import torch

from draglora.ilfa import IlfaConfig, ilfa_step
from draglora.lora import denoising_loss, init_adapter, train_reconstruction_lora
from draglora.model import ToyUNet, predict_noise
from draglora.pipeline import PipelineConfig
from draglora.schedule import build_schedule, denoise, invert_to
from draglora.tasks import make_translation_tasks, run_task
from draglora.toyworld import (architecture_descriptor, dataset_hash, gen_dataset,
                               save_checkpoint)

p = argparse.ArgumentParser()
p.add_argument("--snapshots", default="2000,3000,4500,6000")
p.add_argument("--images", type=int, default=2000)
p.add_argument("--batch", type=int, default=16)
p.add_argument("--lr", type=float, default=2e-4)
p.add_argument("--ema", type=float, default=0.999)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out-prefix", default="/tmp/sweep")
args = p.parse_args()

snapshots = sorted(int(s) for s in args.snapshots.split(","))
sched = build_schedule(1000, 1e-4, 0.02, 50)
data = gen_dataset(seed=7, n=args.images)

torch.manual_seed(args.seed)
model = ToyUNet()
images = torch.stack([img for img, _, _ in data])
classes = torch.tensor([c for _, c, _ in data], dtype=torch.long)
gen = torch.Generator().manual_seed(args.seed)
opt = torch.optim.Adam(model.parameters(), lr=args.lr)
sab = torch.sqrt(sched.alpha_bars.float())
s1ab = torch.sqrt(1.0 - sched.alpha_bars.float())
ema_w = {k: v.detach().clone() for k, v in model.state_dict().items()}

held = gen_dataset(seed=4242, n=10)


def evaluate(tag, net):
    net.eval()
    rels = []
    for img, cid, _ in held:
        with torch.no_grad():
            traj = invert_to(img, lambda z, t: predict_noise(net, None, z, t, cid), sched, 35)
            back = denoise(traj[35].data,
                           lambda z, t: predict_noise(net, None, z, t, cid), sched, 35, 0)
        rels.append(float((back - img).norm() / img.norm()))
    img, cid, spec = held[0]
    g2 = torch.Generator().manual_seed(1)
    probes = [(int(torch.randint(0, 1000, (1,), generator=g2)),
               torch.randn(3, 32, 32, generator=g2)) for _ in range(24)]
    mid = [(t, e) for t, e in probes if 150 <= t <= 600]
    before = denoising_loss(net, init_adapter(net, 16, 0), img, sched, probes, cond=cid)
    rec = train_reconstruction_lora(net, img, sched, steps=80, lr=5e-4, seed=0, cond=cid)
    after = denoising_loss(net, rec, img, sched, probes, cond=cid)
    before_mid = denoising_loss(net, init_adapter(net, 16, 0), img, sched, mid, cond=cid)
    after_mid = denoising_loss(net, rec, img, sched, mid, cond=cid)

    # adaptation-cycle content retention with the rec adapter
    from draglora.tasks import corridor_mask
    mask = corridor_mask(spec, (5.0, 0.0))
    with torch.no_grad():
        traj = invert_to(img, lambda z, t: predict_noise(net, rec, z, t, cid), sched, 35)
    zz = traj[35].data.clone()
    rng = torch.Generator().manual_seed(5)
    for _ in range(12):
        zz = ilfa_step(zz, net, rec, mask, sched, IlfaConfig(), rng, cid)
    with torch.no_grad():
        out = denoise(zz, lambda z, t: predict_noise(net, rec, z, t, cid), sched, 35, 0)
    inside = mask.expand_as(img) > 0.5
    churn = float((out[inside] - img[inside]).abs().mean())

    task = make_translation_tasks(n=1, base_seed=1000, shift=(6.0, 0.0))[0]
    run = run_task(task, net, sched, PipelineConfig())
    r = run.result
    print(f"[{tag}] roundtrip max {max(rels):.4f} (med {sorted(rels)[5]:.4f}) | "
          f"recon drop {100*(1-after/before):.1f}% (mid-t {100*(1-after_mid/before_mid):.1f}%) | "
          f"churn12 {churn:.3f} | drag dT {r.initial_dt:.1f}->{r.final_dt:.2f} "
          f"ilfa {r.ilfa_steps}", flush=True)
    return max(rels)


done = 0
for target in snapshots:
    while done < target:
        step = done
        frac = step / max(snapshots[-1] - 1, 1)
        scale = 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = args.lr * scale
        idx = torch.randint(0, len(data), (args.batch,), generator=gen)
        x0, cond = images[idx], classes[idx]
        t = torch.randint(0, sched.T_train, (args.batch,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        zt = sab[t][:, None, None, None] * x0 + s1ab[t][:, None, None, None] * eps
        loss = ((model(zt, t, cond) - eps) ** 2).mean()
        opt.zero_grad(); loss.backward(); opt.step()
        with torch.no_grad():
            for k, v in model.state_dict().items():
                ema_w[k].mul_(args.ema).add_(v, alpha=1 - args.ema)
        done += 1
    snap = ToyUNet()
    snap.load_state_dict({k: v.clone() for k, v in ema_w.items()})
    evaluate(f"step {done}", snap)
    meta = {"architecture": architecture_descriptor(snap.config),
            "schedule": sched.params(), "train_seed": args.seed,
            "dataset_hash": dataset_hash(data), "train_steps": done, "lr": args.lr,
            "weight_ema": args.ema, "lr_final_frac": 0.1}
    save_checkpoint(snap, meta, f"{args.out_prefix}_{done}.dlc")
print("sweep complete", flush=True)
