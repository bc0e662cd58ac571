"""Convergence sweep on the pilot dataset (weight decay + grad clip active)."""
import sys, time, json
import numpy as np
from pathlib import Path
from sfmdepth.sparse_maps import DatasetManifest
from sfmdepth.nnet import ModelConfig, load_checkpoint, predict
from sfmdepth.config import TrainConfig
from sfmdepth.training import train, evaluate_dense
from sfmdepth.synthetic import SceneConfig, make_scene, render_frame

man = DatasetManifest.load(Path("/tmp/pilot/data"))
vcfg = SceneConfig(width=80, height=64, focal=32.0, n_frames=16, traj_start=0.75, traj_span=0.12)
vscene, vtraj = make_scene(0, vcfg)
val = [(render_frame(vscene, p)) for p in vtraj[::4]]

def dense_eval(ckpt):
    net, _, _ = load_checkpoint(ckpt)
    stats = []
    ms = []
    for img, gt in val:
        pred = predict(net, img)
        stats.append((pred.values.mean(), pred.values.std()))
        ms.append(evaluate_dense(pred, gt))
    return (float(np.mean([m.abs_rel for m in ms])), float(np.mean([m.thresh_1_25 for m in ms])),
            float(np.mean([s[0] for s in stats])))

mcfg = ModelConfig(height=64, width=80, levels=4, seed=0)
for tag, lr_min, lr_max in [("base", 1e-4, 1e-3), ("mid", 3e-4, 3e-3)]:
    tcfg = TrainConfig(epochs=16, seed=0, phase1_epochs=6, lr_min=lr_min, lr_max=lr_max)
    t0 = time.time()
    res = train(man, mcfg, tcfg, Path(f"/tmp/pilot/run2_{tag}"), quiet=False)
    dt = time.time() - t0
    for e in (2, 4, 8, 12, 16):
        ar, d1, pm = dense_eval(Path(f"/tmp/pilot/run2_{tag}") / f"epoch_{e:04d}.ckpt")
        print(f"[{tag}] epoch {e}: dense abs_rel={ar:.3f} d1.25={d1:.3f} pred_mean={pm:.2f}", flush=True)
    print(f"[{tag}] {dt:.0f}s total, {dt/16:.1f}s/epoch", flush=True)
