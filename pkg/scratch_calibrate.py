"""Scratch calibration for the rotation-contrast experiment (not shipped)."""

import sys
import time

import numpy as np

from icocnn.experiments import TrainConfig, evaluate, stratified_split, summarize, train, transfer_experiment
from icocnn.icosphere import build_hierarchy
from icocnn.model import build_gcnn, build_pcnn, default_freeze_count
from icocnn.sampler import RectangularPatch
from icocnn.surfdata import (
    Rotation,
    demean,
    project_dataset,
    rotate_map,
    stack_dataset,
    synthesize_dataset,
)

SEED = 2024
LEVEL = 4
N_SAMPLES = 600
GCNN_FILTERS = int(sys.argv[1]) if len(sys.argv) > 1 else 16
PCNN_FILTERS = int(sys.argv[2]) if len(sys.argv) > 2 else 48

t0 = time.perf_counter()


def tick(msg):
    print(f"[{time.perf_counter() - t0:7.1f}s] {msg}", flush=True)


hierarchy = build_hierarchy(LEVEL)
level = hierarchy.level(LEVEL)
maps = synthesize_dataset(level, N_SAMPLES, seed=SEED)
tick(f"synthesized {N_SAMPLES} samples at level {LEVEL}")

demeaned = [demean(m) for m in maps]
x_mesh, y = stack_dataset(demeaned)
plan = stratified_split(y, k=10, test_fraction=0.1, seed=SEED)
fold0 = plan.folds[0]
tick(f"plan: test {plan.test_idx.size}, fold0 train {fold0.train_idx.size} val {fold0.val_idx.size}")

base_cfg = TrainConfig(batch_size=50, max_epochs=12, extended_epochs=16,
                       saturation_window=3, seed=SEED)
head_cfg = TrainConfig(batch_size=50, max_epochs=15, extended_epochs=20,
                       saturation_window=3, seed=SEED)

# ---- gCNN base ----
gcnn = build_gcnn(hierarchy, patch=RectangularPatch(5, 5), filters_per_conv=GCNN_FILTERS,
                  hidden=50, seed=SEED, start_level=LEVEL, end_level=1)
rec = train(gcnn, x_mesh[fold0.train_idx], y[fold0.train_idx],
            x_mesh[fold0.val_idx], y[fold0.val_idx], base_cfg)
err, _ = evaluate(gcnn, x_mesh[plan.test_idx], y[plan.test_idx])
gcnn_base = 1.0 - err
tick(f"gCNN base test acc {gcnn_base:.4f} (epochs {len(rec.val_errors)}, best {rec.chosen_epoch}, "
     f"train_err {rec.train_errors[-1]:.3f}, wall {rec.wall_clock_sec:.0f}s)")

# ---- pCNN base ----
images, _ = project_dataset(level, demeaned, 102, 102, 5)
tick(f"projected images {images.shape}")
pcnn = build_pcnn(width=112, height=112, channels=2, seed=SEED, filters=PCNN_FILTERS)
rec_p = train(pcnn, images[fold0.train_idx], y[fold0.train_idx],
              images[fold0.val_idx], y[fold0.val_idx], base_cfg)
err, _ = evaluate(pcnn, images[plan.test_idx], y[plan.test_idx])
pcnn_base = 1.0 - err
tick(f"pCNN base test acc {pcnn_base:.4f} (epochs {len(rec_p.val_errors)}, best {rec_p.chosen_epoch}, "
     f"train_err {rec_p.train_errors[-1]:.3f}, wall {rec_p.wall_clock_sec:.0f}s)")

# ---- rotate 90 about z, transfer ----
rot = Rotation.from_axis_angle("z", 90)
rotated = [rotate_map(level, m, rot) for m in maps]
rot_demeaned = [demean(m) for m in rotated]
xr_mesh, yr = stack_dataset(rot_demeaned)
plan_rot = stratified_split(yr, k=10, test_fraction=0.1, seed=SEED)

recs = transfer_experiment(gcnn, xr_mesh, yr, default_freeze_count(gcnn), plan_rot, head_cfg)
g_rot = summarize(recs)
tick(f"gCNN transfer rot90z: {g_rot['mean_accuracy']:.4f} +- {g_rot['std_accuracy']:.4f} "
     f"(drop {gcnn_base - g_rot['mean_accuracy']:+.4f})")

images_rot, _ = project_dataset(level, rot_demeaned, 102, 102, 5)
recs_p = transfer_experiment(pcnn, images_rot, yr, default_freeze_count(pcnn), plan_rot, head_cfg)
p_rot = summarize(recs_p)
tick(f"pCNN transfer rot90z: {p_rot['mean_accuracy']:.4f} +- {p_rot['std_accuracy']:.4f} "
     f"(drop {pcnn_base - p_rot['mean_accuracy']:+.4f})")

print()
print(f"SUMMARY  gcnn base {gcnn_base:.3f} -> rot {g_rot['mean_accuracy']:.3f} "
      f"(drop {(gcnn_base - g_rot['mean_accuracy']) * 100:.1f} pts)")
print(f"SUMMARY  pcnn base {pcnn_base:.3f} -> rot {p_rot['mean_accuracy']:.3f} "
      f"(drop {(pcnn_base - p_rot['mean_accuracy']) * 100:.1f} pts)")
tick("done")
