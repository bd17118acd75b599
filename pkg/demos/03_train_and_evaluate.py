"""End-to-end run with the default budgets (about two minutes on one core):
pretrain, meta-train LCCA, then compare the inference variants with the
classifier-only baseline on the same held-out episodes.

With much smaller meta-training budgets LCCA is undertrained and can trail
the baseline.
"""
import numpy as np

from lccan.harness import InferenceMode, run_eval
from lccan.lcca import AlignConfig
from lccan.synthia import generate_dataset
from lccan.training import TrainConfig, meta_train, pretrain

manifest = generate_dataset(seed=0)
cfg = TrainConfig()

net, _, epoch_losses = pretrain(manifest, fold=0, cfg=cfg)
print("pretrain loss per epoch", np.round(epoch_losses, 3))

model, dice = meta_train(manifest, 0, net, cfg, AlignConfig())
print(f"meta dice loss: first 50 {np.mean(dice[:50]):.3f}, last 50 {np.mean(dice[-50:]):.3f}")

for variant in ("Baseline", "LCCAN_org", "LCCAN_aug", "LCCAN_both"):
    rep = run_eval(manifest, 0, net, model, InferenceMode(variant), n_episodes=100, seed=1)
    print(f"{variant:>11}: mIoU {rep.miou:.3f}", {manifest.classes[c]: round(v, 3) for c, v in rep.per_class_iou.items()})
