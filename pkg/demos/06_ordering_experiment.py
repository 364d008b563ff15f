"""
Does pretraining beat training from scratch?
============================================

Runs the budget-matched comparison at a scale a laptop can finish:

* pretrain with multi-crop self-distillation, then fine-tune from the teacher
  (and, for comparison, from the student);
* fine-tune from a truncated-normal initialization for the same epochs;
* the same scratch model for pretrain + fine-tune epochs, so both arms spend
  the same number of passes over the data.

With ``SVT_CIFAR10_DIR`` set it uses a stratified 5,000-image CIFAR-10 subset
and the depth-4 / dim-96 model. Otherwise it falls back to the quadrant probe
dataset (a class pattern dropped into a random quadrant of a noisy field) at
16x16 with a smaller model, which finishes in about five minutes on one core.

    python demos/06_ordering_experiment.py [out_dir]
"""

import logging
import os
import sys
import time

from vitsmall.data import Splits, load_cifar10, quadrant_dataset, stratified_subset
from vitsmall.distill import DistillConfig
from vitsmall.evaluation import transfer_ordering
from vitsmall.finetune import FinetuneConfig
from vitsmall.views import ViewConfig
from vitsmall.vit import ViTConfig

logging.basicConfig(level=logging.WARNING)
out_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/ordering"

if os.environ.get("SVT_CIFAR10_DIR"):
    full = load_cifar10(os.environ["SVT_CIFAR10_DIR"])
    data = Splits(stratified_subset(full.train, 5000, 0), full.test)
    vit = ViTConfig(depth=4, dim=96, heads=4, patch_size=4)
    views = ViewConfig.cifar()
    distill = DistillConfig(epochs=30, warmup_epochs=10, batch_size=128)
    ft = FinetuneConfig(epochs=30, batch_size=128)
else:
    # 10 classes, 30 noisy training images per class: the limited-data regime
    data = quadrant_dataset(seed=0, n_train=300, n_test=400, k=10, size=16, noise=0.5)
    vit = ViTConfig(image_size=(16, 16), patch_size=4, depth=2, dim=48, heads=4)
    views = ViewConfig.for_image_size(16)
    distill = DistillConfig(epochs=30, warmup_epochs=10, batch_size=64, out_dim=256, hidden_dim=256,
                            bottleneck_dim=64)
    ft = FinetuneConfig(epochs=30, batch_size=64, pad_crop=2)

print(f"train {len(data.train)} / test {len(data.test)} images, {data.num_classes} classes")
start = time.time()
runs, summary, _ = transfer_ordering(data, vit, distill, ft, views, seeds=[0, 1, 2], out_dir=out_dir)

###############################################################################
# One row per arm: mean and range of final test top-1 over the three seeds.

for row in summary:
    print(f"{row['arm']:<26} mean {100 * row['mean_top1']:6.2f}  "
          f"range [{100 * row['min_top1']:.2f}, {100 * row['max_top1']:.2f}]")
mean = {r["arm"]: r["mean_top1"] for r in summary}
print(f"pretrained - scratch (same fine-tune epochs): {100 * (mean['self-supervised-teacher'] - mean['scratch']):+.2f}")
print(f"pretrained - scratch (same total epochs):     "
      f"{100 * (mean['self-supervised-teacher'] - mean['scratch-long']):+.2f}")
print(f"teacher - student init:                       "
      f"{100 * (mean['self-supervised-teacher'] - mean['self-supervised-student']):+.2f}")
print(f"{(time.time() - start) / 60:.1f} min; per-run CSVs under {out_dir}")
