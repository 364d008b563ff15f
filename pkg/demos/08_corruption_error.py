"""
Mean corruption error from external test sets
=============================================

Corrupted copies of a test set are stored in the raw tensor format
(``save_raw``) and scored one by one; the mCE is the plain mean of the
per-set error percentages. Here the "corruptions" are additive noise at
increasing strength, so the errors should rise.
"""

import sys
from pathlib import Path

import numpy as np

from vitsmall.data import ImageDataset, load_raw, normalize, save_raw, synthetic_dataset
from vitsmall.evaluation import corruption_errors, mce
from vitsmall.finetune import FinetuneConfig, finetune
from vitsmall.vit import ViTConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/corrupt")
out.mkdir(parents=True, exist_ok=True)
data = synthetic_dataset(seed=0, n_per_class=20, k=5, size=16, noise=0.05)
vit = ViTConfig(image_size=(16, 16), patch_size=4, depth=2, dim=32, heads=4)
model, _ = finetune(data, vit, FinetuneConfig.plain(epochs=15, batch_size=20, init_source="truncated-normal"),
                    seed=0)

rng = np.random.default_rng(0)
sets = []
for sigma in (0.1, 0.3, 0.6, 1.0):
    noisy = np.clip(data.test.images + rng.normal(0, sigma, data.test.images.shape), 0, 1).astype(np.float32)
    path = out / f"noise{sigma}.svtr"
    save_raw(path, ImageDataset(noisy, data.test.labels, data.num_classes, f"noise{sigma}"))
    ds = load_raw(path)
    sets.append((ds.name, normalize(ds.images.astype(np.float64), data.mean, data.std).astype(np.float32),
                 ds.labels))

errors = corruption_errors(model, sets)
for name, err in errors.items():
    print(f"{name:<10} error {err:6.2f}%")
print(f"mCE {mce(errors.values()):.2f}")
