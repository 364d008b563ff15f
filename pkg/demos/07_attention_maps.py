"""
Where does the CLS token look?
==============================

A small ViT is trained to classify quadrant probes: the class pattern sits
in one random quadrant of a noisy gray field. Afterwards the last block's
CLS attention, averaged over heads, concentrates on that quadrant. Chance
is 0.25.
"""

import sys
from pathlib import Path

import numpy as np

from vitsmall.data import normalize, quadrant_dataset, quadrant_probes
from vitsmall.evaluation import attention_maps, quadrant_mass, save_attention
from vitsmall.finetune import FinetuneConfig, finetune
from vitsmall.vit import ViTConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/attention")
data = quadrant_dataset(seed=0, n_train=160, n_test=40, k=4, size=16, noise=0.05)
vit = ViTConfig(image_size=(16, 16), patch_size=4, depth=2, dim=32, heads=4)
cfg = FinetuneConfig.plain(epochs=15, batch_size=16, lr=2e-3, weight_decay=0.0,
                           init_source="truncated-normal", eval_every=0)
model, hist = finetune(data, vit, cfg, seed=0)
print("test top-1:", hist[-1]["test_top1"])

x, _, quads = quadrant_probes(99, 64, 4, 16, 0.05)
xn = normalize(x.astype(np.float64), data.mean, data.std).astype(np.float32)
maps = attention_maps(model.backbone, xn)
mass = np.array([quadrant_mass(m, q) for m, q in zip(maps, quads)])
print(f"attention mass in the object quadrant: mean {mass.mean():.3f}, min {mass.min():.3f}")

for i in range(4):
    save_attention(out, f"probe{i}_quadrant{quads[i]}", maps[i])
print("rasters and per-head dumps in", out)
