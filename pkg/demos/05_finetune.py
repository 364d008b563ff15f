"""
Fine-tuning from the pretrained teacher
=======================================

The teacher backbone is copied into a classifier with a fresh linear head and
trained with soft-target cross-entropy under label smoothing, mixup/cutmix and
random erasing. Run ``04_pretrain.py`` first, or pass a checkpoint path.
"""

import sys
from pathlib import Path

from vitsmall.checkpoint import load_checkpoint
from vitsmall.data import synthetic_dataset
from vitsmall.finetune import FinetuneConfig, finetune
from vitsmall.vit import ViTConfig

ckpt_path = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/pretrain/pretrain_final.svtc")
data = synthetic_dataset(seed=0, n_per_class=20, k=5, size=16, noise=0.1)
vit = ViTConfig(image_size=(16, 16), patch_size=4, depth=2, dim=32, heads=4)
cfg = FinetuneConfig(epochs=15, batch_size=25, pad_crop=2)

ckpt = load_checkpoint(ckpt_path)
_, pretrained = finetune(data, vit, cfg, seed=0, ckpt=ckpt, out_dir="runs/finetune")
_, scratch = finetune(data, vit, FinetuneConfig(epochs=15, batch_size=25, pad_crop=2,
                                                init_source="truncated-normal"), seed=0)

###############################################################################
# Same data order and augmentation draws in both runs; only the starting
# weights differ.

print("epoch  from-teacher  from-scratch")
for a, b in zip(pretrained, scratch):
    print(f"{a['epoch']:>5}  {a['test_top1']:12.3f}  {b['test_top1']:12.3f}")
