"""
Self-supervised pretraining on a small synthetic set
====================================================

The student sees all ten views, the teacher only the two global ones, and the
student learns to predict the teacher's sharpened, centred output. The teacher
follows the student as an exponential moving average. Labels are never used.

Watch the teacher entropy. At initialization every image maps to nearly the
same feature, so after centring the teacher output is close to uniform, and
the temperature warmup (0.04 up to 0.07) pushes the entropy up further in the
first epochs. It only falls once the features spread apart, which takes more
epochs than this short run. An entropy near zero would mean a collapsed teacher
that outputs one class for every image.
"""

import sys
from pathlib import Path

from vitsmall.data import synthetic_dataset
from vitsmall.distill import DistillConfig, pretrain
from vitsmall.metrics import read_metrics
from vitsmall.views import ViewConfig
from vitsmall.vit import ViTConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/pretrain")
data = synthetic_dataset(seed=0, n_per_class=20, k=5, size=16, noise=0.1)
vit = ViTConfig(image_size=(16, 16), patch_size=4, depth=2, dim=32, heads=4)
cfg = DistillConfig(epochs=8, warmup_epochs=2, batch_size=25, out_dim=128, hidden_dim=128, bottleneck_dim=32)
ckpt = pretrain(data, vit, cfg, ViewConfig.for_image_size(16), seed=0, out_dir=out)

for row in read_metrics(out / "pretrain_metrics.csv"):
    print(f"epoch {row['epoch']:>2}  loss {float(row['loss']):.4f}  teacher entropy "
          f"{float(row['teacher_entropy']):.3f}  momentum {float(row['momentum']):.5f}  "
          f"teacher temp {float(row['teacher_temp']):.4f}")

###############################################################################
# The checkpoint holds both networks, both heads and the centre.

groups = sorted({name.split(".")[0] for name in ckpt.tensors})
print("checkpoint groups:", groups, "->", out / "pretrain_final.svtc")
