"""
The ViT encoder and variable-size views
=======================================

One set of weights serves 32x32 global views and 16x16 local views: the
stored position-embedding grid is interpolated to whatever patch grid the
input has.
"""

import numpy as np

from vitsmall.rng import stream
from vitsmall.vit import ViT, ViTConfig, init_weights, interpolate_pos_embed

cfg = ViTConfig(depth=4, dim=96, heads=4, patch_size=4)
vit = ViT(cfg, params=init_weights(cfg, "truncated-normal", stream(0, "init")))
print("parameters:", sum(p.data.size for p in vit.params.values()))

rng = np.random.default_rng(0)
for size in (32, 16):
    out = vit.forward(rng.standard_normal((2, size, size, 3)).astype(np.float32), want_attention=True)
    att = out.attention[-1]
    print(f"{size}x{size}: cls {out.cls.shape}, patch tokens {out.patches.shape[1]}, "
          f"attention rows sum to 1: {np.allclose(att.sum(-1), 1, atol=1e-5)}")

###############################################################################
# Interpolating the 8x8 grid down to 4x4 and back is smooth, not exact.

grid = vit.params["pos_embed"].data[1:].reshape(8, 8, -1)
small = interpolate_pos_embed(grid, (4, 4))
back = interpolate_pos_embed(small, (8, 8))
print("identity resize exact:", np.array_equal(interpolate_pos_embed(grid, (8, 8)), grid))
print("down-up round trip rms change:", float(np.sqrt(((back - grid) ** 2).mean())))
