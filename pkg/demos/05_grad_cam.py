"""Gradient-weighted attention maps on a hand-built transformer.

The model below is wired so the abnormal logit is exactly the mean
brightness each patch contributes through the value path. Planting a
bright patch therefore has a known answer, which makes the heatmap easy
to trust before pointing it at trained weights.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from vitbench.gradcam import (
    cam_sidecar,
    focus_score,
    grad_cam_map,
    rect_mask,
    render_overlay,
    upsample,
)
from vitbench.vit import VitConfig, init_params

cfg = VitConfig(image_size=32, patch_size=8, embed_dim=16, depth=1,
                num_heads=2, mlp_ratio=2.0)

params = init_params(cfg, seed=0)
for _, t in params.named_tensors():
    t.data[:] = 0.0
params.patch_weight.data[0, :] = 1.0  # channel 0 of each patch -> feature 0
blk = params.blocks[0]
blk.ln1_gamma.data[:] = 1.0
blk.wv.data[:] = np.eye(cfg.embed_dim)  # identity value path
blk.wo.data[:] = np.eye(cfg.embed_dim)
blk.ln2_gamma.data[:] = 1.0
params.final_gamma.data[:] = 1.0
params.head_weight.data[1, 0] = 1.0  # abnormal logit reads feature 0


def bright_patch_image(patch_index, size=32, patch=8):
    g = size // patch
    img = np.full((3, size, size), 0.2)
    r, c = divmod(patch_index, g)
    img[:, r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = 1.0
    return img


out_dir = Path(tempfile.mkdtemp(prefix="vitbench_cam_"))
records = []
for patch in (0, 5, 15):
    img = bright_patch_image(patch)
    heat = grad_cam_map(params, cfg, img, target_class=1)
    located = int(np.argmax(heat.grid))
    print(f"planted patch {patch:2d} -> heatmap argmax {located:2d}  "
          f"peak {float(heat.grid.max()):.2f}")

    full = upsample(heat.grid, cfg.image_size)
    render_overlay(img, full, alpha=0.5, path=out_dir / f"patch{patch}.png")

    # how much heat lands in each image half
    top = rect_mask("top", (0, 0, 16, 32), 32)
    bottom = rect_mask("bottom", (16, 0, 32, 32), 32)
    print(f"  focus: top {focus_score(full, top):.3f}  "
          f"bottom {focus_score(full, bottom):.3f}")

    records.append(cam_sidecar(f"patch{patch}.png", 1, heat, None))

(out_dir / "cams.json").write_text(json.dumps({"records": records}, indent=2))
print(f"\noverlays and sidecar written to {out_dir}")
