# %% [markdown]
# # Network and metrics
# One shared encoder, a fused 16x16 feature map, and two heads: pixel-shuffle
# super-resolution and a stacked heatmap regressor.

# %%
import math

import numpy as np
import torch

from jasrnet import trainer
from jasrnet.metrics import nme, psnr_y, ssim_y
from jasrnet.model import ModelConfig, build, count_parameters

torch.manual_seed(0)

# %% [markdown]
# ## Shapes through the full-width network
# H0..H3 halve the resolution; fusion folds H0..H2 into H3 with stride-2 convs.

# %%
model = build(ModelConfig(extraction_blocks=2), seed=0)
x = torch.rand(1, 3, 128, 128)
with torch.no_grad():
    pyr = model.encode(x)
    out = model(x)
for name, h in zip("H0 H1 H2 H3".split(), pyr):
    print(name, tuple(h.shape))
print("SR", tuple(out.sr_image.shape), "| stages", [tuple(s.shape) for s in out.stage_heatmaps])

# %% [markdown]
# ## Parameter counts
# The closed form equals the built model. At full width it lands about 12%
# under the published totals; see the decisions ledger for the breakdown.

# %%
for label, cfg, paper in [("FULL", ModelConfig(), 18.96), ("T=16", ModelConfig(extraction_blocks=16), 14.46),
                          ("S=1", ModelConfig(alignment_stages=1), 16.69),
                          ("S=2", ModelConfig(alignment_stages=2), 17.83)]:
    n = count_parameters(cfg)
    print(f"{label:5s} {n / 1e6:6.2f}M  published {paper:.2f}M  ({100 * (n / 1e6 - paper) / paper:+.1f}%)")
for v in ["BL_SR", "BL_F_SR", "JT", "JT_F", "FULL"]:
    print(f"  {v:8s} {count_parameters(trainer.variant_config(ModelConfig(), v)):>11,}")

# %% [markdown]
# ## Metrics
# PSNR and SSIM on BT.601 luma (0-255), NME normalized by the outer eye corners.

# %%
rng = np.random.default_rng(0)
hr = rng.uniform(0.1, 0.8, (3, 64, 64))
print("PSNR, luma shifted 16/255:", round(psnr_y(hr + 16 / 219, hr), 4), "analytic",
      round(20 * math.log10(255 / 16), 4))
print("SSIM of a noisy copy:", round(ssim_y(np.clip(hr + rng.normal(0, 0.05, hr.shape), 0, 1), hr), 4))
truth = rng.uniform(0, 128, (68, 2))
truth[36], truth[45] = (30, 50), (80, 50)
print("NME x100, every point off by (3, 4):", 100 * nme(truth + (3, 4), truth))
