# %% [markdown]
# # Data pipeline
# From raw annotated faces to training archives: crop, 8x bicubic degradation,
# heatmap targets, offline augmentation. A synthetic corpus stands in for 300W
# so this runs anywhere.

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from jasrnet import data, datasets, synthetic

OUT = Path(__file__).resolve().parent / "_out"
OUT.mkdir(exist_ok=True)

# %% [markdown]
# Write a small raw corpus (PNG + .pts + manifest) on a 200 px canvas.
# The manifest has no box column, so head boxes come from the landmarks.

# %%
manifest = synthetic.write_corpus(OUT / "raw", n=4, seed=0)
records = datasets.read_manifest(manifest)
print(len(records), "records;", records[0].image.name, records[0].annotation.name)
pts = data.parse_landmark_file(records[0].annotation.read_text(), expected_count=68)
print("first landmark", pts[0])

# %% [markdown]
# ## Bicubic degradation
# HR (128) -> 16x16 -> back to 128. The Keys kernel is stretched when
# shrinking, so the downscale also low-passes.

# %%
hr_set, errors = datasets.prepare(records, data.get_profile("300w"), seed=0)
assert not errors
s = hr_set.sample(0)
lr16 = data.bicubic_resample(s.hr, data.Fraction(1, 8))
print("HR", s.hr.shape, "16x16", lr16.shape, "network input", s.lr.shape)

fig, ax = plt.subplots(1, 3, figsize=(9, 3))
for a, img, title in zip(ax, [s.hr, np.clip(lr16, 0, 1), s.lr], ["HR 128", "LR 16", "bicubic x8 input"]):
    a.imshow(img, interpolation="nearest")
    a.set_title(title)
    a.axis("off")
fig.savefig(OUT / "degradation.png", dpi=80)

# %% [markdown]
# ## Heatmap targets
# One 16x16 Gaussian per landmark (sigma 1.5 cells, peak 1). Argmax decoding
# returns the cell center, so the worst-case error is half a cell (4 px).

# %%
decoded = data.decode_heatmaps(s.heatmaps)
print("max decode error (px):", np.abs(decoded - s.landmarks).max())
fig, ax = plt.subplots(1, 2, figsize=(6, 3))
ax[0].imshow(s.heatmaps.max(axis=0))
ax[0].set_title("max over 68 maps")
ax[1].imshow(s.hr)
ax[1].scatter(*s.landmarks.T, s=4, c="lime")
ax[1].set_title("landmarks")
fig.savefig(OUT / "heatmaps.png", dpi=80)

# %% [markdown]
# ## Augmentation
# Fifteen copies per record: scale 0.9-1.1, rotation +/-30 deg, mirrored with
# probability 0.5 (the 68-point mirror map swaps left/right indices).

# %%
aug = data.augment(s, data.AugmentationParams(copies=15), data.sample_rng(0, 0), mirror=data.get_profile("300w").mirror)
fig, ax = plt.subplots(3, 5, figsize=(10, 6))
for a, c in zip(ax.flat, aug):
    a.imshow(c.hr)
    a.scatter(*c.landmarks[c.visible].T, s=1, c="lime")
    a.axis("off")
fig.savefig(OUT / "augmentation.png", dpi=60)

# %% [markdown]
# Archives are plain float32 records behind a JSON header, byte-identical for a
# given seed.

# %%
train, _ = datasets.prepare(records, data.get_profile("300w"), seed=0, params=data.AugmentationParams(copies=15))
train.save(OUT / "train.jasrdata")
again, _ = datasets.prepare(records, data.get_profile("300w"), seed=0, params=data.AugmentationParams(copies=15))
again.save(OUT / "train_again.jasrdata")
print(len(train), "samples; identical bytes:",
      (OUT / "train.jasrdata").read_bytes() == (OUT / "train_again.jasrdata").read_bytes())
