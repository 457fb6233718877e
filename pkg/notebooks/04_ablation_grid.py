# %% [markdown]
# # Ablation grid
# The five ablation variants (single-task baselines with and without fusion,
# joint training with and without fusion, the full model) and the baseline
# variations (concat vs add fusion, one/two/three alignment stages, short vs
# long trunk). Desk widths here; the paper-scale parameter column is exact.

# %%
from pathlib import Path

import csv

import torch

from jasrnet import synthetic, trainer
from jasrnet.model import ModelConfig

torch.set_num_threads(1)
OUT = Path(__file__).resolve().parent / "_out"
OUT.mkdir(exist_ok=True)

# %%
ds = synthetic.make_dataset(12, seed=7)
grid = trainer.GridConfig(model=ModelConfig(channels=8, extraction_blocks=2),
                          train=trainer.TrainConfig(base_lr=1e-3, lr_drops=(), epochs=40, batch_size=6),
                          blocks_short=1, blocks_long=2)
rows, histories = trainer.run_ablation_grid(grid, ds, OUT / "grid_runs")
trainer.write_grid_csv(OUT / "grid.csv", rows)

# %%
def fmt(v, spec):
    return "-" if v is None else format(v, spec)


print(f"{'label':11s} {'variant':10s} {'params@paper':>13s} {'PSNR':>7s} {'SSIM':>6s} {'NME':>7s}")
for r in rows:
    print(f"{r['label']:11s} {r['variant']:10s} {r['params_paper_scale']:>13,} {fmt(r['psnr_db'], '7.2f')} "
          f"{fmt(r['ssim'], '6.3f')} {fmt(r['nme_x100'], '7.2f')}")

# %% [markdown]
# The CSV parses with a strict reader.

# %%
with open(OUT / "grid.csv", newline="") as f:
    print(len(list(csv.reader(f, strict=True))) - 1, "rows")
