# %% [markdown]
# # Training, checkpoints, inference
# A desk-scale run on synthetic faces. Full-scale numbers need the real
# datasets and a GPU; this shows the mechanics end to end.

# %%
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from jasrnet import plots, synthetic, trainer
from jasrnet.model import ModelConfig

torch.set_num_threads(1)
OUT = Path(__file__).resolve().parent / "_out"
OUT.mkdir(exist_ok=True)

# %%
train_set = synthetic.make_dataset(8, seed=1)
test_set = synthetic.make_dataset(4, seed=2)
mc = ModelConfig(channels=16, extraction_blocks=1)
tc = trainer.TrainConfig(base_lr=1e-3, lr_drops=((150, 0.5),), epochs=200, batch_size=8, val_fraction=0.0)

# %% [markdown]
# The first 100 epochs, then a resume from the checkpoint for the rest.
# Adam moments live in the checkpoint, so the split run matches an
# uninterrupted one.

# %%
first = trainer.train(mc, replace(tc, epochs=100), train_set, OUT / "run")
res = trainer.train(mc, tc, train_set, OUT / "run", val_dataset=test_set, resume=first.checkpoint)
print("resumed at epoch", res.history.steps[0]["epoch"], "->", res.checkpoint.name)
plots.plot_loss_curve(first.history, OUT / "loss_first.png", "epochs 0-99")
plots.plot_loss_curve(res.history, OUT / "loss_resumed.png", "epochs 100-199")
plots.plot_metric_curve(res.history, "val_nme_x100", OUT / "val_nme.png", "held-out NME x100")

# %% [markdown]
# Scores against the bicubic input on the training faces (memorization) and on
# unseen faces.

# %%
for name, ds in [("train", train_set), ("unseen", test_set)]:
    bic = trainer.evaluate_predictions(ds, sr_images=ds.lr)
    rep = trainer.evaluate(res.checkpoint, ds)
    print(f"{name:6s} bicubic {bic.psnr_db:.2f} dB / {bic.ssim:.3f}   "
          f"model {rep.psnr_db:.2f} dB / {rep.ssim:.3f}   NME x100 {rep.nme_x100:.2f}")

# %%
sr, lms = trainer.predict(res.model, test_set.lr[:1])
plots.draw_landmarks(sr[0], lms[0]).save(OUT / "prediction.png")
print("predicted landmarks:", lms.shape, "first", lms[0, 0], "truth", test_set.landmarks[0, 0])
