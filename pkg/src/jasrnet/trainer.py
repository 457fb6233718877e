"""Joint optimization, evaluation, checkpoints, and the ablation grid."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import data
from .datasets import FaceDataset
from .losses import joint_loss
from .metrics import MetricsReport, nme, psnr_y, ssim_y
from .model import JASRNet, ModelConfig, build, count_parameters

log = logging.getLogger(__name__)

CKPT_MAGIC = b"JASRNET-CKPT-1\n"

VARIANTS = {
    "BL_SR": dict(heads="sr_only", fusion_mode="off", long_skip=False),
    "BL_ALIGN": dict(heads="align_only", fusion_mode="off", long_skip=False),
    "BL_F_SR": dict(heads="sr_only", fusion_mode="add", long_skip=False),
    "BL_F_ALIGN": dict(heads="align_only", fusion_mode="add", long_skip=False),
    "JT": dict(heads="both", fusion_mode="off", long_skip=False),
    "JT_F": dict(heads="both", fusion_mode="add", long_skip=False),
    "FULL": dict(heads="both", fusion_mode="add", long_skip=True),
}


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Apply a variant's heads/fusion/skip switches to ``base``.

    Variants only say whether fusion is on; a base asking for concat fusion
    keeps it.
    """
    try:
        switches = dict(VARIANTS[variant])
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None
    if switches["fusion_mode"] != "off" and base.fusion_mode != "off":
        switches["fusion_mode"] = base.fusion_mode
    return replace(base, **switches)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-5
    lr_drops: tuple = ((20, 0.5), (30, 0.5))
    batch_size: int = 8
    epochs: int = 40
    alpha: float = 1.0
    seed: int = 0
    variant: str = "FULL"
    deep_supervision: bool = True
    val_fraction: float = 0.1
    max_steps: Optional[int] = None
    checkpoint_every: int = 1

    def violations(self) -> list:
        errs = []
        if not self.base_lr > 0:
            errs.append(f"base_lr must be > 0 (got {self.base_lr})")
        if self.epochs < 1:
            errs.append("epochs must be ≥ 1")
        if self.batch_size < 1:
            errs.append("batch_size must be ≥ 1")
        if self.alpha < 0:
            errs.append("alpha must be ≥ 0")
        if self.variant not in VARIANTS:
            errs.append(f"variant must be one of {sorted(VARIANTS)} (got {self.variant!r})")
        if not 0 <= self.val_fraction < 1:
            errs.append("val_fraction must be in [0, 1)")
        if self.checkpoint_every < 1:
            errs.append("checkpoint_every must be ≥ 1")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = [list(x) for x in self.lr_drops]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_drops" in d:
            d["lr_drops"] = tuple(tuple(x) for x in d["lr_drops"])
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Piecewise-constant learning rate for a 0-based epoch index."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    lr = config.base_lr
    for at, factor in config.lr_drops:
        if epoch >= at:
            lr *= factor
    return lr


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: JASRNet, epoch: int, train_config: Optional[TrainConfig] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None, extra: Optional[dict] = None) -> Path:
    """Write parameters (float32, little-endian) with config and epoch.

    Adam moments, when an optimizer is given, are stored alongside under
    ``adam.exp_avg.<param>`` / ``adam.exp_avg_sq.<param>`` so runs can resume.
    """
    tensors = [(name, p.detach()) for name, p in model.named_parameters()]
    adam_step = None
    if optimizer is not None:
        names = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                adam_step = int(st["step"])
                tensors.append((f"adam.exp_avg.{names[id(p)]}", st["exp_avg"]))
                tensors.append((f"adam.exp_avg_sq.{names[id(p)]}", st["exp_avg_sq"]))
    header = {
        "format": CKPT_MAGIC.decode().strip(),
        "model_config": model.config.to_dict(),
        "epoch": int(epoch),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "adam_step": adam_step,
        "extra": extra or {},
        "tensors": [[name, list(t.shape)] for name, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple:
    """Return ``(header, {name: float32 array})``."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a {CKPT_MAGIC.decode().strip()} checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        raw = fh.read()
    sizes = [int(np.prod(shape)) for _, shape in header["tensors"]]
    if len(raw) != 4 * sum(sizes):
        raise ValueError(f"{path}: truncated checkpoint (payload {len(raw)} bytes, expected {4 * sum(sizes)})")
    payload = np.frombuffer(raw, dtype="<f4")
    arrays, offset = {}, 0
    for (name, shape), size in zip(header["tensors"], sizes):
        arrays[name] = payload[offset:offset + size].reshape(shape)
        offset += size
    return header, arrays


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild the model from a checkpoint; returns ``(model, header, arrays)``."""
    header, arrays = read_checkpoint(path)
    model = build(ModelConfig.from_dict(header["model_config"]), seed=0, dtype=dtype)
    state = {name: torch.from_numpy(arrays[name].copy()).to(dtype) for name, _ in model.named_parameters()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, header, arrays


def _restore_adam(optimizer, model, header, arrays):
    if header.get("adam_step") is None:
        return
    for name, p in model.named_parameters():
        key = f"adam.exp_avg.{name}"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(header["adam_step"])),
            "exp_avg": torch.from_numpy(arrays[key].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.exp_avg_sq.{name}"].copy()).to(p.dtype),
        }


# --------------------------------------------------------------------------
# training

class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_good):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    STEP_COLUMNS = ("step", "epoch", "lr", "total", "sr_term", "heatmap_term")
    EPOCH_COLUMNS = ("epoch", "seconds", "val_psnr_db", "val_ssim", "val_nme_x100")

    def to_csv(self, path) -> None:
        _write_rows(path, self.STEP_COLUMNS, self.steps)

    def epochs_to_csv(self, path) -> None:
        _write_rows(path, self.EPOCH_COLUMNS, self.epochs)


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Optional[Path]
    history: TrainHistory
    model: JASRNet


def to_tensor(images) -> torch.Tensor:
    """``N x H x W x 3`` array to ``N x 3 x H x W`` float tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(images, dtype=np.float32), -1, 1)))


def _batch(dataset: FaceDataset, idx, dtype):
    return (to_tensor(dataset.lr[idx]).to(dtype), to_tensor(dataset.hr[idx]).to(dtype),
            torch.from_numpy(dataset.heatmaps[idx]).to(dtype))


def _selection_key(model_config: ModelConfig, report: MetricsReport):
    """Smaller is better."""
    if model_config.has_align and report.nme_x100 is not None:
        return report.nme_x100
    if report.psnr_db is not None:
        return -report.psnr_db
    return None


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: FaceDataset, out_dir,
          val_dataset: Optional[FaceDataset] = None, resume=None, dtype=torch.float32) -> TrainResult:
    """Train one variant; ``model_config`` is overridden by ``train_config.variant``.

    Writes ``epoch_XXX.ckpt`` every ``checkpoint_every`` epochs (and after the
    last), ``best.ckpt`` on validation improvement, and ``history.csv``.
    """
    train_config.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    model_config = variant_config(model_config, train_config.variant)
    if model_config.has_align and dataset.num_landmarks != model_config.num_landmarks:
        raise ValueError(f"dataset has {dataset.num_landmarks} landmarks, model expects {model_config.num_landmarks}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if val_dataset is None and train_config.val_fraction > 0:
        dataset, val_dataset = dataset.holdout_split(train_config.val_fraction, train_config.seed)
    if val_dataset is not None and len(val_dataset) == 0:
        val_dataset = None

    torch.manual_seed(train_config.seed)
    model = build(model_config, train_config.seed, dtype)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.base_lr, betas=(0.9, 0.999), eps=1e-8)
    start_epoch, step = 0, 0
    history = TrainHistory()
    best_key, best_path, last_good = math.inf, None, None
    if resume is not None:
        rmodel, header, arrays = load_checkpoint(resume, dtype)
        if rmodel.config != model_config:
            raise ValueError(f"checkpoint config {rmodel.config} does not match {model_config}")
        model.load_state_dict(rmodel.state_dict())
        _restore_adam(opt, model, header, arrays)
        start_epoch = header["epoch"] + 1
        step = header["extra"].get("step", 0)
        last_good = Path(resume)

    n = len(dataset)
    bs = train_config.batch_size
    done = False
    ckpt = last_good
    for epoch in range(start_epoch, train_config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(train_config, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        for b in range(0, n, bs):
            lr_in, hr, hm = _batch(dataset, order[b:b + bs], dtype)
            out = model(lr_in)
            loss = joint_loss(out, hr, hm, train_config.alpha, train_config.deep_supervision)
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(step, last_good)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            history.steps.append({"step": step, "epoch": epoch, "lr": lr, **loss.as_floats()})
            step += 1
            if train_config.max_steps is not None and step >= train_config.max_steps:
                done = True
                break

        rec = {"epoch": epoch, "seconds": time.perf_counter() - t0}
        report = None
        if val_dataset is not None:
            report = evaluate(model, val_dataset)
            rec.update(val_psnr_db=report.psnr_db, val_ssim=report.ssim, val_nme_x100=report.nme_x100)
        history.epochs.append(rec)

        last_epoch = done or epoch == train_config.epochs - 1
        if last_epoch or (epoch + 1) % train_config.checkpoint_every == 0:
            ckpt = save_checkpoint(out_dir / f"epoch_{epoch:03d}.ckpt", model, epoch, train_config, opt,
                                   {"step": step})
            last_good = ckpt
        if report is not None:
            key = _selection_key(model_config, report)
            if key is not None and key < best_key:
                best_key = key
                best_path = save_checkpoint(out_dir / "best.ckpt", model, epoch, train_config, opt,
                                            {"step": step, "selection_key": key})
        log.info("epoch %d lr %.3g loss %.5f (%.1fs)", epoch, lr,
                 history.steps[-1]["total"] if history.steps else float("nan"), rec["seconds"])
        if done:
            break

    history.to_csv(out_dir / "history.csv")
    history.epochs_to_csv(out_dir / "epochs.csv")
    model.eval()
    return TrainResult(ckpt, best_path, history, model)


# --------------------------------------------------------------------------
# evaluation

def norm_mode_for(dataset: FaceDataset) -> str:
    try:
        return data.get_profile(dataset.profile).norm_mode
    except data.ConfigurationError:
        return "bbox_sqrt_area"


def evaluate_predictions(dataset: FaceDataset, sr_images=None, landmarks=None, norm_mode=None) -> MetricsReport:
    """Score predictions against ``dataset``.

    ``sr_images`` is ``N x H x W x 3`` (clamped here); ``landmarks`` is
    ``N x K x 2`` in HR pixels. Either may be ``None``.
    """
    norm_mode = norm_mode or norm_mode_for(dataset)
    report = MetricsReport()
    for i in range(len(dataset)):
        p = s = e = None
        box = tuple(float(v) for v in dataset.face_box[i])
        if sr_images is not None:
            pred = np.clip(np.asarray(sr_images[i], dtype=np.float64), 0.0, 1.0)
            target = dataset.hr[i].astype(np.float64)
            p = psnr_y(pred, target, box, channel_axis=-1)
            s = ssim_y(pred, target, box, channel_axis=-1)
        if landmarks is not None:
            e = 100.0 * nme(landmarks[i], dataset.landmarks[i].astype(np.float64), norm_mode)
        report.add(dataset.ids[i], p, s, e)
    return report


@torch.no_grad()
def predict(model: JASRNet, lr_images, batch_size: int = 8):
    """Run the frozen model; returns ``(sr N x H x W x 3 or None, landmarks N x K x 2 or None)``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    srs, lms = [], []
    for b in range(0, len(lr_images), batch_size):
        out = model(to_tensor(lr_images[b:b + batch_size]).to(dtype))
        if out.sr_image is not None:
            srs.append(np.moveaxis(out.sr_image.clamp(0, 1).double().numpy(), 1, -1))
        if out.stage_heatmaps is not None:
            lms.append(data.decode_heatmaps(out.stage_heatmaps[-1].double().numpy()))
    sr = np.concatenate(srs) if srs else None
    lm = np.concatenate(lms) if lms else None
    return sr, lm


def evaluate(model_or_checkpoint, dataset: FaceDataset, batch_size: int = 8) -> MetricsReport:
    model = model_or_checkpoint
    if not isinstance(model, JASRNet):
        model = load_checkpoint(model_or_checkpoint)[0]
    cfg = model.config
    if cfg.has_align and dataset.num_landmarks != cfg.num_landmarks:
        raise ValueError(f"checkpoint predicts {cfg.num_landmarks} landmarks, dataset has {dataset.num_landmarks}")
    was_training = model.training
    sr, lm = predict(model, dataset.lr, batch_size)
    if was_training:
        model.train()
    return evaluate_predictions(dataset, sr, lm)


# --------------------------------------------------------------------------
# ablation grid

ABLATION_ROWS = (
    ("ablation", "BL_SR", "BL", {}),
    ("ablation", "BL_ALIGN", "BL", {}),
    ("ablation", "BL_F_SR", "BL_F", {}),
    ("ablation", "BL_F_ALIGN", "BL_F", {}),
    ("ablation", "JT", "JT", {}),
    ("ablation", "JT_F", "JT_F", {}),
    ("ablation", "FULL", "JASRNet", {}),
)
VARIATION_ROWS = (
    ("variation", "FULL", "Concat", {"fusion_mode": "concat"}),
    ("variation", "FULL", "Adding", {}),
    ("variation", "FULL", "One_stage", {"alignment_stages": 1}),
    ("variation", "FULL", "Two_stages", {"alignment_stages": 2}),
    ("variation", "FULL", "Res_16", {"extraction_blocks": "short"}),
    ("variation", "FULL", "Res_32", {"extraction_blocks": "long"}),
)
GRID_COLUMNS = ("group", "label", "variant", "heads", "fusion_mode", "long_skip", "extraction_blocks",
                "alignment_stages", "params", "params_paper_scale", "final_loss", "psnr_db", "ssim", "nme_x100")


@dataclass(frozen=True)
class GridConfig:
    """Desk-scale settings for the grid; the paper-scale column always uses C=128, T in {16, 32}."""

    model: ModelConfig = ModelConfig(channels=16, extraction_blocks=4)
    train: TrainConfig = TrainConfig()
    blocks_short: int = 2
    blocks_long: int = 4


def _row_configs(grid: GridConfig, variant, overrides):
    cfg = variant_config(grid.model, variant)
    paper = replace(variant_config(ModelConfig(num_landmarks=grid.model.num_landmarks), variant),
                    extraction_blocks=32)
    for key, value in overrides.items():
        if key == "extraction_blocks":
            cfg = replace(cfg, extraction_blocks=grid.blocks_short if value == "short" else grid.blocks_long)
            paper = replace(paper, extraction_blocks=16 if value == "short" else 32)
        else:
            cfg = replace(cfg, **{key: value})
            paper = replace(paper, **{key: value})
    if "extraction_blocks" not in overrides:
        cfg = replace(cfg, extraction_blocks=grid.blocks_long)
    return cfg, paper


def run_ablation_grid(grid: GridConfig, dataset: FaceDataset, out_dir, test_dataset: Optional[FaceDataset] = None):
    """Train and score every ablation variant and baseline variation.

    Returns ``(rows, histories)``; identical configurations are trained once.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = dataset, test_dataset
    if eval_set is None:
        train_set, eval_set = dataset.holdout_split(grid.train.val_fraction or 0.1, grid.train.seed)
        if len(eval_set) == 0:
            eval_set = train_set
    tcfg = replace(grid.train, val_fraction=0.0)

    cache, rows, histories = {}, [], {}
    for group, variant, label, overrides in ABLATION_ROWS + VARIATION_ROWS:
        cfg, paper = _row_configs(grid, variant, overrides)
        if cfg not in cache:
            run_dir = out_dir / f"{group}_{label}_{variant}"
            res = train(cfg, replace(tcfg, variant=variant), train_set, run_dir, val_dataset=None)
            report = evaluate(res.model, eval_set)
            cache[cfg] = (res, report)
        res, report = cache[cfg]
        name = f"{group}:{label}:{variant}"
        histories[name] = res.history
        rows.append({
            "group": group, "label": label, "variant": variant, "heads": cfg.heads,
            "fusion_mode": cfg.fusion_mode, "long_skip": int(cfg.long_skip),
            "extraction_blocks": cfg.extraction_blocks, "alignment_stages": cfg.alignment_stages,
            "params": count_parameters(cfg), "params_paper_scale": count_parameters(paper),
            "final_loss": res.history.steps[-1]["total"],
            "psnr_db": report.psnr_db if cfg.has_sr else None,
            "ssim": report.ssim if cfg.has_sr else None,
            "nme_x100": report.nme_x100 if cfg.has_align else None,
        })
    return rows, histories


def write_grid_csv(path, rows) -> None:
    _write_rows(path, GRID_COLUMNS, rows)
