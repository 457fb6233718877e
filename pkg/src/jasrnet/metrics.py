"""PSNR on luma, SSIM, and normalized landmark error."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2
INTEROCULAR_68 = (36, 45)


def rgb_to_luma(image, channel_axis: int = 0) -> np.ndarray:
    """BT.601 luma of an RGB image in [0, 1]; output in [16/255, 235/255]."""
    img = np.moveaxis(np.asarray(image, dtype=np.float64), channel_axis, 0)
    if img.shape[0] != 3:
        raise ValueError(f"expected 3 color channels on axis {channel_axis}, got shape {np.shape(image)}")
    r, g, b = img
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def region_slices(region, shape):
    """Pixel slices covering a continuous box ``(x0, y0, x1, y1)``."""
    h, w = shape
    if region is None:
        return slice(0, h), slice(0, w)
    x0, y0, x1, y1 = region
    r0, r1 = max(0, int(math.floor(y0))), min(h, int(math.ceil(y1)))
    c0, c1 = max(0, int(math.floor(x0))), min(w, int(math.ceil(x1)))
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"empty evaluation region {tuple(region)}")
    return slice(r0, r1), slice(c0, c1)


def psnr_y(pred, target, region=None, channel_axis: int = 0) -> float:
    """PSNR in dB between the luma channels (0-255 scale) inside ``region``."""
    yp = rgb_to_luma(pred, channel_axis) * 255.0
    yt = rgb_to_luma(target, channel_axis) * 255.0
    rs, cs = region_slices(region, yp.shape)
    mse = float(np.mean((yp[rs, cs] - yt[rs, cs]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    out = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(out, len(g), axis=1) @ g


def ssim(pred, target, region=None) -> float:
    """Mean SSIM over all 11x11 Gaussian windows lying inside ``region``.

    Inputs are single-channel images on the 0-255 scale.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2-D images, got {x.shape} and {y.shape}")
    rs, cs = region_slices(region, x.shape)
    x, y = x[rs, cs], y[rs, cs]
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"region {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def ssim_y(pred, target, region=None, channel_axis: int = 0) -> float:
    return ssim(rgb_to_luma(pred, channel_axis) * 255.0, rgb_to_luma(target, channel_axis) * 255.0, region)


def normalization_factor(truth, norm_mode: str = "interocular", box=None) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    if norm_mode == "interocular":
        if len(truth) != 68:
            raise ValueError(f"interocular normalization needs 68 landmarks, got {len(truth)}")
        a, b = INTEROCULAR_68
        d = float(np.linalg.norm(truth[a] - truth[b]))
    elif norm_mode == "bbox_sqrt_area":
        if box is None:
            (x0, y0), (x1, y1) = truth.min(axis=0), truth.max(axis=0)
        else:
            x0, y0, x1, y1 = box
        d = math.sqrt(max(0.0, x1 - x0) * max(0.0, y1 - y0))
    else:
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    if not d > 0:
        raise ValueError(f"zero normalization factor ({norm_mode})")
    return d


def nme(pred, truth, norm_mode: str = "interocular", box=None) -> float:
    """Mean point-to-point distance over the normalization factor (a fraction, not x100)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"landmark count mismatch {pred.shape} vs {truth.shape}")
    norm = normalization_factor(truth, norm_mode, box)
    return float(np.mean(np.linalg.norm(pred - truth, axis=1))) / norm


# --------------------------------------------------------------------------

CSV_COLUMNS = ("sample_id", "psnr_db", "ssim", "nme_x100")


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)

    def add(self, sample_id, psnr_db=None, ssim=None, nme_x100=None):
        self.records.append({"sample_id": str(sample_id), "psnr_db": psnr_db,
                             "ssim": ssim, "nme_x100": nme_x100})

    @property
    def psnr_db(self) -> Optional[float]:
        return _mean(r["psnr_db"] for r in self.records)

    @property
    def ssim(self) -> Optional[float]:
        return _mean(r["ssim"] for r in self.records)

    @property
    def nme_x100(self) -> Optional[float]:
        return _mean(r["nme_x100"] for r in self.records)

    def summary(self) -> dict:
        return {"sample_id": "mean", "psnr_db": self.psnr_db, "ssim": self.ssim, "nme_x100": self.nme_x100}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.records + [self.summary()]:
                w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        rep = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                if row["sample_id"] == "mean":
                    continue
                rep.add(row["sample_id"], *(_parse(row[c]) for c in CSV_COLUMNS[1:]))
        return rep


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _parse(s):
    return float(s) if s != "" else None
