"""Face sample pipeline: annotations, resampling, heatmap targets, augmentation.

Coordinates are continuous pixel coordinates with the origin at the top-left
corner of the top-left pixel, so pixel ``i`` covers ``[i, i + 1)`` and its
center sits at ``i + 0.5``. Images are float arrays in ``[0, 1]`` laid out
``H x W x C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

HR_SIZE = 128
HEATMAP_SIZE = 16
SCALE = HR_SIZE // HEATMAP_SIZE
DEFAULT_SIGMA = 1.5
KEYS_A = -0.5


class LandmarkParseError(ValueError):
    """Malformed landmark annotation document."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConfigurationError(ValueError):
    pass


# --------------------------------------------------------------------------
# dataset profiles

def _mirror_68():
    perm = list(range(68))

    def swap(a, b):
        perm[a], perm[b] = b, a

    for i in range(8):                      # jaw 0..16
        swap(i, 16 - i)
    for i in range(5):                      # brows 17..26
        swap(17 + i, 26 - i)
    for i in range(2):                      # lower nose 31..35
        swap(31 + i, 35 - i)
    for a, b in [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]:
        swap(a, b)
    for a, b in [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]:
        swap(a, b)
    for a, b in [(60, 64), (61, 63), (65, 67)]:
        swap(a, b)
    return tuple(perm)


def _mirror_19():
    perm = list(range(19))
    for a, b in [(0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9), (12, 14), (15, 17)]:
        perm[a], perm[b] = b, a
    return tuple(perm)


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    num_landmarks: int
    mirror: Optional[tuple] = None
    norm_mode: str = "interocular"


PROFILES = {
    "300w": DatasetProfile("300w", 68, _mirror_68(), "interocular"),
    "aflw": DatasetProfile("aflw", 19, _mirror_19(), "bbox_sqrt_area"),
    "helen": DatasetProfile("helen", 194, None, "interocular"),
}


def get_profile(name: str) -> DatasetProfile:
    """Look up a profile by name; ``custom:K`` builds a K-point profile."""
    key = name.lower()
    if key in PROFILES:
        return PROFILES[key]
    if key.startswith("custom:"):
        try:
            k = int(key.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad custom profile {name!r}") from None
        if k < 1:
            raise ConfigurationError(f"custom profile needs K >= 1, got {k}")
        return DatasetProfile(key, k, None, "bbox_sqrt_area")
    raise ConfigurationError(
        f"unknown profile {name!r}; expected 300w, aflw, helen or custom:K")


# --------------------------------------------------------------------------
# annotation documents

def parse_landmark_file(text: str, expected_count: Optional[int] = None) -> np.ndarray:
    """Parse a ``.pts`` document into a ``K x 2`` float array of (x, y)."""
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln]
    if len(lines) < 3:
        raise LandmarkParseError("document too short for a .pts header")

    no, ln = lines[0]
    if not ln.startswith("version"):
        raise LandmarkParseError(f"malformed header, expected 'version: 1', got {ln!r}", no)
    no, ln = lines[1]
    key, _, value = ln.partition(":")
    if key.strip() != "n_points":
        raise LandmarkParseError(f"malformed header, expected 'n_points: K', got {ln!r}", no)
    try:
        count = int(value)
    except ValueError:
        raise LandmarkParseError(f"malformed header, bad point count {value.strip()!r}", no) from None
    no, ln = lines[2]
    if ln != "{":
        raise LandmarkParseError(f"malformed header, expected '{{', got {ln!r}", no)

    points = []
    closed = False
    for no, ln in lines[3:]:
        if ln == "}":
            closed = True
            break
        parts = ln.split()
        if len(parts) != 2:
            raise LandmarkParseError(f"expected 'x y', got {ln!r}", no)
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise LandmarkParseError(f"non-numeric coordinate in {ln!r}", no) from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise LandmarkParseError(f"non-finite coordinate in {ln!r}", no)
        points.append((x, y))
    if not closed:
        raise LandmarkParseError("missing closing '}'")
    if len(points) != count:
        raise LandmarkParseError(
            f"point-count mismatch: header declares {count}, found {len(points)}")
    if expected_count is not None and count != expected_count:
        raise LandmarkParseError(
            f"point-count mismatch: profile expects {expected_count}, file declares {count}")
    return np.asarray(points, dtype=np.float64).reshape(count, 2)


def format_landmark_file(points) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    body = "\n".join(f"{x!r} {y!r}" for x, y in pts.tolist())
    return f"version: 1\nn_points: {len(pts)}\n{{\n{body}\n}}\n"


# --------------------------------------------------------------------------
# bicubic resampling

def keys_kernel(t, a: float = KEYS_A):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resample_weights(n_in: int, n_out: int, scale: float, start: float = 0.0) -> np.ndarray:
    """Dense ``n_out x n_in`` bicubic interpolation matrix along one axis.

    Output pixel ``i`` samples the input at continuous coordinate
    ``start + (i + 0.5) / scale``. When shrinking, the kernel is stretched by
    ``1 / scale`` so it also low-passes. Out-of-range taps are clamped to the
    border pixel and every row is normalized to sum to one.
    """
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    centers = start + (np.arange(n_out) + 0.5) / scale - 0.5
    lo = np.floor(centers - support).astype(int)
    taps = lo[:, None] + np.arange(int(math.ceil(2 * support)) + 2)[None, :]
    w = keys_kernel((centers[:, None] - taps) * kscale)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.broadcast_to(np.arange(n_out)[:, None], taps.shape)
    np.add.at(mat, (rows, np.clip(taps, 0, n_in - 1)), w)
    return mat


def _apply_separable(image, wy, wx):
    img = np.asarray(image, dtype=np.float64)
    out = np.tensordot(wy, img, axes=(1, 0))
    out = np.tensordot(wx, out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def bicubic_resample(image, factor) -> np.ndarray:
    """Resize ``image`` (``H x W`` or ``H x W x C``) by a rational factor."""
    frac = Fraction(factor).limit_denominator(1 << 20) if not isinstance(factor, Fraction) else factor
    if frac <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    h, w = np.shape(image)[:2]
    oh, ow = h * frac, w * frac
    if oh.denominator != 1 or ow.denominator != 1:
        raise ValueError(f"non-integral output size {float(oh)}x{float(ow)} for {h}x{w} * {factor}")
    s = float(frac)
    return _apply_separable(image, resample_weights(h, int(oh), s), resample_weights(w, int(ow), s))


@dataclass(frozen=True)
class AffineTransform:
    """Axis-aligned scale + translate: ``x' = sx * x + tx``, ``y' = sy * y + ty``."""

    sx: float
    sy: float
    tx: float
    ty: float

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts * np.array([self.sx, self.sy]) + np.array([self.tx, self.ty])

    def inverse(self) -> "AffineTransform":
        return AffineTransform(1 / self.sx, 1 / self.sy, -self.tx / self.sx, -self.ty / self.sy)


def crop_and_resize(image, box, size: int = HR_SIZE):
    """Crop ``box = (x0, y0, x1, y1)`` and resample it to ``size x size``.

    Returns the resampled image and the transform mapping original
    coordinates into the output frame. Regions of the box outside the image
    repeat the border pixels.
    """
    x0, y0, x1, y1 = (float(v) for v in box)
    h, w = np.shape(image)[:2]
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate box {tuple(box)}")
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise ValueError(f"box {tuple(box)} does not intersect the {w}x{h} image")
    sx, sy = size / (x1 - x0), size / (y1 - y0)
    out = _apply_separable(image, resample_weights(h, size, sy, y0), resample_weights(w, size, sx, x0))
    return out, AffineTransform(sx, sy, -x0 * sx, -y0 * sy)


def synthesize_lr(hr, factor: int = SCALE) -> np.ndarray:
    """Bicubic ``factor``x downscale followed by ``factor``x upscale, clamped."""
    small = bicubic_resample(hr, Fraction(1, factor))
    return np.clip(bicubic_resample(small, factor), 0.0, 1.0)


# --------------------------------------------------------------------------
# heatmaps

def landmark_visibility(landmarks, size: int = HR_SIZE) -> np.ndarray:
    pts = np.asarray(landmarks, dtype=np.float64)
    return np.all((pts >= 0) & (pts < size), axis=1)


def render_heatmaps(landmarks, size: int = HEATMAP_SIZE, sigma: float = DEFAULT_SIGMA,
                    stride: int = SCALE, return_visibility: bool = False):
    """Gaussian target maps, ``K x size x size`` indexed ``[k, row, col]``.

    Peak value is 1 when the landmark sits on a cell center. Landmarks
    outside the frame get an all-zero map and ``visible = False``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2) / stride
    centers = np.arange(size) + 0.5
    dx = centers[None, :] - pts[:, 0:1]
    dy = centers[None, :] - pts[:, 1:2]
    maps = np.exp(-(dy[:, :, None] ** 2 + dx[:, None, :] ** 2) / (2 * sigma ** 2))
    visible = landmark_visibility(pts, size)
    maps[~visible] = 0.0
    if return_visibility:
        return maps, visible
    return maps


def decode_heatmaps(heatmaps, stride: int = SCALE) -> np.ndarray:
    """Argmax per channel (row-major, first maximum wins) to cell-center coordinates."""
    hm = np.asarray(heatmaps)
    k, h, w = hm.shape[-3:]
    flat = hm.reshape(*hm.shape[:-2], h * w)
    idx = np.argmax(flat, axis=-1)
    rows, cols = np.divmod(idx, w)
    return np.stack([(cols + 0.5) * stride, (rows + 0.5) * stride], axis=-1).astype(np.float64)


# --------------------------------------------------------------------------
# samples

def face_box_from_landmarks(landmarks, margin: float = 0.05, size: int = HR_SIZE):
    """Tight landmark box grown by ``margin`` of its extent per side, clipped to the frame."""
    pts = np.asarray(landmarks, dtype=np.float64)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    mx, my = margin * (x1 - x0), margin * (y1 - y0)
    box = np.clip([x0 - mx, y0 - my, x1 + mx, y1 + my], 0, size)
    return tuple(float(v) for v in box)


@dataclass
class FaceSample:
    hr: np.ndarray                 # H x W x 3
    lr: np.ndarray                 # H x W x 3, bicubic down/up copy of hr
    landmarks: np.ndarray          # K x 2, HR pixels
    heatmaps: np.ndarray           # K x h x w
    face_box: tuple
    visible: np.ndarray = field(default=None)

    @property
    def num_landmarks(self) -> int:
        return len(self.landmarks)


def make_sample(hr, landmarks, sigma: float = DEFAULT_SIGMA, factor: int = SCALE) -> FaceSample:
    hr = np.clip(np.asarray(hr, dtype=np.float64), 0.0, 1.0)
    size = hr.shape[0]
    if hr.shape[:2] != (size, size) or size % factor:
        raise ValueError(f"HR image must be square with side divisible by {factor}, got {hr.shape}")
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    heatmaps, visible = render_heatmaps(landmarks, size // factor, sigma, factor, return_visibility=True)
    return FaceSample(
        hr=hr,
        lr=synthesize_lr(hr, factor),
        landmarks=landmarks,
        heatmaps=heatmaps,
        face_box=face_box_from_landmarks(landmarks, size=size),
        visible=visible,
    )


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationParams:
    scale_range: tuple = (0.9, 1.1)
    rotation_range: tuple = (-30.0, 30.0)
    flip_probability: float = 0.5
    copies: int = 15

    def __post_init__(self):
        if self.copies < 1:
            raise ConfigurationError(f"copies must be >= 1, got {self.copies}")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ConfigurationError(f"rotation_range must be ordered, got {self.rotation_range}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigurationError(f"flip_probability must be in [0, 1], got {self.flip_probability}")


def warp_sample(sample: FaceSample, scale: float, angle_deg: float, flip: bool,
                mirror: Optional[Sequence[int]] = None, sigma: float = DEFAULT_SIGMA) -> FaceSample:
    """Scale and rotate about the image center, then optionally mirror horizontally.

    Targets (LR input, heatmaps, face box) are rebuilt from the warped HR image.
    """
    size = sample.hr.shape[0]
    c = size / 2.0
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    fwd = scale * np.array([[cos, -sin], [sin, cos]])

    # inverse-map output pixel centers into the source image
    grid = np.arange(size) + 0.5
    qx, qy = np.meshgrid(grid, grid)
    inv = np.linalg.inv(fwd)
    px = inv[0, 0] * (qx - c) + inv[0, 1] * (qy - c) + c
    py = inv[1, 0] * (qx - c) + inv[1, 1] * (qy - c) + c
    coords = [py - 0.5, px - 0.5]
    hr = np.stack([ndimage.map_coordinates(sample.hr[..., ch], coords, order=1, mode="nearest")
                   for ch in range(sample.hr.shape[2])], axis=-1)
    pts = (sample.landmarks - c) @ fwd.T + c

    if flip:
        if mirror is None:
            raise ConfigurationError("horizontal flip needs the profile's mirror permutation")
        hr = hr[:, ::-1]
        pts = pts[list(mirror)]
        pts[:, 0] = size - pts[:, 0]
    factor = size // sample.heatmaps.shape[-1]
    return make_sample(hr, pts, sigma, factor)


def augment(sample: FaceSample, params: AugmentationParams, rng: np.random.Generator,
            mirror: Optional[Sequence[int]] = None, sigma: float = DEFAULT_SIGMA) -> list:
    """Draw ``params.copies`` randomly scaled/rotated/flipped versions of ``sample``."""
    if params.flip_probability > 0 and mirror is None:
        raise ConfigurationError("flip_probability > 0 but the dataset profile has no mirror permutation")
    if mirror is not None and len(mirror) != sample.num_landmarks:
        raise ConfigurationError(
            f"mirror permutation has {len(mirror)} entries for {sample.num_landmarks} landmarks")
    out = []
    for _ in range(params.copies):
        s = rng.uniform(*params.scale_range)
        a = rng.uniform(*params.rotation_range)
        f = bool(rng.random() < params.flip_probability)
        out.append(warp_sample(sample, s, a, f, mirror, sigma))
    return out


def identity_params(copies: int = 1) -> AugmentationParams:
    return AugmentationParams((1.0, 1.0), (0.0, 0.0), 0.0, copies)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator stream for one sample, stable across worker layouts."""
    return np.random.default_rng([int(seed), int(index)])

