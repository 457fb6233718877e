"""Procedural cartoon faces with 68-point annotations.

Used for tests and the demo scripts where no real face corpus is at hand.
The template follows the usual 68-point layout (jaw, brows, nose, eyes,
mouth) and is left/right symmetric up to the mirror permutation.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import data
from .datasets import FaceDataset, save_image


def _ellipse(cx, cy, w, h, angles_deg):
    a = np.radians(angles_deg)
    return np.stack([cx + w * np.cos(a), cy - h * np.sin(a)], axis=1)


def template_68() -> np.ndarray:
    """Mean-shape-like template in a unit frame: x right, y down, face spans about [-1, 1]."""
    psi = np.linspace(-0.15, math.pi + 0.15, 17)
    jaw = np.stack([-0.85 * np.cos(psi), 0.95 * np.sin(psi)], axis=1)
    bx = np.linspace(-0.7, -0.15, 5)
    brow_l = np.stack([bx, -0.45 - 0.12 * np.sin(np.linspace(0.3, math.pi - 0.3, 5))], axis=1)
    brow_r = brow_l[::-1] * [-1, 1]
    bridge = np.stack([np.zeros(4), np.linspace(-0.3, 0.12, 4)], axis=1)
    nose = np.stack([np.linspace(-0.2, 0.2, 5), 0.25 + 0.04 * np.array([0, 1, 1.5, 1, 0])], axis=1)
    eye_angles = [180, 120, 60, 0, -60, -120]
    eye_l = _ellipse(-0.4, -0.25, 0.18, 0.07, eye_angles)
    eye_r = _ellipse(0.4, -0.25, 0.18, 0.07, eye_angles)
    mouth_out = _ellipse(0.0, 0.55, 0.35, 0.15, [180, 150, 120, 90, 60, 30, 0, -30, -60, -90, -120, -150])
    mouth_in = _ellipse(0.0, 0.55, 0.25, 0.06, [180, 135, 90, 45, 0, -45, -90, -135])
    pts = np.concatenate([jaw, brow_l, brow_r, bridge, nose, eye_l, eye_r, mouth_out, mouth_in])
    assert pts.shape == (68, 2)
    return pts


def random_face(rng: np.random.Generator, size: int = data.HR_SIZE, supersample: int = 4):
    """Render one face; returns ``(image HxWx3 in [0,1], landmarks 68x2)``."""
    half = rng.uniform(0.28, 0.36) * size
    angle = math.radians(rng.uniform(-15, 15))
    center = size / 2 + rng.uniform(-0.05, 0.05, 2) * size
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    shape = template_68() * (1 + rng.normal(0, 0.03, (68, 2)))
    pts = shape @ rot.T * half + center

    s = supersample
    bg = tuple(int(v) for v in rng.integers(20, 235, 3))
    skin = tuple(int(v) for v in (rng.uniform(0.55, 0.95) * np.array([255, 205, 170])))
    dark = tuple(int(v) for v in rng.integers(10, 70, 3))
    lips = tuple(int(v) for v in (rng.uniform(0.6, 0.95) * np.array([200, 70, 80])))
    im = Image.new("RGB", (size * s, size * s), bg)
    d = ImageDraw.Draw(im)

    def poly(p):
        return [tuple(q) for q in (p * s).tolist()]

    forehead = _ellipse(0, -0.2, 0.85, 0.95, np.linspace(10, 170, 12))
    outline = np.concatenate([shape[0:17], forehead])
    d.polygon(poly(outline @ rot.T * half + center), fill=skin)
    lw = max(1, int(0.03 * half * s))
    d.line(poly(pts[17:22]), fill=dark, width=lw)
    d.line(poly(pts[22:27]), fill=dark, width=lw)
    d.line(poly(pts[27:31]), fill=tuple(int(v * 0.7) for v in skin), width=lw)
    d.line(poly(pts[31:36]), fill=tuple(int(v * 0.6) for v in skin), width=lw)
    d.polygon(poly(pts[36:42]), fill=(245, 245, 245), outline=dark)
    d.polygon(poly(pts[42:48]), fill=(245, 245, 245), outline=dark)
    for eye in (pts[36:42], pts[42:48]):
        c = eye.mean(axis=0) * s
        r = 0.05 * half * s
        d.ellipse([c[0] - r, c[1] - r, c[0] + r, c[1] + r], fill=dark)
    d.polygon(poly(pts[48:60]), fill=lips)
    d.polygon(poly(pts[60:68]), fill=tuple(int(v * 0.5) for v in lips))

    img = np.asarray(im.resize((size, size), Image.LANCZOS), dtype=np.float64) / 255.0
    noise = rng.normal(0, 0.01, img.shape)
    return np.clip(img + noise, 0, 1), pts


def make_dataset(n: int, seed: int = 0, copies: int = 0, sigma: float = data.DEFAULT_SIGMA) -> FaceDataset:
    """``n`` synthetic samples, or ``n * copies`` augmented ones when ``copies > 0``."""
    samples, ids, sources = [], [], []
    for i in range(n):
        rng = data.sample_rng(seed, i)
        img, pts = random_face(rng)
        base = data.make_sample(img, pts, sigma)
        if copies:
            params = data.AugmentationParams(copies=copies)
            batch = data.augment(base, params, rng, data.PROFILES["300w"].mirror, sigma)
        else:
            batch = [base]
        for j, s in enumerate(batch):
            samples.append(s)
            ids.append(f"{i}_{j}" if copies else str(i))
            sources.append(i)
    return FaceDataset.from_samples(samples, ids, sources, "300w")


def write_corpus(out_dir, n: int, seed: int = 0, canvas: int = 200) -> Path:
    """Write ``n`` raw faces (PNG + .pts) on a larger canvas plus a manifest.

    The manifest's box column is omitted so the pipeline derives head boxes
    from the landmarks.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        img, pts = random_face(data.sample_rng(seed, i), size=canvas)
        save_image(out / f"face_{i:04d}.png", img)
        (out / f"face_{i:04d}.pts").write_text(data.format_landmark_file(pts))
        lines.append(f"face_{i:04d}.png\tface_{i:04d}.pts")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
