"""Manifests, image I/O, and the prepared-sample archive."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import data

log = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"JASRNET-DATA-1\n"
DATA_ROOT_ENV = "JASRNET_DATA_ROOT"
FIELDS = ("hr", "lr", "landmarks", "heatmaps", "face_box", "visible")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image) -> None:
    Image.fromarray(to_uint8(image)).save(path)


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    annotation: Path
    box: Optional[tuple] = None
    line_no: int = 0


def read_manifest(path, root=None) -> list:
    """One record per line: ``image<TAB>annotation[<TAB>x0<TAB>y0<TAB>x1<TAB>y1]``.

    Relative paths resolve against ``root``, else ``$JASRNET_DATA_ROOT``, else
    the manifest's directory. Blank lines and ``#`` comments are skipped.
    """
    path = Path(path)
    base = Path(root or os.environ.get(DATA_ROOT_ENV) or path.parent)
    out = []
    for no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) not in (2, 6):
            raise ValueError(f"{path}:{no}: expected 2 or 6 tab-separated fields, got {len(cols)}")
        box = None
        if len(cols) == 6:
            try:
                box = tuple(float(v) for v in cols[2:])
            except ValueError:
                raise ValueError(f"{path}:{no}: non-numeric box {cols[2:]}") from None
        out.append(ManifestRecord(base / cols[0], base / cols[1], box, no))
    return out


class FaceDataset:
    """Stacked arrays for a split. Images are ``N x H x W x 3`` float32."""

    def __init__(self, hr, lr, landmarks, heatmaps, face_box, visible, ids=None, sources=None,
                 profile="custom"):
        self.hr = np.asarray(hr, dtype=np.float32)
        self.lr = np.asarray(lr, dtype=np.float32)
        self.landmarks = np.asarray(landmarks, dtype=np.float32)
        self.heatmaps = np.asarray(heatmaps, dtype=np.float32)
        self.face_box = np.asarray(face_box, dtype=np.float32).reshape(-1, 4)
        self.visible = np.asarray(visible, dtype=np.float32)
        n = len(self.hr)
        self.ids = list(ids) if ids is not None else [str(i) for i in range(n)]
        self.sources = np.asarray(sources if sources is not None else np.arange(n), dtype=np.int64)
        self.profile = profile
        for name in FIELDS:
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has {len(getattr(self, name))} records, expected {n}")

    def __len__(self):
        return len(self.hr)

    @property
    def num_landmarks(self) -> int:
        return self.landmarks.shape[1]

    @classmethod
    def from_samples(cls, samples, ids=None, sources=None, profile="custom"):
        return cls(
            hr=[s.hr for s in samples],
            lr=[s.lr for s in samples],
            landmarks=[s.landmarks for s in samples],
            heatmaps=[s.heatmaps for s in samples],
            face_box=[s.face_box for s in samples],
            visible=[s.visible for s in samples],
            ids=ids, sources=sources, profile=profile,
        )

    def subset(self, indices) -> "FaceDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return FaceDataset(
            *(getattr(self, f)[idx] for f in FIELDS),
            ids=[self.ids[i] for i in idx], sources=self.sources[idx], profile=self.profile)

    def sample(self, i) -> data.FaceSample:
        return data.FaceSample(self.hr[i].astype(np.float64), self.lr[i].astype(np.float64),
                               self.landmarks[i].astype(np.float64), self.heatmaps[i].astype(np.float64),
                               tuple(float(v) for v in self.face_box[i]), self.visible[i] > 0.5)

    def holdout_split(self, fraction: float = 0.1, seed: int = 0):
        """Split by source record so augmented copies of one face never straddle splits."""
        uniq = np.unique(self.sources)
        n_val = int(round(fraction * len(uniq)))
        if len(uniq) > 1:
            n_val = min(max(n_val, 1), len(uniq) - 1)
        else:
            n_val = 0
        rng = np.random.default_rng([int(seed), 0x5EED])
        val_sources = set(rng.permutation(uniq)[:n_val].tolist())
        mask = np.array([s in val_sources for s in self.sources])
        return self.subset(np.flatnonzero(~mask)), self.subset(np.flatnonzero(mask))

    # -- archive ---------------------------------------------------------

    def save(self, path) -> None:
        shapes = {f: list(getattr(self, f).shape[1:]) for f in FIELDS}
        header = {
            "format": ARCHIVE_MAGIC.decode().strip(),
            "profile": self.profile,
            "count": len(self),
            "fields": [[f, shapes[f]] for f in FIELDS],
            "ids": self.ids,
            "sources": self.sources.tolist(),
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        flat = [getattr(self, f).reshape(len(self), -1) for f in FIELDS]
        records = np.concatenate(flat, axis=1).astype("<f4") if len(self) else np.zeros((0,), "<f4")
        with open(path, "wb") as fh:
            fh.write(ARCHIVE_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(records.tobytes())

    @classmethod
    def load(cls, path) -> "FaceDataset":
        with open(path, "rb") as fh:
            if fh.read(len(ARCHIVE_MAGIC)) != ARCHIVE_MAGIC:
                raise ValueError(f"{path}: not a prepared-sample archive")
            (n_header,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n_header))
            payload = np.frombuffer(fh.read(), dtype="<f4")
        count = header["count"]
        sizes = [int(np.prod(shape)) for _, shape in header["fields"]]
        if payload.size != count * sum(sizes):
            raise ValueError(f"{path}: truncated archive")
        table = payload.reshape(count, sum(sizes))
        arrays = {}
        offset = 0
        for (name, shape), size in zip(header["fields"], sizes):
            arrays[name] = table[:, offset:offset + size].reshape(count, *shape)
            offset += size
        return cls(**arrays, ids=header["ids"], sources=header["sources"], profile=header["profile"])


def load_record(record: ManifestRecord, profile: data.DatasetProfile,
                sigma: float = data.DEFAULT_SIGMA) -> data.FaceSample:
    """Read one manifest record and turn it into a 128x128 sample."""
    image = load_image(record.image)
    pts = data.parse_landmark_file(Path(record.annotation).read_text(), profile.num_landmarks)
    box = record.box
    if box is None:
        box = head_box_from_landmarks(pts)
    hr, tf = data.crop_and_resize(image, box, data.HR_SIZE)
    return data.make_sample(hr, tf.apply(pts), sigma)


def head_box_from_landmarks(pts, margin: float = 0.25) -> tuple:
    """Square box around the landmarks, grown by ``margin`` of its side."""
    pts = np.asarray(pts, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2
    half = max(hi - lo) * (1 + 2 * margin) / 2
    half = max(half, 1.0)
    return (center[0] - half, center[1] - half, center[0] + half, center[1] + half)


def prepare(records, profile: data.DatasetProfile, seed: int = 0,
            params: Optional[data.AugmentationParams] = None, sigma: float = data.DEFAULT_SIGMA):
    """Build a dataset from manifest records.

    With ``params`` every record yields ``params.copies`` augmented samples;
    without, each record yields its un-augmented sample. Returns the dataset
    and a list of ``(record, error message)`` for records that failed.
    """
    if params is not None and params.flip_probability > 0 and profile.mirror is None:
        raise data.ConfigurationError(
            f"profile {profile.name} has no mirror permutation; set flip_probability to 0")
    samples, ids, sources, errors = [], [], [], []
    for i, rec in enumerate(records):
        try:
            base = load_record(rec, profile, sigma)
        except (OSError, ValueError) as exc:
            log.error("record %d (%s): %s", rec.line_no, rec.annotation, exc)
            errors.append((rec, str(exc)))
            continue
        if params is None:
            samples.append(base)
            ids.append(f"{i}")
            sources.append(i)
            continue
        copies = data.augment(base, params, data.sample_rng(seed, i), profile.mirror, sigma)
        for j, s in enumerate(copies):
            samples.append(s)
            ids.append(f"{i}_{j}")
            sources.append(i)
    if not samples:
        return None, errors
    return FaceDataset.from_samples(samples, ids, sources, profile.name), errors
