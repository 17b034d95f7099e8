"""Dataset ingestion and identity-balanced batch sampling.

Market-1501 style directory layout is assumed for all on-disk datasets:
`bounding_box_train/`, `query/`, `bounding_box_test/`. The synthetic layout
re-uses it and adds a `cues.json` ground-truth file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (EmptySplit, InsufficientIdentities, MalformedFilename,
                     MissingDirectory)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")

# Market-1501: {pid}_c{cam}s{seq}_{frame}_{bbox}.{ext}, pid may be -1 (junk).
_MARKET_RE = re.compile(r"^(-1|\d{4})_c(\d+)s(\d+)_(\d+)_(\d+)\.(\w+)$")
# DukeMTMC-reID: {pid}_c{cam}_f{frame}.{ext}
_DUKE_RE = re.compile(r"^(-?\d+)_c(\d+)_f(\d+)\.(\w+)$")


def parse_market_filename(name: str) -> tuple[int, int]:
    """Parse (pid, cam_id) from a Market-1501 style filename."""
    m = _MARKET_RE.match(name)
    if m is None:
        raise MalformedFilename(f"not a Market-1501 style filename: {name!r}")
    return int(m.group(1)), int(m.group(2))


def format_market_filename(pid: int, cam_id: int, seq: int = 1,
                           frame: int = 0, bbox: int = 0, ext: str = "png") -> str:
    pid_part = "-1" if pid == -1 else f"{pid:04d}"
    return f"{pid_part}_c{cam_id}s{seq}_{frame:06d}_{bbox:02d}.{ext}"


def _parse_any(name: str, layout: str) -> tuple[int, int]:
    if layout == "duke":
        m = _DUKE_RE.match(name)
        if m is not None:
            return int(m.group(1)), int(m.group(2))
    return parse_market_filename(name)


@dataclass(frozen=True)
class IndexEntry:
    path: str
    pid: int
    cam_id: int
    role: str  # train | query | gallery


@dataclass
class DatasetIndex:
    entries: list[IndexEntry]
    pid_map: dict[int, int]  # raw train pid -> contiguous label
    layout: str
    root: str

    @property
    def num_classes(self) -> int:
        return len(self.pid_map)

    def split(self, role: str) -> list[IndexEntry]:
        return [e for e in self.entries if e.role == role]

    def label_of(self, entry: IndexEntry) -> int:
        return self.pid_map[entry.pid]


_SPLIT_DIRS = {"train": "bounding_box_train", "query": "query",
               "gallery": "bounding_box_test"}


def build_index(root: str | Path, layout: str) -> DatasetIndex:
    """Scan a dataset root into an index with contiguous training labels.

    Junk gallery entries (pid -1) are retained and flagged; junk files in the
    train split are skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingDirectory(f"dataset root not found: {root}")
    entries: list[IndexEntry] = []
    for role, dirname in _SPLIT_DIRS.items():
        split_dir = root / dirname
        if not split_dir.is_dir():
            raise MissingDirectory(f"missing split directory: {split_dir}")
        usable = 0
        for path in sorted(split_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            pid, cam_id = _parse_any(path.name, layout)
            if role == "train" and pid == -1:
                continue
            entries.append(IndexEntry(str(path), pid, cam_id, role))
            if pid != -1:
                usable += 1
        if usable == 0:
            raise EmptySplit(f"no usable images in {split_dir}")
    train_pids = sorted({e.pid for e in entries if e.role == "train"})
    pid_map = {pid: label for label, pid in enumerate(train_pids)}
    return DatasetIndex(entries=entries, pid_map=pid_map, layout=layout, root=str(root))


@dataclass
class Batch:
    images: np.ndarray   # N,3,H,W float32 in [0,1]
    pids: np.ndarray     # N raw identity ids
    labels: np.ndarray   # N contiguous training labels
    cam_ids: np.ndarray  # N


class IdentityBalancedSampler:
    """Yields batches of P identities x Q instances drawn from the train split.

    Identities with fewer than Q images are completed by resampling with
    replacement. The sequence of batches is a deterministic function of the
    generator state.
    """

    def __init__(self, index: DatasetIndex, p: int, q: int,
                 rng: np.random.Generator):
        self.p = p
        self.q = q
        self.rng = rng
        by_pid: dict[int, list[int]] = {}
        train_entries = []
        for e in index.entries:
            if e.role != "train":
                continue
            by_pid.setdefault(e.pid, []).append(len(train_entries))
            train_entries.append(e)
        if len(by_pid) < p:
            raise InsufficientIdentities(
                f"need {p} train identities, found {len(by_pid)}")
        self.entries = train_entries
        self.pids = sorted(by_pid)
        self.by_pid = {pid: np.asarray(idxs) for pid, idxs in by_pid.items()}

    def sample_indices(self) -> list[int]:
        chosen_pids = self.rng.choice(len(self.pids), size=self.p, replace=False)
        batch: list[int] = []
        for pi in chosen_pids:
            pool = self.by_pid[self.pids[int(pi)]]
            if len(pool) >= self.q:
                picks = self.rng.choice(len(pool), size=self.q, replace=False)
            else:
                picks = self.rng.integers(0, len(pool), size=self.q)
            batch.extend(int(pool[int(k)]) for k in picks)
        return batch


def load_image(path: str | Path, height: int, width: int) -> np.ndarray:
    """Decode an image to a (3, height, width) float32 array in [0, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (width, height):
            img = img.resize((width, height), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def augment_image(img: np.ndarray, rng: np.random.Generator,
                  pad: int = 10) -> np.ndarray:
    """Random horizontal flip plus random crop with zero padding."""
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    _, h, w = img.shape
    padded = np.zeros((3, h + 2 * pad, w + 2 * pad), dtype=img.dtype)
    padded[:, pad:pad + h, pad:pad + w] = img
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return np.ascontiguousarray(padded[:, top:top + h, left:left + w])


class TrainLoader:
    """Materializes sampled index batches into augmented image batches."""

    def __init__(self, index: DatasetIndex, height: int, width: int,
                 p: int, q: int, rng: np.random.Generator, augment: bool = True):
        self.index = index
        self.height = height
        self.width = width
        self.augment = augment
        self.rng = rng
        self.sampler = IdentityBalancedSampler(index, p, q, rng)
        self._cache: dict[str, np.ndarray] = {}

    def _image(self, path: str) -> np.ndarray:
        img = self._cache.get(path)
        if img is None:
            img = load_image(path, self.height, self.width)
            self._cache[path] = img
        return img

    def next_batch(self) -> Batch:
        picks = self.sampler.sample_indices()
        entries = [self.sampler.entries[i] for i in picks]
        images = np.empty((len(entries), 3, self.height, self.width), dtype=np.float32)
        for n, e in enumerate(entries):
            img = self._image(e.path)
            images[n] = augment_image(img, self.rng) if self.augment else img
        pids = np.asarray([e.pid for e in entries], dtype=np.int64)
        labels = np.asarray([self.index.label_of(e) for e in entries], dtype=np.int64)
        cams = np.asarray([e.cam_id for e in entries], dtype=np.int64)
        return Batch(images=images, pids=pids, labels=labels, cam_ids=cams)


def load_split(index: DatasetIndex, role: str, height: int, width: int,
               include_junk: bool = True):
    """Load a full split as (images, pids, cam_ids) without augmentation."""
    entries = [e for e in index.split(role) if include_junk or e.pid != -1]
    images = np.empty((len(entries), 3, height, width), dtype=np.float32)
    for n, e in enumerate(entries):
        images[n] = load_image(e.path, height, width)
    pids = np.asarray([e.pid for e in entries], dtype=np.int64)
    cams = np.asarray([e.cam_id for e in entries], dtype=np.int64)
    return images, pids, cams
