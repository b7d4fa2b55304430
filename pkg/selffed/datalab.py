"""
Datasets, non-IID partitioning and image-file I/O.

Usage:
    data = synth_dataset(num_classes=2, per_class=200, image_size=32, channels=3, noise=0.1, rng=rng)
    train, test = split_train_test(data, 0.2, rng)
    plan = dirichlet_partition(train, num_clients=5, delta=0.5, rng=rng)
    shards = plan.shards(train)
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    FractionOutOfRangeError,
    SizeMismatchError,
    TooFewSamplesError,
    UnknownLabelError,
    UnreadableImageError,
)
from .logging import get_logger

logger = get_logger("datalab")

UNLABELED = -1  # label value of samples whose label is hidden


@dataclass
class Dataset:
    """Images in [0, 1] as (N, H, W, C) with labels and unique sample ids."""
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError(
                f"Dataset length mismatch: {len(self.images)} images, "
                f"{len(self.labels)} labels, {len(self.ids)} ids"
            )
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("Sample ids must be unique")
        if np.any(self.labels >= self.num_classes) or np.any(self.labels < UNLABELED):
            raise ValueError(f"Labels must be below {self.num_classes}")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, positions, split: Optional[str] = None) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            images=self.images[positions],
            labels=self.labels[positions],
            ids=self.ids[positions],
            num_classes=self.num_classes,
            split=split or self.split,
        )

    def select_ids(self, ids: Sequence[int]) -> "Dataset":
        where = {int(i): p for p, i in enumerate(self.ids)}
        return self.subset([where[int(i)] for i in ids])

    def hide_labels(self) -> "Dataset":
        return Dataset(self.images, np.full(len(self), UNLABELED), self.ids, self.num_classes, self.split)

    def class_counts(self) -> np.ndarray:
        known = self.labels[self.labels >= 0]
        return np.bincount(known, minlength=self.num_classes)

    @classmethod
    def empty(cls, image_size: int, channels: int, num_classes: int, split: str = "train") -> "Dataset":
        return cls(
            images=np.zeros((0, image_size, image_size, channels)),
            labels=np.zeros(0, dtype=np.int64),
            ids=np.zeros(0, dtype=np.int64),
            num_classes=num_classes,
            split=split,
        )


# -- synthetic data ---------------------------------------------------------

SHAPES = ("disc", "cross", "square", "ring", "hbar", "vbar", "triangle", "diagonal")


def render_shape(kind: str, size: int, radius: float, center: Tuple[float, float]) -> np.ndarray:
    """Boolean (size, size) footprint of one procedural shape."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dy, dx = yy - center[0], xx - center[1]
    r = radius
    t = r / 3.0
    dist2 = dy * dy + dx * dx
    if kind == "disc":
        return dist2 <= r * r
    if kind == "cross":
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * r
    if kind == "ring":
        return (dist2 <= r * r) & (dist2 >= (0.6 * r) ** 2)
    if kind == "hbar":
        return (np.abs(dy) <= t) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= t) & (np.abs(dy) <= r)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "diagonal":
        return (np.abs(dy - dx) <= t) & (np.maximum(np.abs(dy), np.abs(dx)) <= r)
    raise ValueError(f"Unknown shape: {kind}")


def synth_dataset(
    num_classes: int,
    per_class: int,
    image_size: int,
    channels: int,
    noise: float,
    rng: np.random.Generator,
    split: str = "train",
) -> Dataset:
    """
    Procedural shapes, one per class, placed at random integer offsets.

    Class k draws shape SHAPES[k % 8]; classes beyond eight also dim one
    channel. With noise 0 every image of a class is an exact translate of
    the class template.
    """
    if num_classes < 2:
        raise ValueError("Synthetic datasets need at least 2 classes")
    radius = 0.3 * image_size
    slack = max(0, int(image_size / 2 - radius - 1))
    mid = (image_size - 1) / 2.0

    images, labels = [], []
    for k in range(num_classes):
        tint = np.ones(channels)
        if k >= len(SHAPES):
            tint[(k // len(SHAPES)) % channels] = 0.5
        for _ in range(per_class):
            oy, ox = rng.integers(-slack, slack + 1, size=2)
            mask = render_shape(SHAPES[k % len(SHAPES)], image_size, radius, (mid + oy, mid + ox))
            img = mask[..., None] * tint[None, None, :]
            if noise > 0:
                img = img + rng.normal(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(k)

    return Dataset(
        images=np.stack(images).astype(np.float64),
        labels=np.asarray(labels),
        ids=np.arange(len(labels)),
        num_classes=num_classes,
        split=split,
    )


def split_train_test(dataset: Dataset, test_fraction: float, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Class-stratified split; both parts keep ascending id order."""
    if not 0.0 < test_fraction < 1.0:
        raise FractionOutOfRangeError(f"Test fraction must lie in (0, 1), got {test_fraction}")
    test_pos: List[int] = []
    for k in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == k)
        take = int(round(test_fraction * len(members)))
        test_pos.extend(rng.permutation(members)[:take].tolist())
    test_mask = np.zeros(len(dataset), dtype=bool)
    test_mask[test_pos] = True
    return (
        dataset.subset(np.flatnonzero(~test_mask), split="train"),
        dataset.subset(np.flatnonzero(test_mask), split="test"),
    )


# -- partitioning -----------------------------------------------------------

def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total`, closest to `shares * total`."""
    raw = np.asarray(shares, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


@dataclass
class PartitionPlan:
    """Class-to-client proportions (rows sum to 1) and the realized assignment."""
    num_clients: int
    delta: float
    proportions: np.ndarray  # (num_classes, num_clients)
    assignment: List[np.ndarray]  # sorted sample ids per client
    class_counts: np.ndarray  # (num_clients, num_classes)
    attempts: int = 1

    @property
    def sizes(self) -> List[int]:
        return [len(a) for a in self.assignment]

    def shards(self, dataset: Dataset) -> List[Dataset]:
        return [dataset.select_ids(ids) for ids in self.assignment]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_clients": self.num_clients,
            "delta": self.delta,
            "proportions": self.proportions.tolist(),
            "class_counts": self.class_counts.tolist(),
            "clients": {str(m): ids.tolist() for m, ids in enumerate(self.assignment)},
        }


def dirichlet_partition(
    dataset: Dataset,
    num_clients: int,
    delta: float,
    rng: np.random.Generator,
    size_multipliers: Optional[Sequence[float]] = None,
    min_samples: int = 0,
    max_attempts: int = 100,
) -> PartitionPlan:
    """
    Label-skewed split: for each class draw rho ~ Dir_M(delta) and hand the
    class's samples out in those proportions (largest-remainder rounding).

    `size_multipliers` adds quantity skew by reweighting each rho row.
    Draws repeat until every client holds `min_samples`.
    """
    if num_clients < 1:
        raise ValueError("Need at least one client")
    if delta <= 0:
        raise ValueError(f"Dirichlet concentration must be positive, got {delta}")
    if len(dataset) < num_clients * min_samples:
        raise TooFewSamplesError(
            f"{len(dataset)} samples cannot give {num_clients} clients {min_samples} each"
        )
    members = [np.flatnonzero(dataset.labels == k) for k in range(dataset.num_classes)]
    for k, m in enumerate(members):
        if len(m) == 0:
            raise TooFewSamplesError(f"Class {k} has no samples to partition")
    weights = None
    if size_multipliers is not None and len(size_multipliers):
        weights = np.asarray(size_multipliers, dtype=np.float64)
        if weights.shape != (num_clients,):
            raise ValueError("Need one size multiplier per client")

    for attempt in range(1, max_attempts + 1):
        rho = rng.dirichlet(np.full(num_clients, float(delta)), size=dataset.num_classes)
        if weights is not None:
            rho = rho * weights
            rho = rho / rho.sum(axis=1, keepdims=True)

        assigned: List[List[int]] = [[] for _ in range(num_clients)]
        counts = np.zeros((num_clients, dataset.num_classes), dtype=np.int64)
        for k, positions in enumerate(members):
            shuffled = rng.permutation(positions)
            per_client = largest_remainder(rho[k], len(positions))
            bounds = np.concatenate([[0], np.cumsum(per_client)])
            for m in range(num_clients):
                chunk = shuffled[bounds[m]: bounds[m + 1]]
                assigned[m].extend(dataset.ids[chunk].tolist())
                counts[m, k] = len(chunk)

        if min(len(a) for a in assigned) >= min_samples:
            return PartitionPlan(
                num_clients=num_clients,
                delta=float(delta),
                proportions=rho,
                assignment=[np.sort(np.asarray(a, dtype=np.int64)) for a in assigned],
                class_counts=counts,
                attempts=attempt,
            )
        logger.debug(f"Partition draw {attempt} left a client under {min_samples} samples; redrawing")

    raise TooFewSamplesError(f"No draw in {max_attempts} attempts gave every client {min_samples} samples")


@dataclass
class HeterogeneityScore:
    mean_entropy: float  # nats; ln(num_classes) for an IID split
    max_tv: float  # largest pairwise total-variation distance
    per_client_entropy: List[float] = field(default_factory=list)


def heterogeneity_score(plan: PartitionPlan) -> HeterogeneityScore:
    """Label-distribution entropy per client and the worst pairwise TV distance."""
    hists = [row / row.sum() for row in plan.class_counts.astype(np.float64) if row.sum() > 0]
    entropies = []
    for p in hists:
        nz = p[p > 0]
        entropies.append(float(-(nz * np.log(nz)).sum()))
    max_tv = 0.0
    for a in range(len(hists)):
        for b in range(a + 1, len(hists)):
            max_tv = max(max_tv, 0.5 * float(np.abs(hists[a] - hists[b]).sum()))
    return HeterogeneityScore(
        mean_entropy=float(np.mean(entropies)) if entropies else 0.0,
        max_tv=max_tv,
        per_client_entropy=entropies,
    )


def subsample_labels(shard: Dataset, fraction: float, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """
    Keep labels on a class-stratified ceil(fraction * |shard|) subset.

    Returns (labeled, unlabeled); the unlabeled part has its labels hidden.
    """
    if not 0.0 < fraction <= 1.0:
        raise FractionOutOfRangeError(f"Label fraction must lie in (0, 1], got {fraction}")
    total = min(len(shard), int(math.ceil(fraction * len(shard) - 1e-9)))
    counts = shard.class_counts()
    quota = fraction * counts
    take = np.floor(quota + 1e-9).astype(np.int64)
    short = total - int(take.sum())
    if short > 0:
        order = np.argsort(-(quota - take), kind="stable")
        take[order[:short]] += 1

    chosen: List[int] = []
    for k in range(shard.num_classes):
        members = np.flatnonzero(shard.labels == k)
        chosen.extend(rng.permutation(members)[: take[k]].tolist())
    mask = np.zeros(len(shard), dtype=bool)
    mask[chosen] = True
    labeled = shard.subset(np.flatnonzero(mask))
    unlabeled = shard.subset(np.flatnonzero(~mask)).hide_labels()
    return labeled, unlabeled


def export_partition(plan: PartitionPlan, path: Union[str, Path]) -> Path:
    """Write the client -> sample id manifest plus the rho matrix as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_dict(), indent=2))
    return path


# -- PGM / PPM --------------------------------------------------------------

def _read_token(blob: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise UnreadableImageError("Truncated PNM header")
    return blob[start:pos], pos


def read_pnm(path: Union[str, Path]) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) to an (H, W, C) float array in [0, 1]."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise UnreadableImageError(f"{path}: {e}") from None
    try:
        magic, pos = _read_token(blob, 0)
        if magic not in (b"P5", b"P6"):
            raise UnreadableImageError(f"{path}: not a binary PGM/PPM file")
        width, pos = _read_token(blob, pos)
        height, pos = _read_token(blob, pos)
        maxval, pos = _read_token(blob, pos)
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise UnreadableImageError(f"{path}: malformed header") from None
    if not 0 < maxval < 65536:
        raise UnreadableImageError(f"{path}: maxval {maxval} out of range")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = blob[pos: pos + count * dtype.itemsize]
    if len(raster) < count * dtype.itemsize:
        raise UnreadableImageError(f"{path}: truncated raster")
    pixels = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    return pixels.reshape(height, width, channels) / maxval


def write_pnm(path: Union[str, Path], image: np.ndarray) -> Path:
    """8-bit P5 (one channel) or P6 (three channels)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    height, width, channels = image.shape
    if channels not in (1, 3):
        raise SizeMismatchError(f"PNM holds 1 or 3 channels, got {channels}")
    magic = b"P5" if channels == 1 else b"P6"
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + f"\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def load_folder(
    folder: Union[str, Path],
    manifest: Union[str, Path],
    image_size: int,
    channels: int,
    num_classes: int,
    classes: Sequence[str] = (),
) -> Dataset:
    """
    Load images listed in a CSV manifest of ``file,label`` rows.

    Labels are class names from `classes` or, when none are given, integer
    class indices. An optional ``file,label`` header row and ``#`` comment
    lines are skipped.
    """
    folder = Path(folder)
    names = {name: k for k, name in enumerate(classes)}
    images, labels = [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or [c.strip() for c in row] == ["file", "label"]:
                continue
            if len(row) != 2:
                raise UnknownLabelError(f"Manifest row needs file and label: {row}")
            filename, label = row[0].strip(), row[1].strip()
            if names:
                if label not in names:
                    raise UnknownLabelError(label)
                k = names[label]
            else:
                try:
                    k = int(label)
                except ValueError:
                    raise UnknownLabelError(label) from None
                if not 0 <= k < num_classes:
                    raise UnknownLabelError(label)
            img = read_pnm(folder / filename)
            if img.shape != (image_size, image_size, channels):
                raise SizeMismatchError(
                    f"{filename}: {img.shape} does not match ({image_size}, {image_size}, {channels})"
                )
            images.append(img)
            labels.append(k)

    if not images:
        return Dataset.empty(image_size, channels, num_classes)
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels),
        ids=np.arange(len(labels)),
        num_classes=num_classes,
    )
