"""Dataset loading, synthesis, and device partitioning.

Two sources are supported: IDX image/label file pairs (big-endian headers,
magic 0x803 for images and 0x801 for labels) and a seeded synthetic
generator producing Gaussian class clusters. Covariates are scaled to
[0, 1] in both cases. Device shards are disjoint random subsets, so label
mixes across devices are naturally unbalanced.
"""

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Covariates in [0, 1] with integer labels in [0, num_classes)."""

    covariates: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        covariates = np.asarray(self.covariates, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if covariates.ndim != 2 or covariates.shape[0] < 1:
            raise ValueError("covariates must be a non-empty N x d matrix")
        if labels.shape != (covariates.shape[0],):
            raise ValueError("need one label per covariate row")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("labels out of range")
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.covariates.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.covariates[idx], self.labels[idx],
                              self.num_classes)


class IdxParseError(ValueError):
    """Malformed IDX file; the message carries the failing byte offset."""


def _read_exact(f, count, offset, path):
    data = f.read(count)
    if len(data) != count:
        raise IdxParseError(
            f"{path}: truncated, wanted {count} bytes at byte {offset}, "
            f"got {len(data)}")
    return data


def load_idx_images(path) -> np.ndarray:
    """Parse an IDX3 image file into an (N, rows*cols) float array in [0,1]."""
    with open(path, "rb") as f:
        header = _read_exact(f, 16, 0, path)
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxParseError(
                f"{path}: bad magic 0x{magic:08x} at byte 0, "
                f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        payload = _read_exact(f, count * rows * cols, 16, path)
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """Parse an IDX1 label file into an (N,) int array."""
    with open(path, "rb") as f:
        header = _read_exact(f, 8, 0, path)
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise IdxParseError(
                f"{path}: bad magic 0x{magic:08x} at byte 0, "
                f"expected 0x{IDX_LABELS_MAGIC:08x}")
        payload = _read_exact(f, count, 8, path)
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx_pair(images_path, labels_path) -> LabeledDataset:
    covariates = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if covariates.shape[0] != labels.shape[0]:
        raise IdxParseError(
            f"image count {covariates.shape[0]} does not match label count "
            f"{labels.shape[0]}")
    return LabeledDataset(covariates, labels, int(labels.max()) + 1)


def generate_synthetic(num_classes: int, dim: int, count: int,
                       rng: np.random.Generator, noise: float = 0.18,
                       spread: float = 0.25,
                       flip: float = 0.0) -> LabeledDataset:
    """Gaussian class clusters with centers spread inside the unit box.

    `flip` relabels that fraction of samples uniformly at random, modelling
    annotation noise on top of the feature noise.
    """
    if num_classes < 2 or dim < 1 or count < 1:
        raise ValueError("need num_classes >= 2, dim >= 1, count >= 1")
    if not 0.0 <= flip < 1.0:
        raise ValueError("flip must lie in [0, 1)")
    centers = 0.5 + spread * rng.standard_normal((num_classes, dim))
    labels = rng.integers(0, num_classes, size=count)
    covariates = centers[labels] + noise * rng.standard_normal((count, dim))
    covariates = np.clip(covariates, 0.0, 1.0)
    if flip > 0.0:
        flipped = rng.random(count) < flip
        labels = np.where(flipped, rng.integers(0, num_classes, size=count),
                          labels)
    return LabeledDataset(covariates, labels, num_classes)


def parse_source(descriptor: str) -> dict:
    """Split a dataset descriptor into a kind plus options.

    "synthetic" or "synthetic:classes=3,dim=16,noise=0.2,spread=0.3"
    selects the generator; "idx:<images>,<labels>" selects an IDX pair.
    """
    if descriptor.startswith("synthetic"):
        opts = {"kind": "synthetic", "classes": 2, "dim": 24,
                "noise": 0.18, "spread": 0.25, "flip": 0.0}
        _, _, tail = descriptor.partition(":")
        if tail:
            for item in tail.split(","):
                key, _, value = item.partition("=")
                key = key.strip()
                if key not in ("classes", "dim", "noise", "spread", "flip"):
                    raise ValueError(f"unknown synthetic option {key!r}")
                opts[key] = (int(value) if key in ("classes", "dim")
                             else float(value))
        return opts
    if descriptor.startswith("idx:"):
        paths = descriptor[4:].split(",")
        if len(paths) != 2:
            raise ValueError("idx source needs '<images>,<labels>'")
        return {"kind": "idx", "images": paths[0], "labels": paths[1]}
    raise ValueError(f"unknown dataset source {descriptor!r}")


def load_dataset(descriptor: str, count: int,
                 rng: np.random.Generator) -> LabeledDataset:
    """Materialize a dataset pool of at least `count` samples."""
    opts = parse_source(descriptor)
    if opts["kind"] == "synthetic":
        return generate_synthetic(opts["classes"], opts["dim"], count, rng,
                                  noise=opts["noise"], spread=opts["spread"],
                                  flip=opts["flip"])
    dataset = load_idx_pair(opts["images"], opts["labels"])
    if len(dataset) < count:
        raise ValueError(
            f"dataset holds {len(dataset)} samples, need {count}")
    return dataset


def partition_shards(dataset: LabeledDataset, num_devices: int,
                     samples_per_device: int, rng: np.random.Generator):
    """Disjoint random shards for each device plus the untouched remainder."""
    needed = num_devices * samples_per_device
    if needed > len(dataset):
        raise ValueError(
            f"cannot carve {needed} training samples out of {len(dataset)}")
    order = rng.permutation(len(dataset))
    shards = [dataset.subset(order[k * samples_per_device:
                                   (k + 1) * samples_per_device])
              for k in range(num_devices)]
    remainder = dataset.subset(order[needed:])
    return shards, remainder
