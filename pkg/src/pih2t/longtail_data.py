"""Long-tailed class profiles, datasets, dual-branch samplers and partitioned metrics."""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "ClassProfile",
    "PartitionSpec",
    "Partition",
    "BranchKind",
    "LabeledDataset",
    "MetricsReport",
    "build_exponential_profile",
    "build_pareto_profile",
    "balanced_profile",
    "subsample_longtail",
    "branch_probabilities",
    "make_sampler",
    "epoch_batches",
    "partition_classes",
    "partition_metrics",
    "class_means",
    "synth_gaussian_longtail",
    "save_dataset",
    "load_dataset",
    "write_profile_csv",
    "read_profile_csv",
]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ClassProfile:
    """Per-class sample counts, sorted from the largest class to the smallest."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise ValueError("a profile needs at least one class")
        if counts[-1] < 1:
            raise ValueError(f"every class needs at least one sample, got {counts[-1]}")
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise ValueError("class counts must be non-increasing")

    @property
    def class_count(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def imbalance_factor(self) -> float:
        return self.counts[0] / self.counts[-1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)


@dataclass(frozen=True)
class PartitionSpec:
    """Count thresholds: head is ``n > head_min``, tail is ``n <= tail_max``."""

    head_min: int = 100
    tail_max: int = 20

    def __post_init__(self):
        if not self.tail_max < self.head_min:
            raise ValueError("tail_max must be smaller than head_min")


@dataclass(frozen=True)
class Partition:
    head: frozenset[int]
    medium: frozenset[int]
    tail: frozenset[int]

    def group_of(self, class_index: int) -> str:
        for name in ("head", "medium", "tail"):
            if class_index in getattr(self, name):
                return name
        raise KeyError(class_index)


class BranchKind(str, enum.Enum):
    BALANCED = "balanced"
    INSTANCE = "instance"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Inputs with integer labels in ``0..class_count-1``.

    ``inputs`` has one row per item; trailing axes are the per-item shape
    (a flat vector, or ``channels x height x width`` for images). Classes
    may be absent (e.g. a small evaluation set); ``profile`` then raises.
    """

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    counts: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or len(labels) != len(self.inputs):
            raise ValueError("labels must be a vector with one entry per input row")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError("label outside 0..class_count-1")
        object.__setattr__(self, "labels", labels)
        counts = np.bincount(labels, minlength=self.class_count)
        object.__setattr__(self, "counts", tuple(counts.tolist()))

    @property
    def profile(self) -> ClassProfile:
        return ClassProfile(self.counts)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def item_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.class_count)]


# ---------------------------------------------------------------------------
# profiles


def build_exponential_profile(base_count: int, class_count: int, imbalance_factor: float) -> ClassProfile:
    """Exponentially decaying counts ``n_i = base * lam**i`` with ``n_0 / n_{C-1} = rho``.

    ``lam`` is solved as ``rho ** (-1 / (C - 1))``, so (500, 100, 100) runs
    from 500 down to 5.
    """
    if base_count < 1:
        raise ValueError("base_count must be >= 1")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if not imbalance_factor >= 1:
        raise ValueError(f"imbalance factor must be >= 1, got {imbalance_factor}")
    lam = imbalance_factor ** (-1.0 / (class_count - 1))
    raw = [base_count * lam**i for i in range(class_count)]
    if _round_half_up(raw[-1]) < 1:
        raise ValueError(
            f"smallest class rounds to zero: base_count={base_count} / imbalance_factor="
            f"{imbalance_factor} = {raw[-1]:.3g}"
        )
    return ClassProfile(tuple(max(1, _round_half_up(x)) for x in raw))


def build_pareto_profile(max_count: int, min_count: int, class_count: int, power: float) -> ClassProfile:
    """Power-law profile ``(1 + i) ** (-1 / power)`` pinned to both endpoints."""
    if not power > 0:
        raise ValueError(f"power must be positive, got {power}")
    if not max_count >= min_count >= 1:
        raise ValueError("need max_count >= min_count >= 1")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if max_count == min_count:
        return ClassProfile((max_count,) * class_count)
    g = (1.0 + np.arange(class_count)) ** (-1.0 / power)
    unit = (g - g[-1]) / (g[0] - g[-1])
    counts = [min(max_count, max(min_count, _round_half_up(min_count + (max_count - min_count) * u))) for u in unit]
    return ClassProfile(tuple(counts))


def balanced_profile(count: int, class_count: int) -> ClassProfile:
    return ClassProfile((count,) * class_count)


def write_profile_csv(profile: ClassProfile, path: str | os.PathLike, comment: str | None = None) -> None:
    """``class_index,count`` rows, optionally preceded by a ``# comment`` line."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_index", "count"])
        for i, n in enumerate(profile.counts):
            writer.writerow([i, n])


def read_profile_csv(path: str | os.PathLike) -> ClassProfile:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    rows.sort(key=lambda r: int(r["class_index"]))
    if [int(r["class_index"]) for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: class indices must be 0..C-1 without gaps")
    return ClassProfile(tuple(int(r["count"]) for r in rows))


# ---------------------------------------------------------------------------
# datasets


def subsample_longtail(source: LabeledDataset, profile: ClassProfile, seed: int) -> LabeledDataset:
    """Draw ``profile.counts[i]`` items of class ``i`` without replacement, then shuffle."""
    if profile.class_count != source.class_count:
        raise ValueError("profile and source disagree on the number of classes")
    rng = np.random.default_rng(seed)
    picked = []
    for c, (idx, want) in enumerate(zip(source.class_indices(), profile.counts)):
        if len(idx) < want:
            raise ValueError(f"class {c}: source has {len(idx)} items, profile needs {want}")
        picked.append(rng.permutation(idx)[:want])
    order = np.concatenate(picked)[rng.permutation(profile.total)]
    return LabeledDataset(source.inputs[order], source.labels[order], source.class_count)


def class_means(class_count: int, dim: int, mean_separation: float) -> np.ndarray:
    """Class centres on the sphere of radius ``mean_separation``.

    The placement depends only on ``(class_count, dim)`` so that training and
    test sets drawn with different seeds share their centres. With
    ``class_count <= dim`` the centres are mutually orthogonal.
    """
    rng = np.random.default_rng(20240101 + 1000 * dim + class_count)
    if class_count <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        directions = q[:, :class_count].T
    else:
        directions = rng.standard_normal((class_count, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return mean_separation * directions


def synth_gaussian_longtail(
    class_count: int,
    dim: int,
    profile: ClassProfile,
    mean_separation: float,
    noise_scale: float,
    seed: int,
) -> LabeledDataset:
    """Isotropic Gaussian clusters around :func:`class_means`, sized by ``profile``."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if not mean_separation > 0 or not noise_scale > 0:
        raise ValueError("mean_separation and noise_scale must be positive")
    if profile.class_count != class_count:
        raise ValueError("profile.class_count does not match class_count")
    means = class_means(class_count, dim, mean_separation)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(class_count), profile.counts)
    inputs = means[labels] + noise_scale * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return LabeledDataset(inputs[order], labels[order], class_count)


# On-disk layout: manifest.txt (key=value lines), inputs.bin (little-endian
# float32, row-major, n_samples x dim), labels.bin (little-endian int32).
_MANIFEST = "manifest.txt"
_INPUTS = "inputs.bin"
_LABELS = "labels.bin"


def save_dataset(dataset: LabeledDataset, directory: str | os.PathLike, seed: int, **extra: object) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat = np.ascontiguousarray(dataset.inputs.reshape(len(dataset), -1), dtype="<f4")
    manifest = {
        "class_count": dataset.class_count,
        "counts": ",".join(str(c) for c in dataset.counts),
        "dim": flat.shape[1],
        "seed": seed,
        "n_samples": len(dataset),
        "inputs": f"{_INPUTS} float32 little-endian row-major",
        "labels": f"{_LABELS} int32 little-endian",
    }
    if len(dataset.item_shape) > 1:
        manifest["item_shape"] = "x".join(str(s) for s in dataset.item_shape)
    manifest.update(extra)
    (directory / _INPUTS).write_bytes(flat.tobytes())
    (directory / _LABELS).write_bytes(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
    text = "".join(f"{k}={v}\n" for k, v in manifest.items())
    (directory / _MANIFEST).write_text(text)
    return directory


def read_manifest(directory: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in (Path(directory) / _MANIFEST).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_dataset(directory: str | os.PathLike) -> LabeledDataset:
    """Read a dataset written by :func:`save_dataset`; inputs come back as float64."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    dim = int(manifest["dim"])
    inputs = np.frombuffer((directory / _INPUTS).read_bytes(), dtype="<f4").astype(np.float64)
    labels = np.frombuffer((directory / _LABELS).read_bytes(), dtype="<i4").astype(np.int64)
    inputs = inputs.reshape(-1, dim)
    if "item_shape" in manifest:
        inputs = inputs.reshape(-1, *(int(s) for s in manifest["item_shape"].split("x")))
    ds = LabeledDataset(inputs, labels, int(manifest["class_count"]))
    declared = tuple(int(c) for c in manifest["counts"].split(","))
    if declared != ds.counts:
        raise ValueError(f"{directory}: manifest counts {declared} do not match labels {ds.counts}")
    return ds


# ---------------------------------------------------------------------------
# samplers


def branch_probabilities(profile: ClassProfile, kind: BranchKind | str) -> np.ndarray:
    """Per-class sampling rates: ``1/C`` for the balanced branch, ``n_i/N`` for the instance one."""
    kind = BranchKind(kind)
    if kind is BranchKind.BALANCED:
        return np.full(profile.class_count, 1.0 / profile.class_count)
    counts = profile.as_array().astype(np.float64)
    return counts / counts.sum()


def make_sampler(dataset: LabeledDataset, kind: BranchKind | str, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless, seed-reproducible stream of index batches for one branch.

    Balanced: a class is drawn uniformly, then an item uniformly within it,
    both with replacement; rare classes therefore repeat. Instance: items
    are drawn uniformly with replacement, so class ``i`` appears at rate
    ``n_i / N``.
    """
    kind = BranchKind(kind)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    rng = np.random.default_rng(seed)
    if kind is BranchKind.INSTANCE:
        n = len(dataset)
        while True:
            yield rng.integers(0, n, size=batch_size)
    per_class = [idx for idx in dataset.class_indices() if len(idx)]
    sizes = np.array([len(idx) for idx in per_class])
    stacked = np.concatenate(per_class)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    while True:
        classes = rng.integers(0, len(per_class), size=batch_size)
        within = rng.integers(0, sizes[classes])
        yield stacked[offsets[classes] + within]


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled pass over ``range(n)``; the last batch may be short."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# metrics


def partition_classes(profile: ClassProfile, spec: PartitionSpec = PartitionSpec()) -> Partition:
    head = frozenset(i for i, n in enumerate(profile.counts) if n > spec.head_min)
    tail = frozenset(i for i, n in enumerate(profile.counts) if n <= spec.tail_max)
    medium = frozenset(range(profile.class_count)) - head - tail
    return Partition(head, medium, tail)


@dataclass(frozen=True)
class MetricsReport:
    """Top-1 accuracies; a partition without test samples reports ``None``."""

    overall: float | None
    head: float | None
    medium: float | None
    tail: float | None
    per_class: tuple[float | None, ...]
    confusion: tuple[tuple[int, ...], ...]
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "head": self.head,
            "medium": self.medium,
            "tail": self.tail,
            "per_class": list(self.per_class),
            "confusion": [list(row) for row in self.confusion],
            "n_samples": self.n_samples,
        }


def _accuracy(mask: np.ndarray, correct: np.ndarray) -> float | None:
    total = int(mask.sum())
    return None if total == 0 else float(correct[mask].sum() / total)


def partition_metrics(
    predictions: Sequence[int] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    partition: Partition,
    class_count: int | None = None,
) -> MetricsReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} predictions vs {labels.shape} labels")
    if class_count is None:
        known = partition.head | partition.medium | partition.tail
        class_count = max([*known, *labels.tolist(), *predictions.tolist(), -1]) + 1
    correct = predictions == labels
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)

    def in_group(group):
        return np.isin(labels, sorted(group))

    return MetricsReport(
        overall=_accuracy(np.ones_like(correct), correct),
        head=_accuracy(in_group(partition.head), correct),
        medium=_accuracy(in_group(partition.medium), correct),
        tail=_accuracy(in_group(partition.tail), correct),
        per_class=tuple(_accuracy(labels == c, correct) for c in range(class_count)),
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
        n_samples=int(len(labels)),
    )
