"""Long-tailed labeled/unlabeled split generation and manifests.

Class indices are 0-based throughout the package: class 0 is the most
frequent class of the labeled set, class ``C - 1`` the rarest.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_FORMAT = "cpe-split-manifest"
MANIFEST_VERSION = 1

DISTRIBUTION_CASES = ("consistent", "uniform", "inverse")


class SplitSpecError(ValueError):
    """Raised for an invalid split specification."""


class InsufficientSamplesError(ValueError):
    """The source corpus cannot supply the requested per-class counts."""

    def __init__(self, label: int, needed: int, available: int):
        self.label = label
        self.needed = needed
        self.available = available
        self.shortfall = needed - available
        super().__init__(
            f"class {label}: need {needed} samples, corpus has {available} "
            f"(short by {self.shortfall})"
        )


def longtail_counts(n1: int, gamma: float, num_classes: int) -> np.ndarray:
    """Exponentially decaying per-class counts from ``n1`` down to ``n1 / gamma``."""
    if num_classes < 2:
        raise SplitSpecError(f"need at least 2 classes, got {num_classes}")
    if gamma < 1:
        raise SplitSpecError(f"imbalance ratio must be >= 1, got {gamma}")
    if n1 < 1:
        raise SplitSpecError(f"n1 must be positive, got {n1}")
    k = np.arange(num_classes)
    counts = np.rint(n1 * float(gamma) ** (-k / (num_classes - 1))).astype(np.int64)
    return np.maximum(counts, 1)


def imbalance_ratio(counts: Sequence[int]) -> float:
    counts = np.asarray(counts)
    if counts.size == 0 or np.any(counts <= 0):
        raise ValueError("imbalance ratio needs strictly positive counts")
    return float(counts.max() / counts.min())


@dataclass(frozen=True)
class SplitSpec:
    num_classes: int
    n1: int
    m1: int
    gamma_l: float
    distribution_case: str = "consistent"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise SplitSpecError(f"need at least 2 classes, got {self.num_classes}")
        if self.gamma_l < 1:
            raise SplitSpecError(f"gamma_l must be >= 1, got {self.gamma_l}")
        if self.n1 < self.num_classes:
            raise SplitSpecError(
                f"n1={self.n1} is smaller than the number of classes {self.num_classes}"
            )
        if self.m1 < 1:
            raise SplitSpecError(f"m1 must be positive, got {self.m1}")
        if self.distribution_case not in DISTRIBUTION_CASES:
            raise SplitSpecError(
                f"distribution_case must be one of {DISTRIBUTION_CASES}, "
                f"got {self.distribution_case!r}"
            )

    @property
    def gamma_u(self) -> float:
        return {
            "consistent": float(self.gamma_l),
            "uniform": 1.0,
            "inverse": 1.0 / self.gamma_l,
        }[self.distribution_case]

    def labeled_counts(self) -> np.ndarray:
        return longtail_counts(self.n1, self.gamma_l, self.num_classes)

    def unlabeled_counts(self) -> np.ndarray:
        # inverse: profile built from m1 then reversed, so class 0 holds m1
        if self.distribution_case == "uniform":
            return np.full(self.num_classes, self.m1, dtype=np.int64)
        if self.distribution_case == "consistent":
            return longtail_counts(self.m1, self.gamma_l, self.num_classes)
        top = int(round(self.m1 * self.gamma_l))
        return longtail_counts(top, self.gamma_l, self.num_classes)[::-1].copy()

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(**d)


class DiagnosticLabels:
    """Ground-truth labels of unlabeled samples, with a read counter.

    Training code must never touch these; the counter lets tests prove it.
    """

    def __init__(self, labels: Sequence[int]):
        self._labels = np.asarray(labels, dtype=np.int64)
        self.reads = 0

    def read(self) -> np.ndarray:
        self.reads += 1
        return self._labels.copy()

    def __len__(self):
        return len(self._labels)

    def __eq__(self, other):
        return isinstance(other, DiagnosticLabels) and np.array_equal(
            self._labels, other._labels
        )


@dataclass(eq=False)
class SplitResult:
    spec: SplitSpec
    labeled: list[tuple[int, int]]
    unlabeled: list[int]
    diagnostics: DiagnosticLabels
    labeled_counts: np.ndarray = field(repr=False)
    unlabeled_counts: np.ndarray = field(repr=False)

    @property
    def labeled_ids(self) -> np.ndarray:
        return np.array([i for i, _ in self.labeled], dtype=np.int64)

    @property
    def labeled_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.labeled], dtype=np.int64)

    @property
    def unlabeled_ids(self) -> np.ndarray:
        return np.asarray(self.unlabeled, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, SplitResult):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.labeled == other.labeled
            and self.unlabeled == other.unlabeled
            and self.diagnostics == other.diagnostics
            and np.array_equal(self.labeled_counts, other.labeled_counts)
            and np.array_equal(self.unlabeled_counts, other.unlabeled_counts)
        )


def build_split(labels: Sequence[int], spec: SplitSpec) -> SplitResult:
    """Draw labeled then unlabeled samples per class, without replacement.

    ``labels`` is the ground-truth label of every corpus sample; the sample
    id is its position. The draw depends only on ``(labels, spec)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_counts = spec.labeled_counts()
    m_counts = spec.unlabeled_counts()
    rng = np.random.default_rng(spec.seed)

    labeled: list[tuple[int, int]] = []
    unlabeled: list[tuple[int, int]] = []
    for k in range(spec.num_classes):
        pool = np.flatnonzero(labels == k)
        need = int(n_counts[k] + m_counts[k])
        if pool.size < need:
            raise InsufficientSamplesError(k, need, int(pool.size))
        pool = rng.permutation(pool)
        labeled += [(int(i), k) for i in pool[: n_counts[k]]]
        unlabeled += [(int(i), k) for i in pool[n_counts[k] : need]]

    labeled.sort()
    unlabeled.sort()
    return SplitResult(
        spec=spec,
        labeled=labeled,
        unlabeled=[i for i, _ in unlabeled],
        diagnostics=DiagnosticLabels([y for _, y in unlabeled]),
        labeled_counts=n_counts,
        unlabeled_counts=m_counts,
    )


def split_to_dict(split: SplitResult) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "spec": asdict(split.spec),
        "labeled_counts": split.labeled_counts.tolist(),
        "unlabeled_counts": split.unlabeled_counts.tolist(),
        "labeled": [list(p) for p in split.labeled],
        "unlabeled": list(split.unlabeled),
        "diagnostics": {"unlabeled_labels": split.diagnostics._labels.tolist()},
    }


def split_from_dict(d: dict) -> SplitResult:
    if d.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a split manifest (format={d.get('format')!r})")
    if d.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {d.get('version')}")
    return SplitResult(
        spec=SplitSpec.from_dict(d["spec"]),
        labeled=[(int(i), int(y)) for i, y in d["labeled"]],
        unlabeled=[int(i) for i in d["unlabeled"]],
        diagnostics=DiagnosticLabels(d["diagnostics"]["unlabeled_labels"]),
        labeled_counts=np.asarray(d["labeled_counts"], dtype=np.int64),
        unlabeled_counts=np.asarray(d["unlabeled_counts"], dtype=np.int64),
    )


def write_manifest(split: SplitResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(split_to_dict(split), indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> SplitResult:
    return split_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    """Training pool plus a separate balanced test set."""

    x: np.ndarray
    y: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int


def gaussian_mixture(
    num_classes: int = 9,
    dim: int = 8,
    per_class: int = 4000,
    test_per_class: int = 500,
    separation: float = 3.0,
    seed: int = 0,
) -> Corpus:
    """Isotropic Gaussian clusters with random unit-norm-scaled centres.

    The mixture itself (means, draws) depends only on ``seed``, so several
    splits can be cut from one corpus.
    """
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n):
        y = np.repeat(np.arange(num_classes), n)
        x = means[y] + rng.standard_normal((y.size, dim))
        return x.astype(np.float32), y

    x, y = draw(per_class)
    x_test, y_test = draw(test_per_class)
    return Corpus(x, y, x_test, y_test, num_classes)


def load_cifar(root: str | Path, num_classes: int = 10) -> Corpus:
    """Read the python-pickle release of CIFAR-10/100 from ``root``.

    Images come back as float32 ``[N, 3, 32, 32]`` in ``[0, 1]``.
    """
    import pickle

    root = Path(root)
    if num_classes == 10:
        sub, train_files, test_files, key = (
            "cifar-10-batches-py",
            [f"data_batch_{i}" for i in range(1, 6)],
            ["test_batch"],
            b"labels",
        )
    elif num_classes == 100:
        sub, train_files, test_files, key = (
            "cifar-100-python", ["train"], ["test"], b"fine_labels",
        )
    else:
        raise ValueError("CIFAR corpora have 10 or 100 classes")
    base = root / sub if (root / sub).is_dir() else root

    def read(files):
        xs, ys = [], []
        for name in files:
            p = base / name
            if not p.exists():
                raise FileNotFoundError(f"missing CIFAR file {p}")
            with open(p, "rb") as fh:
                d = pickle.load(fh, encoding="bytes")
            xs.append(np.asarray(d[b"data"], dtype=np.uint8))
            ys.append(np.asarray(d[key], dtype=np.int64))
        x = np.concatenate(xs).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        return x, np.concatenate(ys)

    x, y = read(train_files)
    x_test, y_test = read(test_files)
    return Corpus(x, y, x_test, y_test, num_classes)


def load_npz(path: str | Path) -> Corpus:
    d = np.load(path)
    y = d["y_train"].astype(np.int64)
    return Corpus(
        d["x_train"].astype(np.float32), y,
        d["x_test"].astype(np.float32), d["y_test"].astype(np.int64),
        int(max(y.max(), d["y_test"].max()) + 1),
    )


def ratio_within_rounding(counts: Sequence[int], gamma: float) -> bool:
    """True if the realized max/min ratio is what rounding of the profile allows."""
    counts = np.asarray(counts)
    hi, lo = counts.max(), counts.min()
    return (hi - 0.5) / (lo + 0.5) <= gamma <= (hi + 0.5) / max(lo - 0.5, 1e-12) or math.isclose(
        hi / lo, gamma
    )
