"""Label-shifted data generation.

All generators are pure functions of their inputs and an integer seed. Client
streams are derived from ``(master_seed, client_index)`` so adding clients does
not change the data of existing ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from fedpals.labelspace import LabelMarginal, empirical_marginal

# Class means of the three-class two-dimensional synthetic task.
SYNTHETIC_MEANS = np.array([[6.0, 4.6], [1.2, -1.6], [4.6, -5.4]])
T_PROJ = np.array([0.5, 0.25, 0.25])
T_EXT = np.array([0.0, 0.5, 0.5])
SYNTHETIC_CLIENT_MARGINALS = np.array([[0.5, 0.5, 0.0], [0.5, 0.0, 0.5]])
SYNTHETIC_CLIENT_SIZES = (40, 18)

_STREAM_TAGS = {"client": 1, "target": 2, "partition": 3, "perturb": 4, "means": 5}


def stream(seed: int, kind: str, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, kind, *key)``."""
    return np.random.default_rng([int(seed), _STREAM_TAGS[kind], *(int(k) for k in key)])


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    K: int

    def __post_init__(self) -> None:
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.labels).reshape(-1)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be integer class ids")
        y = y.astype(np.int64)
        if X.shape[0] != y.size:
            raise ValueError(f"{X.shape[0]} feature rows but {y.size} labels")
        if y.size and (y.min() < 0 or y.max() >= self.K):
            raise ValueError(f"label out of range [0, {self.K})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def marginal(self) -> LabelMarginal:
        return empirical_marginal(self.labels, self.K)

    def take(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.K)


@dataclass(frozen=True)
class GaussianTaskSpec:
    """Class-conditional ``N(mu_y, I)`` features."""

    means: np.ndarray = field(default_factory=lambda: SYNTHETIC_MEANS.copy())

    def __post_init__(self) -> None:
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[0] < 2:
            raise ValueError("means must be a (K >= 2) x d array")
        if not np.all(np.isfinite(mu)):
            raise ValueError("means must be finite")
        mu.setflags(write=False)
        object.__setattr__(self, "means", mu)

    @property
    def K(self) -> int:
        return int(self.means.shape[0])

    @property
    def d(self) -> int:
        return int(self.means.shape[1])

    @classmethod
    def random(cls, K: int, d: int, scale: float, seed: int) -> "GaussianTaskSpec":
        """Means drawn i.i.d. from ``N(0, scale^2 I)``."""
        return cls(stream(seed, "means", K, d).normal(0.0, scale, size=(K, d)))


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Literal["sparsity", "dirichlet", "explicit"]
    M: int
    sizes: tuple[int, ...] = ()
    C: int | None = None
    beta: float | None = None
    marginals: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self) -> None:
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.scheme == "sparsity":
            if self.C is None or self.C < 1:
                raise ValueError("sparsity scheme requires C >= 1")
        elif self.scheme == "dirichlet":
            if self.beta is None or not self.beta > 0:
                raise ValueError("dirichlet scheme requires beta > 0")
        elif self.scheme == "explicit":
            if len(self.marginals) != self.M:
                raise ValueError("explicit scheme requires one marginal per client")
        else:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")

    def marginals_for(self, K: int, seed: int) -> list[LabelMarginal]:
        if self.scheme == "sparsity":
            return sparsity_partition(K, self.M, self.C, 1, seed)
        if self.scheme == "dirichlet":
            return dirichlet_partition(K, self.M, self.beta, seed)
        return [LabelMarginal(m) for m in self.marginals]


def stratified_counts(marginal: LabelMarginal, n: int) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` samples; ties go to the lower class id."""
    raw = marginal.probs * n
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def sample_gaussian_dataset(
    spec: GaussianTaskSpec,
    marginal: LabelMarginal,
    n: int,
    seed: int | np.random.Generator,
    mode: Literal["stratified", "iid"] = "stratified",
) -> Dataset:
    """Draw ``n`` labelled points with labels from ``marginal`` and features ``N(mu_y, I)``.

    In ``stratified`` mode label counts are fixed by :func:`stratified_counts`
    and then shuffled, so the empirical marginal matches the nominal one.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if marginal.K != spec.K:
        raise ValueError(f"marginal has K={marginal.K}, task has K={spec.K}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if mode == "stratified":
        labels = np.repeat(np.arange(spec.K), stratified_counts(marginal, n))
        labels = rng.permutation(labels)
    elif mode == "iid":
        labels = rng.choice(spec.K, size=n, p=marginal.probs)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    features = spec.means[labels] + rng.standard_normal((n, spec.d))
    return Dataset(features, labels, spec.K)


def sparsity_partition(K: int, M: int, C: int, samples_per_label: int, seed: int) -> list[LabelMarginal]:
    """Each client gets ``C`` labels chosen uniformly without replacement, equal mass ``1/C``.

    Label subsets are drawn independently per client, so subsets may overlap.
    Client sizes are ``C * samples_per_label`` (see :func:`sparsity_sizes`).
    """
    if not 1 <= C <= K:
        raise ValueError(f"C must satisfy 1 <= C <= K={K}, got {C}")
    if M < 1 or samples_per_label < 1:
        raise ValueError("M and samples_per_label must be >= 1")
    out = []
    for i in range(M):
        chosen = stream(seed, "partition", i).choice(K, size=C, replace=False)
        probs = np.zeros(K)
        probs[chosen] = 1.0 / C
        out.append(LabelMarginal(probs))
    return out


def sparsity_sizes(M: int, C: int, samples_per_label: int) -> list[int]:
    return [C * samples_per_label] * M


def dirichlet_partition(K: int, M: int, beta: float, seed: int) -> list[LabelMarginal]:
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta!r}")
    out = []
    for i in range(M):
        p = stream(seed, "partition", i).dirichlet(np.full(K, float(beta)))
        out.append(LabelMarginal(p / p.sum()))
    return out


def make_target_delta(delta: float) -> LabelMarginal:
    """Interpolate from the in-hull target ``[0.5, 0.25, 0.25]`` to the out-of-hull ``[0, 0.5, 0.5]``."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta!r}")
    return LabelMarginal((1.0 - delta) * T_PROJ + delta * T_EXT)


def perturb_target(T: LabelMarginal, delta: float, seed: int) -> LabelMarginal:
    """Add ``delta * max(eps, 0)`` with standard Gaussian ``eps`` per class, then renormalize."""
    if not delta >= 0.0:
        raise ValueError(f"delta must be >= 0, got {delta!r}")
    if delta == 0.0:
        return T
    eps = stream(seed, "perturb").standard_normal(T.K)
    p = T.probs + delta * np.maximum(eps, 0.0)
    return LabelMarginal(p / p.sum())


def point_mass_dataset(universe: Sequence[np.ndarray], counts: Sequence[int], K: int | None = None) -> Dataset:
    """Dataset over a finite input universe.

    ``universe[y]`` is an array of points for class ``y``; class ``y`` receives
    ``counts[y]`` rows that cycle through its points, so two datasets whose
    counts are multiples of ``len(universe[y])`` share class-conditionals exactly.
    """
    K = len(universe) if K is None else K
    feats, labels = [], []
    for y, c in enumerate(counts):
        if c == 0:
            continue
        pts = np.atleast_2d(np.asarray(universe[y], dtype=np.float64))
        if c % len(pts):
            raise ValueError(f"class {y}: count {c} is not a multiple of {len(pts)} universe points")
        feats.append(np.tile(pts, (c // len(pts), 1)))
        labels.append(np.full(c, y, dtype=np.int64))
    return Dataset(np.vstack(feats), np.concatenate(labels), K)


# -- text table I/O -------------------------------------------------------------


def save_dataset(path: str | Path, data: Dataset) -> None:
    """Delimited text: a ``d,K,n`` header row, its values, then ``features..., label`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "K", "n"])
        w.writerow([data.d, data.K, len(data)])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_dataset(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or rows[0] != ["d", "K", "n"]:
        raise ValueError(f"{path}: expected header row 'd,K,n'")
    d, K, n = (int(v) for v in rows[1])
    body = rows[2:]
    if len(body) != n:
        raise ValueError(f"{path}: header says n={n}, found {len(body)} rows")
    X = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    for i, row in enumerate(body):
        if len(row) != d + 1:
            raise ValueError(f"{path}: line {i + 3}: expected {d + 1} fields, got {len(row)}")
        X[i] = [float(v) for v in row[:d]]
        y[i] = int(row[d])
    return Dataset(X, y, K)
