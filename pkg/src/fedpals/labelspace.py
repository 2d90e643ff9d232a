"""Label marginals over a fixed class set and the convex-hull geometry on them.

Class ids are dense integers ``0..K-1``. A client missing a class carries an
explicit zero in that position; vectors are never shortened.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NORMALIZATION_TOL = 1e-9


def _as_probs(values: Sequence[float] | np.ndarray, what: str = "probs") -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{what}: empty probability vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: non-finite entry")
    if np.any(arr < 0.0):
        raise ValueError(f"{what}: negative entry {arr.min()!r}")
    total = float(arr.sum())
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"{what}: entries sum to {total!r}, expected 1 within {NORMALIZATION_TOL}")
    if total != 1.0:
        arr = arr / total
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LabelMarginal:
    """A probability vector over ``K`` classes.

    Inputs that sum to one within ``1e-9`` are renormalized by their sum.
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", _as_probs(self.probs))

    @property
    def K(self) -> int:
        return int(self.probs.size)

    def __len__(self) -> int:
        return self.K

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMarginal):
            return NotImplemented
        return bool(np.array_equal(self.probs, other.probs))

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())

    def tolist(self) -> list[float]:
        return self.probs.tolist()


@dataclass(frozen=True)
class ClientMarginalSet:
    """Row ``i`` of :attr:`matrix` is client ``i``'s label marginal; ``sizes[i]`` its sample count."""

    marginals: tuple[LabelMarginal, ...]
    sizes: np.ndarray
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        marginals = tuple(
            m if isinstance(m, LabelMarginal) else LabelMarginal(m) for m in self.marginals
        )
        if len(marginals) == 0:
            raise ValueError("client set must contain at least one client")
        ks = {m.K for m in marginals}
        if len(ks) != 1:
            raise ValueError(f"client marginals have differing class counts {sorted(ks)}")
        sizes = np.array(self.sizes).reshape(-1)
        if sizes.size != len(marginals):
            raise ValueError(f"{sizes.size} sizes given for {len(marginals)} clients")
        if not np.all(np.equal(np.mod(sizes, 1), 0)):
            raise ValueError("client sizes must be integers")
        sizes = sizes.astype(np.int64)
        if np.any(sizes < 1):
            raise ValueError(f"client sizes must be >= 1, got {sizes.tolist()}")
        sizes.setflags(write=False)
        ids = tuple(str(i) for i in self.ids) if self.ids else tuple(str(i) for i in range(len(marginals)))
        if len(ids) != len(marginals):
            raise ValueError("ids length does not match client count")
        object.__setattr__(self, "marginals", marginals)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_arrays(cls, matrix, sizes, ids: Sequence[str] = ()) -> "ClientMarginalSet":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("marginal matrix must be 2-D (clients x classes)")
        return cls(tuple(LabelMarginal(row) for row in matrix), np.asarray(sizes), tuple(ids))

    @property
    def M(self) -> int:
        return len(self.marginals)

    @property
    def K(self) -> int:
        return self.marginals[0].K

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([m.probs for m in self.marginals])

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    def subset(self, indices: Sequence[int]) -> "ClientMarginalSet":
        idx = list(indices)
        return ClientMarginalSet(
            tuple(self.marginals[i] for i in idx),
            self.sizes[idx],
            tuple(self.ids[i] for i in idx),
        )


def empirical_marginal(labels, K: int) -> LabelMarginal:
    """Proportion of each class id in ``labels``."""
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ValueError("empty dataset")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integer class ids")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"label out of range [0, {K}): min={labels.min()}, max={labels.max()}")
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    return LabelMarginal(counts / labels.size)


def _check_dims(T: LabelMarginal, S: ClientMarginalSet) -> None:
    if T.K != S.K:
        raise ValueError(f"dimension mismatch: target has K={T.K}, clients have K={S.K}")


def projection_distance(T: LabelMarginal, S: ClientMarginalSet) -> float:
    """Squared Euclidean distance from ``T`` to the convex hull of the client marginals.

    Reported as the squared norm, i.e. the residual of the unregularized
    weight problem at its optimum.
    """
    from fedpals.aggregation import FedPalsProblem, solve_fedpals

    _check_dims(T, S)
    return solve_fedpals(FedPalsProblem(S, T, 0.0)).residual


def check_coverage(T: LabelMarginal, S: ClientMarginalSet, tol: float = 1e-10) -> tuple[bool, float]:
    """Return ``(covered, residual)`` where covered means ``T`` lies in the client hull up to ``tol``."""
    residual = projection_distance(T, S)
    return residual <= tol, residual


# -- file I/O -----------------------------------------------------------------


class MarginalFileError(ValueError):
    """Raised for malformed marginal-set files; the message names the offending field."""


def load_marginal_file(path: str | Path) -> tuple[ClientMarginalSet, LabelMarginal | None]:
    """Read a JSON marginal file.

    Layout::

        {"clients": [{"id": "a", "n": 40, "probs": [0.5, 0.5, 0.0]}, ...],
         "target": {"probs": [0.5, 0.25, 0.25]}}

    The ``target`` record is optional.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MarginalFileError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_marginal_doc(doc, source=str(path))


def parse_marginal_doc(doc, source: str = "<doc>") -> tuple[ClientMarginalSet, LabelMarginal | None]:
    if not isinstance(doc, dict):
        raise MarginalFileError(f"{source}: top level must be an object")
    clients = doc.get("clients")
    if not isinstance(clients, list) or not clients:
        raise MarginalFileError(f"{source}: field 'clients' must be a non-empty list")
    marginals, sizes, ids = [], [], []
    for i, rec in enumerate(clients):
        where = f"{source}: clients[{i}]"
        if not isinstance(rec, dict):
            raise MarginalFileError(f"{where}: must be an object")
        for key in ("id", "n", "probs"):
            if key not in rec:
                raise MarginalFileError(f"{where}: missing field '{key}'")
        n = rec["n"]
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            raise MarginalFileError(f"{where}.n: must be an integer >= 1, got {n!r}")
        try:
            marginals.append(LabelMarginal(rec["probs"]))
        except (ValueError, TypeError) as exc:
            raise MarginalFileError(f"{where}.probs: {exc}") from exc
        sizes.append(n)
        ids.append(str(rec["id"]))
    try:
        S = ClientMarginalSet(tuple(marginals), np.array(sizes), tuple(ids))
    except ValueError as exc:
        raise MarginalFileError(f"{source}: clients: {exc}") from exc

    target = None
    if "target" in doc:
        rec = doc["target"]
        if not isinstance(rec, dict) or "probs" not in rec:
            raise MarginalFileError(f"{source}: target: missing field 'probs'")
        try:
            target = LabelMarginal(rec["probs"])
        except (ValueError, TypeError) as exc:
            raise MarginalFileError(f"{source}: target.probs: {exc}") from exc
        if target.K != S.K:
            raise MarginalFileError(
                f"{source}: target.probs: length {target.K} does not match client K={S.K}"
            )
    return S, target


def dump_marginal_doc(S: ClientMarginalSet, T: LabelMarginal | None = None) -> dict:
    doc: dict = {
        "clients": [
            {"id": cid, "n": int(n), "probs": m.tolist()}
            for cid, n, m in zip(S.ids, S.sizes, S.marginals)
        ]
    }
    if T is not None:
        doc["target"] = {"probs": T.tolist()}
    return doc


def save_marginal_file(path: str | Path, S: ClientMarginalSet, T: LabelMarginal | None = None) -> None:
    Path(path).write_text(json.dumps(dump_marginal_doc(S, T), indent=2) + "\n")
