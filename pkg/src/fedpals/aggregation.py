"""Target-aware aggregation weights.

The weights solve

    minimize_{alpha in simplex}  ||T - alpha^T S||^2 + lam * sum_i alpha_i^2 / n_i

which trades matching the target label marginal ``T`` against the effective
sample size ``1 / sum_i alpha_i^2 / n_i`` of the aggregate. ``lam -> inf``
recovers sample-size-proportional (FedAvg) weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np

from fedpals.labelspace import ClientMarginalSet, LabelMarginal

WEIGHT_TOL = 1e-9
# Stand-in for lam = 0: selects the largest-ESS point among residual minimizers.
EPS_REG = 1e-9
PGD_STEP_TOL = 1e-12
DEFAULT_MAX_ITERS = 200_000


@dataclass(frozen=True)
class AggregationWeights:
    """A point on the probability simplex over clients."""

    alpha: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.alpha, dtype=np.float64).reshape(-1)
        if a.size == 0:
            raise ValueError("weights must be non-empty")
        if not np.all(np.isfinite(a)):
            raise ValueError("weights must be finite")
        if np.any(a < 0.0):
            raise ValueError(f"negative weight {a.min()!r}")
        if abs(a.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {a.sum()!r}, expected 1")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    def __len__(self) -> int:
        return int(self.alpha.size)

    def tolist(self) -> list[float]:
        return self.alpha.tolist()


@dataclass(frozen=True)
class FedPalsProblem:
    S: ClientMarginalSet
    T: LabelMarginal
    lam: float = 0.0

    def __post_init__(self) -> None:
        lam = float(self.lam)
        if not math.isfinite(lam) or lam < 0.0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam!r}")
        if self.S.K != self.T.K:
            raise ValueError(f"dimension mismatch: target has K={self.T.K}, clients have K={self.S.K}")
        object.__setattr__(self, "lam", lam)

    def objective(self, alpha) -> float:
        return residual(self.S, self.T, alpha) + self.lam * float(
            np.sum(np.asarray(alpha) ** 2 / self.S.sizes)
        )


@dataclass(frozen=True)
class SolveReport:
    weights: AggregationWeights
    residual: float
    ess: float
    objective: float
    iterations: int
    converged: bool

    @property
    def alpha(self) -> np.ndarray:
        return self.weights.alpha


def residual(S: ClientMarginalSet, T: LabelMarginal, alpha) -> float:
    """``||alpha^T S - T||_2^2``."""
    diff = np.asarray(alpha, dtype=np.float64) @ S.matrix - T.probs
    return float(diff @ diff)


def fedavg_weights(sizes: Sequence[int] | np.ndarray) -> AggregationWeights:
    n = np.asarray(sizes, dtype=np.float64).reshape(-1)
    if n.size == 0:
        raise ValueError("sizes must be non-empty")
    if np.any(n < 1):
        raise ValueError("all client sizes must be >= 1")
    return AggregationWeights(n / n.sum())


def effective_sample_size(alpha: AggregationWeights | np.ndarray, sizes) -> float:
    a = alpha.alpha if isinstance(alpha, AggregationWeights) else np.asarray(alpha, dtype=np.float64)
    n = np.asarray(sizes, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ValueError(f"dimension mismatch: {a.size} weights for {n.size} sizes")
    return float(1.0 / np.sum(a * a / n))


def project_to_simplex(v) -> AggregationWeights:
    """Euclidean projection onto the probability simplex.

    Sort-based threshold rule: with ``u`` sorted in decreasing order, the
    threshold is ``(sum_{j<=rho} u_j - 1) / rho`` for the largest ``rho`` with
    ``u_rho`` above it. The stable sort keeps tie handling tied to index order.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries in vector to project")
    u = -np.sort(-v, kind="stable")
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    rho = int(np.nonzero(u * k > css - 1.0)[0][-1])
    theta = (css[rho] - 1.0) / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    return AggregationWeights(w / w.sum())


def _quadratic(problem: FedPalsProblem) -> tuple[np.ndarray, np.ndarray, float]:
    """Hessian/2, linear term and effective lambda of the weight problem."""
    S = problem.S.matrix
    lam = problem.lam if problem.lam > 0.0 else EPS_REG
    Q = S @ S.T + lam * np.diag(1.0 / problem.S.sizes.astype(np.float64))
    b = S @ problem.T.probs
    return Q, b, lam


def _active_set(Q: np.ndarray, b: np.ndarray, alpha0: np.ndarray, max_iters: int, tol: float):
    """Primal active-set method for ``min 1/2 a^T Q a - b^T a`` on the simplex.

    ``Q`` must be positive definite. Returns ``(alpha, iterations, converged)``.
    """
    M = b.size
    alpha = alpha0.copy()
    free = alpha > 0.0
    mu_tol = tol * max(1.0, float(np.abs(Q).max()))
    it = 0
    while it < max_iters:
        it += 1
        F = np.flatnonzero(free)
        m = F.size
        kkt = np.zeros((m + 1, m + 1))
        kkt[:m, :m] = Q[np.ix_(F, F)]
        kkt[:m, m] = 1.0
        kkt[m, :m] = 1.0
        rhs = np.append(b[F], 1.0)
        sol = np.linalg.solve(kkt, rhs)
        x, nu = sol[:m], sol[m]

        step = x - alpha[F]
        shrinking = step < 0.0
        t, blocking = 1.0, -1
        if np.any(shrinking & (x < 0.0)):
            ratios = np.full(m, np.inf)
            ratios[shrinking] = alpha[F][shrinking] / -step[shrinking]
            j = int(np.argmin(ratios))
            if ratios[j] < 1.0:
                t, blocking = float(ratios[j]), j

        if blocking >= 0:
            alpha[F] = alpha[F] + t * step
            alpha[F[blocking]] = 0.0
            free[F[blocking]] = False
            continue

        alpha[:] = 0.0
        alpha[F] = x
        if m == M:
            return alpha, it, True
        # Multipliers of the active bounds alpha_i >= 0.
        grad = Q @ alpha - b
        W = np.flatnonzero(~free)
        mu = grad[W] + nu
        k = int(np.argmin(mu))
        if mu[k] >= -mu_tol:
            return alpha, it, True
        free[W[k]] = True
    return alpha, it, False


def _max_ess_on_face(S: np.ndarray, sizes: np.ndarray, alpha0: np.ndarray, max_iters: int):
    """Largest-ESS weights among simplex points with the same aggregate ``alpha0^T S``.

    Solves ``min 1/2 sum_i alpha_i^2 / d_i`` subject to ``A alpha = A alpha0``
    (``A`` stacks ``S^T`` and a row of ones) and ``alpha >= 0``, where ``d`` is
    ``sizes`` rescaled to max 1. The minimizer is ``alpha = d * max(A^T y, 0)``
    for any maximizer ``y`` of the concave dual
    ``g(y) = y.c - 1/2 sum_i d_i max((A^T y)_i, 0)^2``, found by semismooth
    Newton steps with backtracking. ``y`` need not be unique; ``alpha`` is.
    Returns ``(alpha, iterations)``.
    """
    A = np.vstack([S.T, np.ones(S.shape[0])])
    # Orthonormal basis of the constraint rows removes the linear dependence.
    U, sv, Vt = np.linalg.svd(A, full_matrices=False)
    A = Vt[sv > sv[0] * 1e-12]
    d = sizes.astype(np.float64) / float(sizes.max())
    c = A @ alpha0

    def dual(y):
        z = A.T @ y
        zp = np.maximum(z, 0.0)
        return float(y @ c - 0.5 * np.sum(d * zp * zp)), zp

    y = np.linalg.lstsq(A.T, alpha0 / d, rcond=None)[0]
    g, zp = dual(y)
    it = 0
    while it < max_iters:
        it += 1
        grad = c - A @ (d * zp)
        if float(np.max(np.abs(grad))) <= 1e-15:
            break
        P = zp > 0.0
        H = (A[:, P] * d[P]) @ A[:, P].T
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        slope = float(grad @ step)
        if slope <= 0.0:
            step, slope = grad, float(grad @ grad)
        t = 1.0
        while True:
            g_new, zp_new = dual(y + t * step)
            if g_new >= g + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if g_new <= g:
            break
        y, g, zp = y + t * step, g_new, zp_new
    return d * zp, it


def _pgd(problem: FedPalsProblem, Q: np.ndarray, b: np.ndarray, lam: float, max_iters: int):
    """Fixed-step projected gradient with step ``1/L``."""
    S = problem.S.matrix
    L = 2.0 * float(np.linalg.norm(S @ S.T, 2)) + 2.0 * lam * float(np.max(1.0 / problem.S.sizes))
    alpha = fedavg_weights(problem.S.sizes).alpha.copy()
    for it in range(1, max_iters + 1):
        grad = 2.0 * (Q @ alpha - b)
        nxt = project_to_simplex(alpha - grad / L).alpha
        delta = float(np.max(np.abs(nxt - alpha)))
        alpha = np.array(nxt)
        if delta < PGD_STEP_TOL:
            return alpha, it, True
    return alpha, max_iters, False


def solve_fedpals(
    problem: FedPalsProblem,
    tol: float = 1e-9,
    max_iters: int = DEFAULT_MAX_ITERS,
    method: Literal["active-set", "pgd"] = "active-set",
) -> SolveReport:
    """Solve for the aggregation weights of ``problem``.

    ``lam == 0`` is solved with ``lam = EPS_REG`` and then refined so that,
    when several weight vectors reproduce the projection of ``T`` onto the
    client hull, the one with the largest effective sample size is returned. Reported objective and
    residual are recomputed from the final weights using the requested ``lam``.

    Args:
        problem: clients, target and regularization strength.
        tol: optimality tolerance (scale of the KKT multiplier check).
        max_iters: iteration cap; the best feasible iterate is returned when hit.
        method: ``"active-set"`` (exact, default) or ``"pgd"`` (projected gradient).
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    Q, b, lam = _quadratic(problem)
    start = fedavg_weights(problem.S.sizes).alpha.copy()
    if problem.S.M == 1:
        alpha, iters, converged = start, 0, True
    elif method == "active-set":
        alpha, iters, converged = _active_set(Q, b, start, max_iters, tol)
        if problem.lam == 0.0 and converged:
            # Exact tie-break among residual minimizers; the tiny EPS_REG term is
            # too weak relative to S S^T to pin down the largest-ESS point alone.
            base = np.maximum(alpha, 0.0)
            base /= base.sum()
            refined, extra = _max_ess_on_face(problem.S.matrix, problem.S.sizes, base, max_iters)
            iters += extra
            refined /= refined.sum()
            n = problem.S.sizes
            if (
                residual(problem.S, problem.T, refined) <= residual(problem.S, problem.T, base) + 1e-14
                and np.sum(refined**2 / n) < np.sum(base**2 / n)
            ):
                alpha = refined
            else:
                alpha = base
    elif method == "pgd":
        alpha, iters, converged = _pgd(problem, Q, b, lam, max_iters)
    else:
        raise ValueError(f"unknown method {method!r}")

    alpha = np.maximum(alpha, 0.0)
    alpha = alpha / alpha.sum()
    weights = AggregationWeights(alpha)
    res = residual(problem.S, problem.T, alpha)
    return SolveReport(
        weights=weights,
        residual=res,
        ess=effective_sample_size(weights, problem.S.sizes),
        objective=res + problem.lam * float(np.sum(alpha * alpha / problem.S.sizes)),
        iterations=iters,
        converged=converged,
    )


def fedpals_limit_weights(
    S: ClientMarginalSet,
    T: LabelMarginal,
    limit: Literal["lambda_to_zero", "lambda_to_infinity"],
) -> AggregationWeights:
    if limit == "lambda_to_infinity":
        if S.K != T.K:
            raise ValueError(f"dimension mismatch: target has K={T.K}, clients have K={S.K}")
        return fedavg_weights(S.sizes)
    if limit == "lambda_to_zero":
        return solve_fedpals(FedPalsProblem(S, T, 0.0)).weights
    raise ValueError(f"unknown limit {limit!r}")


class LambdaSearch(NamedTuple):
    lam: float
    achieved_fraction: float
    # True when even lam = 0 overshoots the requested fraction.
    at_lower_bound: bool = False


def lambda_for_ess(
    S: ClientMarginalSet,
    T: LabelMarginal,
    target_fraction: float,
    rel_tol: float = 0.01,
    max_steps: int = 200,
) -> LambdaSearch:
    """Find ``lam`` whose solution has ``ESS / N`` within ``rel_tol`` (relative) of ``target_fraction``.

    ESS is nondecreasing in ``lam``; the upper end of the bracket grows by
    factors of ten until it reaches the target, then the bracket is bisected
    geometrically. ``target_fraction == 1`` returns ``lam = inf``; use
    :func:`fedpals_limit_weights` (or :func:`fedavg_weights`) for that case.
    """
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError(f"target_fraction must be in (0, 1], got {target_fraction!r}")
    if rel_tol <= 0:
        raise ValueError("rel_tol must be > 0")
    N = float(S.total)
    lo_ok = target_fraction * (1.0 - rel_tol)
    hi_ok = target_fraction * (1.0 + rel_tol)

    aggregate = fedavg_weights(S.sizes).alpha @ S.matrix
    if target_fraction < 1.0 and np.max(np.abs(aggregate - T.probs)) <= 1e-12:
        raise ValueError("degenerate: target equals client aggregate")

    def fraction(lam: float) -> float:
        return solve_fedpals(FedPalsProblem(S, T, lam)).ess / N

    if target_fraction == 1.0:
        # ESS equals N only at the FedAvg weights, which is the lam -> inf limit.
        return LambdaSearch(math.inf, 1.0)

    f0 = fraction(0.0)
    if f0 >= lo_ok:
        return LambdaSearch(0.0, f0, f0 > hi_ok)

    lo, hi = 0.0, 1.0
    f_hi = fraction(hi)
    while f_hi < lo_ok:
        lo, hi = hi, hi * 10.0
        if hi > 1e20:
            raise ValueError(
                f"target_fraction {target_fraction} unreachable (ESS/N={f_hi:.6g} at lambda={hi:g})"
            )
        f_hi = fraction(hi)
    if f_hi <= hi_ok:
        return LambdaSearch(hi, f_hi)

    for _ in range(max_steps):
        mid = math.sqrt(lo * hi) if lo > 0.0 else hi / 10.0
        f_mid = fraction(mid)
        if lo_ok <= f_mid <= hi_ok:
            return LambdaSearch(mid, f_mid)
        if f_mid < lo_ok:
            lo = mid
        else:
            hi = mid
    raise ValueError(f"bisection did not reach ESS fraction {target_fraction} within {max_steps} steps")
