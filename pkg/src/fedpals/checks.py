"""Self-checks exposed through the CLI (``gradcheck`` and ``verify-props``)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from fedpals.aggregation import FedPalsProblem, fedavg_weights, solve_fedpals
from fedpals.distshift import Dataset, point_mass_dataset
from fedpals.federation import ClientState, verify_unbiasedness
from fedpals.labelspace import ClientMarginalSet, LabelMarginal
from fedpals.learners import ModelArch, ParamVector, loss_and_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def gradient_error(
    arch: ModelArch, params: ParamVector, batch: Dataset, prox_mu: float = 0.0, anchor: ParamVector | None = None
) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``."""
    _, g = loss_and_grad(arch, params, batch, prox_mu, anchor)

    def f(v):
        return loss_and_grad(arch, params.replace(v), batch, prox_mu, anchor)[0]

    num = numerical_gradient(f, params.values.copy())
    return float(np.max(np.abs(g.values - num) / np.maximum(1.0, np.abs(g.values))))


def random_case(arch: ModelArch, rng: np.random.Generator, n: int = 16):
    params = ParamVector(rng.normal(0.0, 0.5, arch.size), arch.layout)
    batch = Dataset(rng.normal(size=(n, arch.d)), rng.integers(0, arch.K, n), arch.K)
    return params, batch


def run_gradcheck(cases: int = 20, seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for arch in (ModelArch("logistic", 3, 4), ModelArch("mlp", 3, 4, hidden=5)):
        worst = 0.0
        for c in range(cases):
            params, batch = random_case(arch, rng)
            mu = 0.0 if c % 2 == 0 else float(rng.uniform(0.1, 1.0))
            anchor = ParamVector(rng.normal(size=arch.size), arch.layout) if mu > 0 else None
            worst = max(worst, gradient_error(arch, params, batch, mu, anchor))
        out.append(CheckResult(f"gradcheck {arch.kind}", worst < tol, f"max rel err {worst:.2e} over {cases} cases"))
    return out


def unbiasedness_instance(rng: np.random.Generator, M: int = 3, K: int = 3, d: int = 2, n: int = 12):
    """Clients over a one-point-per-class universe with a covered target.

    Returns ``(clients, alpha_c, target_dataset)``. The target counts are the
    integer mixture ``sum_i a_i * counts_i``, so the target marginal is exactly
    ``sum_i alpha_c_i S_i`` with ``alpha_c = a / sum(a)``.
    """
    universe = [rng.normal(size=(1, d)) * 2.0 for _ in range(K)]
    counts = []
    for _ in range(M):
        cut = np.sort(rng.choice(np.arange(1, n), size=K - 1, replace=False))
        counts.append(np.diff(np.concatenate([[0], cut, [n]])))
    a = rng.integers(1, 6, size=M)
    a[0] += 6
    clients = [ClientState(i, point_mass_dataset(universe, c)) for i, c in enumerate(counts)]
    target = point_mass_dataset(universe, sum(ai * c for ai, c in zip(a, counts)))
    return clients, a / a.sum(), target


def run_prop_checks(instances: int = 10, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    arch = ModelArch("logistic", 2, 3)
    gaps, ctrl = [], []
    for _ in range(instances):
        clients, alpha_c, target = unbiasedness_instance(rng)
        params = ParamVector(rng.normal(size=arch.size), arch.layout)
        gaps.append(verify_unbiasedness(clients, alpha_c, target, arch, params, 1.0))
        fa = fedavg_weights([c.n for c in clients])
        ctrl.append(verify_unbiasedness(clients, fa, target, arch, params, 1.0))
    out = [
        CheckResult("unbiased one-step update", max(gaps) < 1e-10, f"max gap {max(gaps):.2e}"),
        CheckResult("FedAvg control is biased", min(ctrl) > 1e-3, f"min gap {min(ctrl):.2e}"),
    ]

    worst = 0.0
    for _ in range(50):
        M, K = int(rng.integers(2, 11)), int(rng.integers(2, 11))
        S = ClientMarginalSet.from_arrays(rng.dirichlet(np.ones(K), M), rng.integers(1, 1001, M))
        T = LabelMarginal(rng.dirichlet(np.ones(K)))
        alpha = solve_fedpals(FedPalsProblem(S, T, 1e10)).alpha
        worst = max(worst, float(np.max(np.abs(alpha - fedavg_weights(S.sizes).alpha))))
    out.append(CheckResult("large-lambda limit equals FedAvg", worst < 1e-4, f"max |diff| {worst:.2e}"))
    return out
