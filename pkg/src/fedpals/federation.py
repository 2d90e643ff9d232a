"""Round loop of the simulated federation.

Only :class:`ClientUpdate` values (parameters, sample count, label marginal)
cross from clients to the server; the server never touches client features or
labels.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from fedpals.aggregation import (
    AggregationWeights,
    FedPalsProblem,
    effective_sample_size,
    fedavg_weights,
    lambda_for_ess,
    residual,
    solve_fedpals,
)
from fedpals.distshift import Dataset
from fedpals.labelspace import ClientMarginalSet, LabelMarginal, projection_distance
from fedpals.learners import (
    LocalUpdateConfig,
    ModelArch,
    ParamVector,
    evaluate,
    init_params,
    load_params,
    local_update,
    loss_and_grad,
    save_params,
)

COVERAGE_TOL = 1e-10
StrategyKind = Literal["fedavg", "fedpals", "fedpals_prox", "oracle"]


@dataclass(frozen=True)
class Strategy:
    """Server aggregation rule.

    ``fedpals`` and ``fedpals_prox`` take either ``lam`` or ``ess_target``
    (fraction of the participants' total sample size).
    """

    kind: StrategyKind
    lam: float | None = None
    ess_target: float | None = None
    prox_mu: float = 0.0
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("fedavg", "fedpals", "fedpals_prox", "oracle"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind in ("fedpals", "fedpals_prox"):
            if (self.lam is None) == (self.ess_target is None):
                raise ValueError(f"{self.kind}: give exactly one of lam or ess_target")
            if self.lam is not None and not (math.isfinite(self.lam) and self.lam >= 0):
                raise ValueError(f"{self.kind}: lam must be finite and >= 0")
            if self.ess_target is not None and not 0 < self.ess_target <= 1:
                raise ValueError(f"{self.kind}: ess_target must be in (0, 1]")
        if self.kind == "fedpals_prox" and not self.prox_mu > 0:
            raise ValueError("fedpals_prox requires prox_mu > 0")
        if not self.name:
            object.__setattr__(self, "name", self._default_name())

    def _default_name(self) -> str:
        if self.kind in ("fedavg", "oracle"):
            return self.kind
        knob = f"lam{self.lam:g}" if self.lam is not None else f"ess{self.ess_target:g}"
        if self.kind == "fedpals_prox":
            return f"fedpals_prox_{knob}_mu{self.prox_mu:g}"
        return f"fedpals_{knob}"


@dataclass(frozen=True)
class FederationConfig:
    arch: ModelArch
    strategy: Strategy
    rounds: int
    local: LocalUpdateConfig = field(default_factory=LocalUpdateConfig)
    client_fraction: float = 1.0
    master_seed: int = 0
    # Target label marginal; known to the server only.
    target: LabelMarginal | None = None

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.client_fraction <= 1:
            raise ValueError("client_fraction must be in (0, 1]")
        if self.strategy.kind in ("fedpals", "fedpals_prox") and self.target is None:
            raise ValueError(f"strategy {self.strategy.kind} needs the target marginal")

    @property
    def effective_local(self) -> LocalUpdateConfig:
        if self.strategy.kind == "fedpals_prox":
            return replace(self.local, prox_mu=self.strategy.prox_mu)
        return self.local


@dataclass(frozen=True)
class ClientUpdate:
    params: ParamVector
    n: int
    marginal: LabelMarginal


@dataclass(frozen=True)
class ClientState:
    id: int
    dataset: Dataset

    @property
    def marginal(self) -> LabelMarginal:
        return self.dataset.marginal

    @property
    def n(self) -> int:
        return len(self.dataset)

    def train(self, arch: ModelArch, global_params: ParamVector, cfg: LocalUpdateConfig, seed) -> ClientUpdate:
        return ClientUpdate(local_update(arch, global_params, self.dataset, cfg, seed), self.n, self.marginal)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    strategy: str
    lam: float
    alpha: np.ndarray
    residual: float
    ess: float
    target_acc: float
    target_loss: float
    macro_f1: float
    wall_ms: float
    coverage: bool
    participants: tuple[int, ...]


def aggregate(updates: Sequence[ParamVector], alpha: AggregationWeights | np.ndarray) -> ParamVector:
    """Convex combination of parameter vectors, accumulated in client order."""
    a = alpha.alpha if isinstance(alpha, AggregationWeights) else np.asarray(alpha, dtype=np.float64)
    if len(updates) == 0 or len(updates) != a.size:
        raise ValueError(f"{len(updates)} updates for {a.size} weights")
    layout = updates[0].layout
    acc = np.zeros(len(updates[0]))
    for w, u in zip(a, updates):
        if u.layout != layout:
            raise ValueError("parameter layouts differ between clients")
        acc += w * u.values
    return ParamVector(acc, layout)


def client_seed(master_seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), 11, int(client_id), int(round_index)])


def select_participants(M: int, fraction: float, master_seed: int, round_index: int) -> list[int]:
    if fraction >= 1.0:
        return list(range(M))
    m = max(1, math.ceil(fraction * M))
    rng = np.random.default_rng([int(master_seed), 13, int(round_index)])
    return sorted(int(i) for i in rng.choice(M, size=m, replace=False))


@dataclass(frozen=True)
class ServerDecision:
    weights: AggregationWeights
    lam: float
    residual: float
    ess: float
    coverage: bool


def server_weights(
    updates: Sequence[ClientUpdate], strategy: Strategy, target: LabelMarginal | None
) -> ServerDecision:
    """Aggregation weights from the information the server is allowed to see."""
    sizes = np.array([u.n for u in updates])
    S = ClientMarginalSet(tuple(u.marginal for u in updates), sizes)
    if strategy.kind in ("fedavg", "oracle"):
        w, lam = fedavg_weights(sizes), math.inf
    else:
        lam = strategy.lam
        if lam is None:
            lam = lambda_for_ess(S, target, strategy.ess_target).lam
        if math.isinf(lam):
            w = fedavg_weights(sizes)
        else:
            w = solve_fedpals(FedPalsProblem(S, target, lam)).weights
    if target is None:
        res, covered = math.nan, False
    else:
        res = residual(S, target, w.alpha)
        covered = projection_distance(target, S) <= COVERAGE_TOL
    return ServerDecision(w, float(lam), res, effective_sample_size(w, sizes), covered)


def _check_oracle(clients: Sequence[ClientState], target: LabelMarginal | None) -> None:
    if target is None:
        return
    # Stratified sampling matches the target up to one sample per class.
    for c in clients:
        if np.max(np.abs(c.marginal.probs - target.probs)) > 1.0 / c.n + 1e-12:
            raise ValueError(f"oracle strategy: client {c.id} marginal differs from the target")


def run_round(
    global_params: ParamVector,
    clients: Sequence[ClientState],
    cfg: FederationConfig,
    round_index: int,
    target_test: Dataset | None = None,
    _cache: dict | None = None,
) -> tuple[ParamVector, RoundRecord]:
    """Broadcast, local training on the sampled clients, aggregation and evaluation."""
    t0 = time.perf_counter()
    M = len(clients)
    if M == 0:
        raise ValueError("no clients")
    part = select_participants(M, cfg.client_fraction, cfg.master_seed, round_index)
    local_cfg = cfg.effective_local
    updates = [
        clients[i].train(cfg.arch, global_params, local_cfg, client_seed(cfg.master_seed, clients[i].id, round_index))
        for i in part
    ]
    key = tuple(part)
    if _cache is not None and key in _cache:
        decision = _cache[key]
    else:
        decision = server_weights(updates, cfg.strategy, cfg.target)
        if _cache is not None:
            _cache[key] = decision
    new_params = aggregate([u.params for u in updates], decision.weights)

    alpha = np.zeros(M)
    alpha[part] = decision.weights.alpha
    if target_test is not None:
        ev = evaluate(cfg.arch, new_params, target_test)
        acc, loss, f1 = ev.accuracy, ev.mean_loss, ev.macro_f1
    else:
        acc = loss = f1 = math.nan
    record = RoundRecord(
        round=round_index,
        strategy=cfg.strategy.name,
        lam=decision.lam,
        alpha=alpha,
        residual=decision.residual,
        ess=decision.ess,
        target_acc=acc,
        target_loss=loss,
        macro_f1=f1,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        coverage=decision.coverage,
        participants=key,
    )
    return new_params, record


def train(
    cfg: FederationConfig,
    clients: Sequence[ClientState],
    target_test: Dataset,
    checkpoint: str | Path | None = None,
    resume: bool = False,
) -> list[RoundRecord]:
    """Run ``cfg.rounds`` rounds from :func:`init_params`, evaluating on ``target_test`` every round.

    With ``checkpoint`` set, parameters and the last completed round are written
    after every round; ``resume`` continues from an existing checkpoint.
    """
    if len(target_test) == 0:
        raise ValueError("empty target test set")
    if cfg.strategy.kind == "oracle":
        _check_oracle(clients, cfg.target)
    params = init_params(cfg.arch, cfg.master_seed)
    start = 1
    if resume and checkpoint is not None and Path(checkpoint).exists():
        params, done = load_params(checkpoint)
        start = done + 1
    cache: dict = {}
    records = []
    for t in range(start, cfg.rounds + 1):
        params, rec = run_round(params, clients, cfg, t, target_test, cache)
        records.append(rec)
        if checkpoint is not None:
            save_params(checkpoint, params, t)
    return records


def verify_unbiasedness(
    clients: Sequence[ClientState],
    alpha_c: AggregationWeights | np.ndarray,
    target_universe: Dataset,
    arch: ModelArch,
    params: ParamVector,
    eta: float,
) -> float:
    """Largest coordinate gap between the aggregated one-step update and the target-data step.

    Clients take one full-batch gradient step from ``params``; since full-batch
    gradients are deterministic the aggregate equals its expectation. The
    instance must have the target marginal inside the client hull.
    """
    S = ClientMarginalSet(tuple(c.marginal for c in clients), np.array([c.n for c in clients]))
    T = target_universe.marginal
    dist = projection_distance(T, S)
    if dist > 1e-12:
        raise ValueError(f"instance violates target coverage: distance to client hull {dist:.3g}")
    updates = []
    for c in clients:
        _, g = loss_and_grad(arch, params, c.dataset)
        updates.append(params.replace(params.values - eta * g.values))
    combined = aggregate(updates, alpha_c)
    _, g_T = loss_and_grad(arch, params, target_universe)
    target_step = params.values - eta * g_T.values
    return float(np.max(np.abs(combined.values - target_step)))
