"""Federated aggregation under label shift.

Aggregation weights are chosen on the probability simplex to bring the mix of
client label distributions close to a known target label distribution, with a
penalty that keeps the effective sample size of the aggregate large.
"""

from fedpals.aggregation import (
    AggregationWeights,
    FedPalsProblem,
    SolveReport,
    effective_sample_size,
    fedavg_weights,
    fedpals_limit_weights,
    lambda_for_ess,
    project_to_simplex,
    solve_fedpals,
)
from fedpals.distshift import (
    Dataset,
    GaussianTaskSpec,
    PartitionSpec,
    dirichlet_partition,
    make_target_delta,
    perturb_target,
    sample_gaussian_dataset,
    sparsity_partition,
)
from fedpals.federation import (
    ClientState,
    FederationConfig,
    RoundRecord,
    Strategy,
    aggregate,
    run_round,
    train,
    verify_unbiasedness,
)
from fedpals.labelspace import (
    ClientMarginalSet,
    LabelMarginal,
    check_coverage,
    empirical_marginal,
    projection_distance,
)
from fedpals.learners import (
    LocalUpdateConfig,
    ModelArch,
    ParamVector,
    evaluate,
    init_params,
    local_update,
    loss_and_grad,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationWeights",
    "ClientMarginalSet",
    "ClientState",
    "Dataset",
    "FederationConfig",
    "FedPalsProblem",
    "GaussianTaskSpec",
    "LabelMarginal",
    "LocalUpdateConfig",
    "ModelArch",
    "ParamVector",
    "PartitionSpec",
    "RoundRecord",
    "SolveReport",
    "Strategy",
    "aggregate",
    "check_coverage",
    "dirichlet_partition",
    "effective_sample_size",
    "empirical_marginal",
    "evaluate",
    "fedavg_weights",
    "fedpals_limit_weights",
    "init_params",
    "lambda_for_ess",
    "local_update",
    "loss_and_grad",
    "make_target_delta",
    "perturb_target",
    "project_to_simplex",
    "projection_distance",
    "run_round",
    "sample_gaussian_dataset",
    "solve_fedpals",
    "sparsity_partition",
    "train",
    "verify_unbiasedness",
]
