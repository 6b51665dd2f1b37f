"""Federated adversarial training under label skew, with calibrated losses.

Small-scale, fully deterministic simulator: dense networks with analytic
gradients, L-inf attacks (FGSM/BIM/PGD), Dirichlet label-skew partitioning,
FedAvg/FedProx aggregation, and a theory lab that measures how the variance
of fitted client parameters behaves with and without logit calibration.
"""

from .attacks import AdversarialBatch, AttackSpec, bim, fgsm, pgd, project_linf
from .data import (
    ClientDataset,
    Dataset,
    PartitionConfig,
    class_prior,
    dirichlet_partition,
    gen_synthetic,
    load_dataset,
)
from .estimator import FederatedRobustClassifier
from .federation import (
    FederationConfig,
    FederationResult,
    aggregate_fedavg,
    client_update,
    client_update_baseline,
    client_update_calfat,
    fedprox_penalty,
    run_federation,
)
from .losses import ClassPrior, LossValue, cce_loss, ce_loss, ckl_loss, kl_loss, softmax, trades_loss
from .metrics import RoundMetrics, accuracy, heterogeneity_s2, robust_accuracy, write_metrics
from .nn import (
    GradientBundle,
    Model,
    OptimizerState,
    backward,
    flatten,
    forward,
    init_mlp,
    load_model,
    save_model,
    sgd_step,
    unflatten,
)
from .theory import (
    TheoryReport,
    ToyDistribution,
    analytic_posterior,
    fit_local_mle,
    population_mle,
    posterior_gap,
    variance_sweep,
)

__version__ = "0.1.0"

__all__ = [
    "AdversarialBatch",
    "AttackSpec",
    "ClassPrior",
    "ClientDataset",
    "Dataset",
    "FederatedRobustClassifier",
    "FederationConfig",
    "FederationResult",
    "GradientBundle",
    "LossValue",
    "Model",
    "OptimizerState",
    "PartitionConfig",
    "RoundMetrics",
    "TheoryReport",
    "ToyDistribution",
    "accuracy",
    "aggregate_fedavg",
    "analytic_posterior",
    "backward",
    "bim",
    "cce_loss",
    "ce_loss",
    "ckl_loss",
    "class_prior",
    "client_update",
    "client_update_baseline",
    "client_update_calfat",
    "dirichlet_partition",
    "fedprox_penalty",
    "fgsm",
    "fit_local_mle",
    "flatten",
    "forward",
    "gen_synthetic",
    "heterogeneity_s2",
    "init_mlp",
    "kl_loss",
    "load_dataset",
    "load_model",
    "pgd",
    "population_mle",
    "posterior_gap",
    "project_linf",
    "robust_accuracy",
    "run_federation",
    "save_model",
    "sgd_step",
    "softmax",
    "trades_loss",
    "unflatten",
    "variance_sweep",
    "write_metrics",
]
