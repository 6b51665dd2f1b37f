"""Scikit-learn style front door for the federated adversarial trainers.

The estimator hides the federation machinery behind the usual fit/predict
surface: fit() splits the training data across simulated clients with a
Dirichlet label-skew partition, runs the configured number of communication
rounds, and keeps the aggregated global model for prediction. Parameters
follow sklearn conventions (get_params/set_params, random_state), so the
classifier drops into pipelines, grid search, and cross-validation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .attacks import AttackSpec
from .data import Dataset, PartitionConfig, dirichlet_partition
from .federation import FederationConfig, run_federation
from .losses import softmax
from .metrics import robust_accuracy
from .nn import forward
from .validation import check_feature_matrix, check_fitted, check_labels


class FederatedRobustClassifier(BaseEstimator, ClassifierMixin):
    """Classifier trained by simulated federated adversarial training.

    Parameters mirror the federation configuration; `trainer` selects the
    local update rule ("calfat", "fedpgd", "fedtrades", or "mixfat") and
    `beta` controls how skewed the simulated client label distributions are
    (smaller is more skewed).
    """

    def __init__(
        self,
        trainer: str = "calfat",
        num_clients: int = 5,
        beta: float = 0.1,
        rounds: int = 10,
        local_epochs: int = 1,
        hidden: tuple[int, ...] = (128, 128),
        lr: float = 0.01,
        momentum: float = 0.9,
        batch_size: int = 64,
        epsilon: float = 8 / 255,
        alpha: float = 2 / 255,
        attack_steps: int = 10,
        delta: float = 0.01,
        adv_ratio: float = 1.0,
        trades_lambda: float = 6.0,
        aggregator: str = "fedavg",
        mu: float = 0.01,
        domain_clip: tuple[float, float] | None = None,
        random_state: int = 0,
    ):
        self.trainer = trainer
        self.num_clients = num_clients
        self.beta = beta
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.hidden = hidden
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.epsilon = epsilon
        self.alpha = alpha
        self.attack_steps = attack_steps
        self.delta = delta
        self.adv_ratio = adv_ratio
        self.trades_lambda = trades_lambda
        self.aggregator = aggregator
        self.mu = mu
        self.domain_clip = domain_clip
        self.random_state = random_state

    def _federation_config(self) -> FederationConfig:
        from .federation import _TRAINER_OBJECTIVE

        objective = _TRAINER_OBJECTIVE[self.trainer]
        spec = AttackSpec(
            epsilon=self.epsilon,
            alpha=self.alpha,
            steps=self.attack_steps,
            objective=objective,
            random_start=objective == "ckl" and self.epsilon > 0,
            domain_clip=self.domain_clip,
        )
        return FederationConfig(
            trainer=self.trainer,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.batch_size,
            hidden=tuple(self.hidden),
            delta=self.delta,
            adv_ratio=self.adv_ratio,
            trades_lambda=self.trades_lambda,
            aggregator=self.aggregator,
            mu=self.mu,
            train_attack=spec,
            eval_attacks=[],
            seed=self.random_state,
        )

    def fit(self, X, y) -> "FederatedRobustClassifier":
        """Partition (X, y) across simulated clients and train the global model."""
        Xa = check_feature_matrix(X)
        ya = check_labels(y, Xa.shape[0])
        self.classes_, y_idx = np.unique(ya, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = Xa.shape[1]

        data = Dataset(Xa, y_idx, len(self.classes_))
        clients = dirichlet_partition(
            data, PartitionConfig(self.num_clients, self.beta, seed=self.random_state)
        )
        result = run_federation(self._federation_config(), clients, eval_set=data)
        self.model_ = result.model
        self.history_ = result.metrics
        return self

    def decision_function(self, X) -> np.ndarray:
        check_fitted(self, "model_")
        Xa = check_feature_matrix(X)
        if Xa.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {Xa.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.model_, Xa)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def robust_score(self, X, y, steps: int = 20) -> float:
        """Accuracy under a white-box PGD attack of the training radius."""
        check_fitted(self, "model_")
        Xa = check_feature_matrix(X)
        ya = check_labels(y, Xa.shape[0])
        y_idx = np.searchsorted(self.classes_, ya)
        spec = AttackSpec(
            epsilon=self.epsilon,
            alpha=self.alpha,
            steps=steps,
            objective="ce",
            domain_clip=self.domain_clip,
        )
        return robust_accuracy(self.model_, Dataset(Xa, y_idx, len(self.classes_)), spec)
