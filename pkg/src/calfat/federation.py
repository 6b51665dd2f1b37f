"""Federated adversarial training: local updates, aggregation, round loop.

Four local trainers are supported. "calfat" computes the client's smoothed
class prior once per update, generates adversarial examples by climbing the
calibrated divergence, and descends the calibrated cross-entropy. The
baselines are "fedpgd" (CE adversary, CE descent), "fedtrades" (KL adversary,
natural CE plus a weighted KL pull between branches), and "mixfat" (CE
adversarial training on an adv_ratio fraction of each batch, plain CE on the
rest).

Determinism: every client update in round t draws from a generator seeded by
(seed, t, client_id), so trajectories are bit-identical no matter how client
execution is scheduled. The CALFAT_THREADS environment variable caps how many
clients run concurrently within a round (default: sequential).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackSpec, pgd
from .data import ClientDataset, Dataset, EmptyClientError, class_prior
from .losses import ClassPrior, ce_loss, cce_loss, trades_loss
from .metrics import RoundMetrics, accuracy, heterogeneity_s2, robust_accuracy
from .nn import (
    GradientBundle,
    Model,
    OptimizerState,
    backward,
    flatten,
    forward,
    init_mlp,
    sgd_step,
    unflatten,
)

TRAINERS = ("calfat", "fedpgd", "fedtrades", "mixfat")
AGGREGATORS = ("fedavg", "fedprox")

# Adversarial objective each trainer uses when the attack spec leaves it open.
_TRAINER_OBJECTIVE = {"calfat": "ckl", "fedpgd": "ce", "fedtrades": "ckl", "mixfat": "ce"}

# Namespace keys for seed streams that must not collide with client ids.
_INIT_STREAM = 2**33
_EVAL_STREAM = 2**33 + 1


def default_train_attack(trainer: str, domain_clip: tuple[float, float] | None = None) -> AttackSpec:
    """Training-time attack defaults: eps 8/255, alpha 2/255, 10 steps.

    Divergence-driven adversaries ("ckl") get a random start: their gradient
    is exactly zero at the clean input, so a cold-started climb never moves.
    """
    objective = _TRAINER_OBJECTIVE[trainer]
    return AttackSpec(
        epsilon=8 / 255,
        alpha=2 / 255,
        steps=10,
        objective=objective,
        random_start=objective == "ckl",
        domain_clip=domain_clip,
    )


@dataclass
class FederationConfig:
    """Everything one federated run needs besides the data itself.

    If train_attack is None a trainer-appropriate default is built; an
    explicitly provided spec is honored as-is, including its objective.
    """

    trainer: str = "calfat"
    rounds: int = 50
    local_epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    hidden: tuple[int, ...] = (128, 128)
    delta: float = 0.01
    adv_ratio: float = 1.0
    trades_lambda: float = 6.0
    aggregator: str = "fedavg"
    mu: float = 0.01
    train_attack: AttackSpec | None = None
    eval_attacks: list[tuple[str, AttackSpec]] = field(default_factory=list)
    eval_attack_every: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.trainer not in TRAINERS:
            raise ValueError(f"unknown trainer {self.trainer!r}, expected one of {TRAINERS}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}, expected one of {AGGREGATORS}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if not np.isfinite(self.lr) or self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not np.isfinite(self.delta) or self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not 0.0 <= self.adv_ratio <= 1.0:
            raise ValueError(f"adv_ratio must lie in [0, 1], got {self.adv_ratio}")
        if self.trades_lambda < 0:
            raise ValueError(f"trades_lambda must be >= 0, got {self.trades_lambda}")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.eval_attack_every < 1:
            raise ValueError(f"eval_attack_every must be >= 1, got {self.eval_attack_every}")
        if self.train_attack is None:
            self.train_attack = default_train_attack(self.trainer)


@dataclass
class GlobalState:
    """Server-side view: current global model and the latest round's uploads."""

    model: Model
    round_index: int = 0
    uploads: list[tuple[Model, int]] = field(default_factory=list)


@dataclass
class FederationResult:
    model: Model
    metrics: list[RoundMetrics]


def fedprox_penalty(model: Model, anchor: Model, mu: float) -> tuple[float, GradientBundle]:
    """Proximal term (mu/2)*||theta - anchor||^2 and its exact gradient."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    penalty = 0.0
    w_grads, b_grads = [], []
    for (w, b), (aw, ab) in zip(
        zip(model.weights, model.biases), zip(anchor.weights, anchor.biases)
    ):
        dw = w - aw
        db = b - ab
        penalty += float(np.sum(dw * dw) + np.sum(db * db))
        w_grads.append(mu * dw)
        b_grads.append(mu * db)
    return 0.5 * mu * penalty, GradientBundle(w_grads, b_grads)


def aggregate_fedavg(models: list[Model], weights: list[float]) -> Model:
    """Sample-count weighted average of flattened parameters."""
    if not models:
        raise ValueError("nothing to aggregate")
    if len(models) != len(weights):
        raise ValueError("one weight per model required")
    ref = models[0]
    for m in models[1:]:
        if [w.shape for w in m.weights] != [w.shape for w in ref.weights]:
            raise ValueError("models have incompatible layer shapes")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("aggregation weights sum to zero")
    w = w / total  # normalize first so a single model is returned unchanged
    flats = np.stack([flatten(m) for m in models])
    return unflatten((w[:, None] * flats).sum(axis=0), ref)


def _accumulate(target: GradientBundle, extra: GradientBundle) -> GradientBundle:
    for gw, ew in zip(target.weights, extra.weights):
        gw += ew
    for gb, eb in zip(target.biases, extra.biases):
        gb += eb
    return target


def _batch_gradients(
    model: Model,
    trainer: str,
    xb: np.ndarray,
    yb: np.ndarray,
    x_adv: np.ndarray,
    prior: ClassPrior,
    trades_lambda: float,
) -> GradientBundle:
    n = xb.shape[0]
    if trainer == "calfat":
        lv = cce_loss(forward(model, x_adv), yb, prior)
        return backward(model, x_adv, lv.dlogits / n, with_input_grads=False)
    if trainer == "fedtrades":
        logits_nat = forward(model, xb)
        logits_adv = forward(model, x_adv)
        lv = trades_loss(logits_nat, logits_adv, yb, trades_lambda)
        grads = backward(model, xb, lv.dlogits_nat / n, with_input_grads=False)
        return _accumulate(grads, backward(model, x_adv, lv.dlogits / n, with_input_grads=False))
    # fedpgd and mixfat descend plain CE on the (possibly partially) attacked batch
    lv = ce_loss(forward(model, x_adv), yb)
    return backward(model, x_adv, lv.dlogits / n, with_input_grads=False)


def _local_train(
    trainer: str,
    global_model: Model,
    client: ClientDataset,
    cfg: FederationConfig,
    rng: np.random.Generator,
) -> Model:
    if client.n == 0:
        raise EmptyClientError("client has no samples; skip it for this round")
    spec = cfg.train_attack
    if trainer == "fedtrades" and spec.objective != "ckl":
        # the TRADES adversary climbs the KL term regardless of the configured
        # kind, and a divergence climb needs the warm start to move at all
        spec = replace(spec, objective="ckl", random_start=spec.epsilon > 0)

    prior = class_prior(client, cfg.delta)
    attack_prior = prior if trainer == "calfat" else ClassPrior.uniform(client.num_classes, cfg.delta)
    adv_ratio = cfg.adv_ratio if trainer in ("calfat", "mixfat") else 1.0

    model = global_model.copy()
    opt = OptimizerState(cfg.lr, cfg.momentum)
    proximal = cfg.aggregator == "fedprox" and cfg.mu > 0

    for _ in range(cfg.local_epochs):
        order = rng.permutation(client.n)
        for start in range(0, client.n, cfg.batch_size):
            take = order[start : start + cfg.batch_size]
            xb = client.features[take]
            yb = client.labels[take]
            n_adv = int(round(adv_ratio * len(take)))
            if n_adv == len(take):
                x_adv = pgd(model, spec, xb, y=yb, prior=attack_prior, rng=rng).x_adv
            elif n_adv == 0:
                x_adv = xb
            else:
                x_adv = xb.copy()
                x_adv[:n_adv] = pgd(
                    model, spec, xb[:n_adv], y=yb[:n_adv], prior=attack_prior, rng=rng
                ).x_adv
            grads = _batch_gradients(model, trainer, xb, yb, x_adv, prior, cfg.trades_lambda)
            if proximal:
                _accumulate(grads, fedprox_penalty(model, global_model, cfg.mu)[1])
            model = sgd_step(model, grads, opt)
    return model


def client_update_calfat(
    global_model: Model,
    client: ClientDataset,
    cfg: FederationConfig,
    rng: np.random.Generator,
) -> Model:
    """One client's calibrated adversarial update (prior computed once here)."""
    return _local_train("calfat", global_model, client, cfg, rng)


def client_update_baseline(
    kind: str,
    global_model: Model,
    client: ClientDataset,
    cfg: FederationConfig,
    rng: np.random.Generator,
) -> Model:
    """Baseline local update: kind is "fedpgd", "fedtrades", or "mixfat"."""
    if kind not in ("fedpgd", "fedtrades", "mixfat"):
        raise ValueError(f"unknown baseline {kind!r}")
    return _local_train(kind, global_model, client, cfg, rng)


def client_update(
    global_model: Model,
    client: ClientDataset,
    cfg: FederationConfig,
    rng: np.random.Generator,
) -> Model:
    """Dispatch on cfg.trainer."""
    if cfg.trainer == "calfat":
        return client_update_calfat(global_model, client, cfg, rng)
    return client_update_baseline(cfg.trainer, global_model, client, cfg, rng)


def client_stream(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """The per-client generator for one round; keyed so scheduling cannot matter."""
    return np.random.default_rng(np.random.SeedSequence((seed, round_index, client_id)))


def _max_workers() -> int:
    raw = os.environ.get("CALFAT_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_federation(
    cfg: FederationConfig,
    clients: list[ClientDataset],
    eval_set: Dataset,
    initial_model: Model | None = None,
) -> FederationResult:
    """Run the full round loop and evaluate the global model after each round.

    Non-empty clients all participate every round. Heterogeneity is measured
    over the uploaded local models before aggregation (0.0 when fewer than
    two clients uploaded). Robust evaluation runs on rounds where
    (t+1) % eval_attack_every == 0 and always on the final round.
    """
    if not clients:
        raise ValueError("no clients")
    if all(c.n == 0 for c in clients):
        raise ValueError("all clients are empty")
    for c in clients:
        if c.num_classes != eval_set.num_classes:
            raise ValueError("client/eval class counts disagree")
        if c.n and c.features.shape[1] != eval_set.dim:
            raise ValueError("client/eval feature dimensions disagree")

    if initial_model is None:
        init_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _INIT_STREAM)))
        model = init_mlp(eval_set.dim, cfg.hidden, eval_set.num_classes, init_rng)
    else:
        model = initial_model.copy()

    state = GlobalState(model)
    workers = _max_workers()
    metrics: list[RoundMetrics] = []
    active = [(cid, c) for cid, c in enumerate(clients) if c.n > 0]

    for t in range(cfg.rounds):
        def _one(entry: tuple[int, ClientDataset]) -> tuple[Model, int]:
            cid, client = entry
            return client_update(state.model, client, cfg, client_stream(cfg.seed, t, cid)), client.n

        if workers > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=min(workers, len(active))) as pool:
                uploads = list(pool.map(_one, active))
        else:
            uploads = [_one(entry) for entry in active]

        models = [m for m, _ in uploads]
        weights = [n for _, n in uploads]
        s2 = heterogeneity_s2(models) if len(models) >= 2 else 0.0
        state.model = aggregate_fedavg(models, weights)
        state.round_index = t
        state.uploads = uploads

        nat, per_class = accuracy(state.model, eval_set)
        rob: dict[str, float] = {}
        if (t + 1) % cfg.eval_attack_every == 0 or t == cfg.rounds - 1:
            for k, (name, spec) in enumerate(cfg.eval_attacks):
                rng = (
                    np.random.default_rng(np.random.SeedSequence((cfg.seed, t, _EVAL_STREAM + k)))
                    if spec.random_start
                    else None
                )
                rob[name] = robust_accuracy(state.model, eval_set, spec, rng=rng)
        metrics.append(RoundMetrics(t, nat, s2, rob, per_class))

    return FederationResult(state.model, metrics)
