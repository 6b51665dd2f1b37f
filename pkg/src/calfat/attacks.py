"""L-infinity adversarial example generation: FGSM, BIM, and PGD.

The inner objective is pluggable: "ce" climbs the cross-entropy against the
true label, "ckl" climbs the calibrated divergence against the natural
logits (captured once at the clean input and frozen for the whole attack).
sign(0) is 0, so a zero gradient leaves the input untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .losses import ClassPrior, ce_loss, ckl_loss
from .nn import Model, forward, input_gradient

OBJECTIVES = ("ce", "ckl")


@dataclass(frozen=True)
class AttackSpec:
    """Attack hyperparameters: radius, step size, step count, objective."""

    epsilon: float
    alpha: float
    steps: int
    objective: str = "ce"
    random_start: bool = False
    domain_clip: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise ValueError(f"alpha must be finite and > 0, got {self.alpha}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}, expected one of {OBJECTIVES}")
        if self.random_start and self.epsilon <= 0:
            raise ValueError("random_start requires epsilon > 0")
        if self.domain_clip is not None:
            lo, hi = self.domain_clip
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"domain_clip must be a finite (lo, hi) with lo < hi, got {self.domain_clip}")


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    iterations_run: int


def project_linf(
    x_cand: np.ndarray,
    x0: np.ndarray,
    epsilon: float,
    domain_clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Clamp coordinate-wise to [x0 - eps, x0 + eps], then to the domain box."""
    x_cand = np.asarray(x_cand, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x_cand.shape != x0.shape:
        raise ValueError(f"shapes disagree: {x_cand.shape} vs {x0.shape}")
    out = np.clip(x_cand, x0 - epsilon, x0 + epsilon)
    if domain_clip is not None:
        out = np.clip(out, domain_clip[0], domain_clip[1])
    return out


def _objective_grad(
    model: Model,
    x: np.ndarray,
    objective: str,
    y: np.ndarray | None,
    prior: ClassPrior | None,
    nat_logits: np.ndarray | None,
) -> np.ndarray:
    logits = forward(model, x)
    if objective == "ce":
        dlogits = ce_loss(logits, y).dlogits
    else:
        dlogits = ckl_loss(logits, nat_logits, prior).dlogits
    grad = input_gradient(model, x, dlogits)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite input gradient during attack")
    return grad


def _check_aux(spec_objective: str, x: np.ndarray, y, prior, num_classes: int):
    if spec_objective == "ce":
        if y is None:
            raise ValueError("objective 'ce' needs labels y")
        ya = np.asarray(y)
        return ya, prior
    if prior is None:
        raise ValueError("objective 'ckl' needs a class prior")
    if prior.num_classes != num_classes:
        raise ValueError("prior class count does not match model output")
    return y, prior


def pgd(
    model: Model,
    spec: AttackSpec,
    x: np.ndarray,
    y=None,
    prior: ClassPrior | None = None,
    rng: np.random.Generator | int | None = None,
) -> AdversarialBatch:
    """K steps of sign-gradient ascent, each followed by an L-inf projection.

    For the "ckl" objective the natural logits are evaluated once at the
    clean input and held fixed across all steps. With steps=0 the clean
    input is returned (after the optional random start, still in the ball).
    """
    x0 = np.asarray(x, dtype=np.float64)
    y, prior = _check_aux(spec.objective, x0, y, prior, model.num_classes)

    nat_logits = forward(model, x0) if spec.objective == "ckl" else None

    if spec.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng or seed for reproducibility")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        x_cur = x0 + rng.uniform(-spec.epsilon, spec.epsilon, size=x0.shape)
        x_cur = project_linf(x_cur, x0, spec.epsilon, spec.domain_clip)
    else:
        x_cur = project_linf(x0, x0, spec.epsilon, spec.domain_clip)

    for _ in range(spec.steps):
        grad = _objective_grad(model, x_cur, spec.objective, y, prior, nat_logits)
        x_cur = project_linf(x_cur + spec.alpha * np.sign(grad), x0, spec.epsilon, spec.domain_clip)
    return AdversarialBatch(x_cur, spec.steps)


def bim(
    model: Model,
    spec: AttackSpec,
    x: np.ndarray,
    y=None,
    prior: ClassPrior | None = None,
) -> AdversarialBatch:
    """Basic iterative method: PGD with the random start forced off."""
    return pgd(model, replace(spec, random_start=False), x, y=y, prior=prior)


def fgsm(
    model: Model,
    x: np.ndarray,
    epsilon: float,
    y=None,
    prior: ClassPrior | None = None,
    objective: str = "ce",
    domain_clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Single step of size epsilon along the gradient sign."""
    if not np.isfinite(epsilon) or epsilon < 0:
        raise ValueError(f"epsilon must be finite and >= 0, got {epsilon}")
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}, expected one of {OBJECTIVES}")
    x0 = np.asarray(x, dtype=np.float64)
    y, prior = _check_aux(objective, x0, y, prior, model.num_classes)
    nat_logits = forward(model, x0) if objective == "ckl" else None
    grad = _objective_grad(model, x0, objective, y, prior, nat_logits)
    return project_linf(x0 + epsilon * np.sign(grad), x0, epsilon, domain_clip)
