"""Classification and calibration losses with exact logit gradients.

All losses accept a single logit vector (C,) or a batch (n, C) and return
per-sample values; batched parameter training scales the returned logit
gradients by 1/n before backpropagation.

Calibration adds a per-class log-prior offset inside the softmax. The offset
is stored max-centered, which leaves every loss value unchanged (softmax
shift invariance) but makes the uniform-prior case collapse to the plain
loss through the identical floating-point path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class ClassPrior:
    """Smoothed per-class frequency vector pi[y] = count[y]/n + delta."""

    pi: np.ndarray
    delta: float

    def __post_init__(self) -> None:
        pi = np.asarray(self.pi, dtype=np.float64)
        object.__setattr__(self, "pi", pi)
        if not np.isfinite(self.delta) or self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if pi.ndim != 1 or pi.size < 2:
            raise ValueError("prior must be a vector over >= 2 classes")
        if np.any(pi < self.delta - 1e-15):
            raise ValueError("every prior entry must be at least delta")
        if abs(float(np.sum(pi - self.delta)) - 1.0) > 1e-9:
            raise ValueError("class frequencies (prior minus delta) must sum to 1")
        # Max-centered log prior: identically zero for a uniform prior.
        log_pi = np.log(pi)
        object.__setattr__(self, "log_adjust", log_pi - np.max(log_pi))

    log_adjust: np.ndarray = field(init=False, repr=False)

    @property
    def num_classes(self) -> int:
        return self.pi.size

    @classmethod
    def from_counts(cls, counts: np.ndarray, delta: float) -> "ClassPrior":
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total <= 0:
            raise ValueError("cannot build a class prior from zero samples")
        return cls(counts / total + delta, delta)

    @classmethod
    def uniform(cls, num_classes: int, delta: float) -> "ClassPrior":
        return cls(np.full(num_classes, 1.0 / num_classes) + delta, delta)


@dataclass
class LossValue:
    """Per-sample loss plus the gradient w.r.t. the (adversarial-branch) logits.

    `dlogits_nat` is populated only by losses that also differentiate through
    a natural branch (the robustness composite).
    """

    loss: np.ndarray
    dlogits: np.ndarray
    dlogits_nat: np.ndarray | None = None


def _as_logit_batch(logits: np.ndarray, what: str = "logits") -> tuple[np.ndarray, bool]:
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2:
        raise ValueError(f"{what} must be (C,) or (n, C), got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{what} contain non-finite values")
    return z, single


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax along the last axis."""
    z, single = _as_logit_batch(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(y, n: int, num_classes: int) -> np.ndarray:
    ya = np.asarray(y)
    if ya.ndim == 0:
        ya = ya[None]
    if ya.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {ya.shape}")
    ya = ya.astype(np.int64)
    if np.any(ya < 0) or np.any(ya >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes})")
    return ya


def _nll(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Negative log softmax likelihood and its logit gradient p - onehot(y).
    logp = _log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return loss, grad


def ce_loss(logits: np.ndarray, y) -> LossValue:
    """Cross-entropy -log softmax(logits)[y]."""
    z, single = _as_logit_batch(logits)
    ya = _check_labels(y, z.shape[0], z.shape[1])
    loss, grad = _nll(z, ya)
    if single:
        return LossValue(loss[0], grad[0])
    return LossValue(loss, grad)


def cce_loss(logits: np.ndarray, y, prior: ClassPrior) -> LossValue:
    """Calibrated cross-entropy: CE evaluated on logits + log(prior).

    The prior is a constant, so the gradient with respect to the logits is
    softmax(logits + log pi) - onehot(y).
    """
    z, single = _as_logit_batch(logits)
    if prior.num_classes != z.shape[1]:
        raise ValueError(f"prior covers {prior.num_classes} classes, logits have {z.shape[1]}")
    ya = _check_labels(y, z.shape[0], z.shape[1])
    loss, grad = _nll(z + prior.log_adjust, ya)
    if single:
        return LossValue(loss[0], grad[0])
    return LossValue(loss, grad)


def ckl_loss(logits_adv: np.ndarray, logits_nat: np.ndarray, prior: ClassPrior) -> LossValue:
    """Calibrated divergence driving adversarial generation.

    loss = -sum_y softmax(nat + log pi)[y] * log softmax(adv + log pi)[y];
    the natural branch is treated as a constant, so the gradient w.r.t. the
    adversarial logits is softmax(adv + log pi) - softmax(nat + log pi).
    """
    za, single = _as_logit_batch(logits_adv, "adversarial logits")
    zn, single_n = _as_logit_batch(logits_nat, "natural logits")
    if za.shape != zn.shape:
        raise ValueError(f"logit shapes disagree: {za.shape} vs {zn.shape}")
    if prior.num_classes != za.shape[1]:
        raise ValueError(f"prior covers {prior.num_classes} classes, logits have {za.shape[1]}")
    p_nat = np.exp(_log_softmax(zn + prior.log_adjust))
    logq = _log_softmax(za + prior.log_adjust)
    loss = -(p_nat * logq).sum(axis=1)
    grad = np.exp(logq) - p_nat
    if single and single_n:
        return LossValue(loss[0], grad[0])
    return LossValue(loss, grad)


def kl_loss(logits_adv: np.ndarray, logits_nat: np.ndarray) -> LossValue:
    """Uncalibrated counterpart of :func:`ckl_loss` (uniform prior)."""
    za, single = _as_logit_batch(logits_adv, "adversarial logits")
    zn, _ = _as_logit_batch(logits_nat, "natural logits")
    if za.shape != zn.shape:
        raise ValueError(f"logit shapes disagree: {za.shape} vs {zn.shape}")
    p_nat = np.exp(_log_softmax(zn))
    logq = _log_softmax(za)
    loss = -(p_nat * logq).sum(axis=1)
    grad = np.exp(logq) - p_nat
    if single:
        return LossValue(loss[0], grad[0])
    return LossValue(loss, grad)


def trades_loss(logits_nat: np.ndarray, logits_adv: np.ndarray, y, lam: float) -> LossValue:
    """Natural CE plus lam * KL(softmax(nat) || softmax(adv)).

    Returns gradients for both branches: `dlogits` for the adversarial
    logits, `dlogits_nat` for the natural ones (the KL term depends on both).
    """
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    zn, single = _as_logit_batch(logits_nat, "natural logits")
    za, single_a = _as_logit_batch(logits_adv, "adversarial logits")
    if zn.shape != za.shape:
        raise ValueError(f"logit shapes disagree: {zn.shape} vs {za.shape}")
    ya = _check_labels(y, zn.shape[0], zn.shape[1])

    ce_val, dnat = _nll(zn, ya)
    logp = _log_softmax(zn)
    logq = _log_softmax(za)
    p = np.exp(logp)
    q = np.exp(logq)
    kl = (p * (logp - logq)).sum(axis=1)
    loss = ce_val + lam * kl
    dadv = lam * (q - p)
    # d KL / d nat-logits = p * (log p - log q - KL), row-wise.
    dnat = dnat + lam * p * (logp - logq - kl[:, None])
    if single and single_a:
        return LossValue(loss[0], dadv[0], dnat[0])
    return LossValue(loss, dadv, dnat)
