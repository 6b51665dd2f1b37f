"""Empirical checks of the heterogeneity theory on identifiable toy models.

Label-skewed clients share Gaussian class conditionals but differ in label
priors. On such a toy the posterior is an exact softmax-linear function, so a
linear model with the last class's logit pinned to zero has a unique MLE and
the sample variance of fitted parameters across clients is meaningful.

Three claims are exercised: differing priors force differing posteriors
somewhere on the input range; standard CE fits converge client-by-client to
different parameters, so their variance approaches a nonzero constant; fits
calibrated by each client's log class prior converge to shared parameters,
driving the variance to zero (up to the smoothing constant delta).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .losses import ClassPrior
from .metrics import heterogeneity_s2
from .nn import Model, flatten

PARAMETERIZATIONS = ("standard", "calibrated")


class FitConvergenceError(RuntimeError):
    """MLE fit ran out of budget; carries the final gradient norm."""

    def __init__(self, grad_norm: float, iterations: int):
        super().__init__(
            f"gradient norm {grad_norm:.3e} after {iterations} iterations (target 1e-8)"
        )
        self.grad_norm = grad_norm
        self.iterations = iterations


@dataclass(frozen=True)
class ToyDistribution:
    """Shared isotropic Gaussian class conditionals, per-client label priors."""

    class_means: np.ndarray  # (C,) or (C, d)
    sigma: float
    priors: np.ndarray  # (m, C), rows sum to 1

    def __post_init__(self) -> None:
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        if means.ndim != 2 or means.shape[0] < 2:
            raise ValueError("class_means must give one mean per class, >= 2 classes")
        priors = np.asarray(self.priors, dtype=np.float64)
        if priors.ndim != 2 or priors.shape[1] != means.shape[0]:
            raise ValueError("priors must be (clients, classes)")
        if np.any(priors < 0) or np.any(np.abs(priors.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each client's prior must be a probability vector")
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "priors", priors)

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def num_clients(self) -> int:
        return self.priors.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    def sample(self, client: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.choice(self.num_classes, size=n, p=self.priors[client])
        x = self.class_means[y] + rng.normal(0.0, self.sigma, size=(n, self.dim))
        return x, y


def analytic_posterior(dist: ToyDistribution, client: int, x: np.ndarray) -> np.ndarray:
    """Exact Bayes posterior p(y|x) for one client, vectorized over inputs."""
    xa = np.asarray(x, dtype=np.float64)
    single = xa.ndim <= 1 and dist.dim == 1
    xa = xa.reshape(-1, dist.dim)
    # Shared Gaussian normalizers cancel; only the exponents and priors matter.
    d2 = ((xa[:, None, :] - dist.class_means[None, :, :]) ** 2).sum(axis=2)
    logjoint = -d2 / (2.0 * dist.sigma**2) + np.log(dist.priors[client] + 1e-300)
    logjoint -= logjoint.max(axis=1, keepdims=True)
    p = np.exp(logjoint)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single and p.shape[0] == 1 else p


def default_grid(dist: ToyDistribution, points: int = 601) -> np.ndarray:
    """1-D grid spanning six sigma beyond the range of the class means."""
    if dist.dim != 1:
        raise ValueError("default_grid covers 1-D toys; supply your own grid otherwise")
    lo = dist.class_means.min() - 6.0 * dist.sigma
    hi = dist.class_means.max() + 6.0 * dist.sigma
    return np.linspace(lo, hi, points)


def posterior_gap(dist: ToyDistribution, i: int, u: int, grid: np.ndarray) -> float:
    """max over the grid and classes of |p_i(y|x) - p_u(y|x)|."""
    if i == u:
        raise ValueError("posterior_gap compares two distinct clients")
    if np.array_equal(dist.priors[i], dist.priors[u]):
        warnings.warn(f"clients {i} and {u} have identical priors: not skewed", stacklevel=2)
    pi = analytic_posterior(dist, i, grid)
    pu = analytic_posterior(dist, u, grid)
    return float(np.max(np.abs(pi - pu)))


def _fit_value_grad(
    W: np.ndarray,
    b: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    offset: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    z = X @ W.T + b + offset
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(X.shape[0])
    loss = float(-(weights * logp[rows, y]).sum())
    G = np.exp(logp)
    G[rows, y] -= 1.0
    G *= weights[:, None]
    gW = G.T @ X
    gb = G.sum(axis=0)
    # Gauge: the last class's logit stays pinned at zero.
    gW[-1] = 0.0
    gb[-1] = 0.0
    return loss, gW, gb


def _fit_value(
    W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray, offset: np.ndarray, weights: np.ndarray
) -> float:
    z = X @ W.T + b + offset
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(weights * logp[np.arange(X.shape[0]), y]).sum())


def _weighted_softmax_fit(
    X: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    offset: np.ndarray,
    weights: np.ndarray,
    init: Model | None,
    tol: float,
    max_iter: int,
) -> Model:
    d = X.shape[1]
    if init is None:
        W = np.zeros((num_classes, d))
        b = np.zeros(num_classes)
    else:
        W = init.weights[0].copy()
        b = init.biases[0].copy()
        W[-1] = 0.0
        b[-1] = 0.0
    weights = weights / weights.sum()

    lr = 1.0
    loss, gW, gb = _fit_value_grad(W, b, X, y, offset, weights)
    gnorm = float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)))
    it = 0
    for it in range(max_iter):
        if gnorm < tol:
            return Model([W], [b])
        # Backtracking (Armijo) step on the gauge-projected gradient.
        stepped = False
        while lr > 1e-18:
            W2 = W - lr * gW
            b2 = b - lr * gb
            loss2 = _fit_value(W2, b2, X, y, offset, weights)
            if loss2 < loss - 1e-4 * lr * gnorm * gnorm:
                stepped = True
                break
            lr *= 0.5
        if not stepped:
            break  # loss at float resolution; gnorm decides below
        W, b = W2, b2
        loss, gW, gb = _fit_value_grad(W, b, X, y, offset, weights)
        gnorm = float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)))
        lr = min(lr * 1.5, 64.0)
    if gnorm >= tol:
        raise FitConvergenceError(gnorm, it + 1)
    return Model([W], [b])


def fit_local_mle(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    parameterization: str,
    prior: ClassPrior | None = None,
    init: Model | None = None,
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> Model:
    """Gauge-fixed softmax-linear MLE via full-batch gradient descent.

    "standard" minimizes plain CE; "calibrated" minimizes CE of
    logits + log(prior). The last class's weight row and bias are pinned at
    zero so the optimum is unique; fits from different inits agree to
    optimizer tolerance.
    """
    if parameterization not in PARAMETERIZATIONS:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and labels disagree in length")
    if X.shape[0] < num_classes:
        raise ValueError(f"need at least {num_classes} samples")
    counts = np.bincount(y, minlength=num_classes)
    if np.any(counts == 0):
        raise ValueError("every class needs at least one sample for a finite MLE")
    if parameterization == "calibrated":
        if prior is None:
            raise ValueError("calibrated fitting needs the client's class prior")
        offset = prior.log_adjust
    else:
        offset = np.zeros(num_classes)
    weights = np.full(X.shape[0], 1.0 / X.shape[0])
    return _weighted_softmax_fit(X, y, num_classes, offset, weights, init, tol, max_iter)


def mle_gradient_norm(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    parameterization: str = "standard",
    prior: ClassPrior | None = None,
) -> float:
    """Norm of the gauge-projected mean-CE gradient at `model` (fit diagnostic)."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels, dtype=np.int64)
    C = model.num_classes
    offset = prior.log_adjust if parameterization == "calibrated" and prior is not None else np.zeros(C)
    weights = np.full(X.shape[0], 1.0 / X.shape[0])
    _, gW, gb = _fit_value_grad(model.weights[0], model.biases[0], X, y, offset, weights)
    return float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)))


def bayes_linear_params(dist: ToyDistribution, client: int) -> Model:
    """Closed-form population optimum of the standard fit, gauge-fixed.

    For shared isotropic Gaussians the posterior is softmax-linear with
    W_y = mu_y / sigma^2 and b_y = -|mu_y|^2/(2 sigma^2) + log p(y).
    """
    s2 = dist.sigma**2
    W = dist.class_means / s2
    b = -np.sum(dist.class_means**2, axis=1) / (2.0 * s2) + np.log(dist.priors[client] + 1e-300)
    W = W - W[-1]
    b = b - b[-1]
    return Model([W], [b])


def population_mle(
    dist: ToyDistribution,
    client: int,
    parameterization: str,
    quad_points: int = 96,
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> Model:
    """Fit against the population expected CE via Gauss-Hermite quadrature.

    This is the independent reference for the limiting parameters: node
    x = mu_y + sqrt(2) sigma t turns each class-conditional expectation into
    a weighted finite sample. 1-D toys only. The calibrated variant offsets
    by the log of the true prior.
    """
    if dist.dim != 1:
        raise NotImplementedError("population reference is implemented for 1-D toys")
    if parameterization not in PARAMETERIZATIONS:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    nodes, wq = hermgauss(quad_points)
    C = dist.num_classes
    X = np.concatenate(
        [dist.class_means[c, 0] + np.sqrt(2.0) * dist.sigma * nodes for c in range(C)]
    )[:, None]
    y = np.repeat(np.arange(C), quad_points)
    weights = np.concatenate(
        [dist.priors[client, c] * wq / np.sqrt(np.pi) for c in range(C)]
    )
    if parameterization == "calibrated":
        offset = np.log(dist.priors[client] + 1e-300)
        offset = offset - offset.max()
    else:
        offset = np.zeros(C)
    return _weighted_softmax_fit(X, y, C, offset, weights, None, tol, max_iter)


@dataclass
class TheoryReport:
    """Variance-vs-sample-size curves plus the analytic references."""

    sizes: list[int]
    s2_standard: list[float]  # median over seeds, one entry per size
    s2_calibrated: list[float]
    s2_standard_raw: list[list[float]]  # [seed][size]
    s2_calibrated_raw: list[list[float]]
    posterior_gaps: np.ndarray  # (m, m) max posterior gap per client pair
    s_star_sq: float  # variance of the population standard fits
    theta_star_standard: list[list[float]]  # per-client population fit, flattened
    theta_star_calibrated: list[list[float]]
    seeds: list[int]
    delta: float
    resamples: int = 0

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "s2_standard": self.s2_standard,
            "s2_calibrated": self.s2_calibrated,
            "s2_standard_raw": self.s2_standard_raw,
            "s2_calibrated_raw": self.s2_calibrated_raw,
            "posterior_gaps": self.posterior_gaps.tolist(),
            "s_star_sq": self.s_star_sq,
            "theta_star_standard": self.theta_star_standard,
            "theta_star_calibrated": self.theta_star_calibrated,
            "seeds": list(self.seeds),
            "delta": self.delta,
            "resamples": self.resamples,
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("n,s2_standard,s2_calibrated\n")
            for n, a, c in zip(self.sizes, self.s2_standard, self.s2_calibrated):
                fh.write(f"{n},{a!r},{c!r}\n")


def variance_sweep(
    dist: ToyDistribution,
    sizes: list[int],
    seeds: list[int],
    delta: float = 0.01,
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> TheoryReport:
    """Sample, fit both parameterizations per client, and track the variance.

    For each seed and sample size every client draws n points from its own
    prior (shared conditionals), both fits run on the same draw, and the
    across-client parameter variance is recorded. A draw missing a class
    entirely is redrawn (counted in the report) because the MLE would not
    exist. Medians across seeds give the reported curves.
    """
    if dist.num_clients < 2:
        raise ValueError("variance needs at least two clients")
    sizes = [int(n) for n in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")

    m = dist.num_clients
    resamples = 0
    s2_std_raw = [[0.0] * len(sizes) for _ in seeds]
    s2_cal_raw = [[0.0] * len(sizes) for _ in seeds]
    for si, seed in enumerate(seeds):
        for ni, n in enumerate(sizes):
            std_fits, cal_fits = [], []
            for client in range(m):
                rng = np.random.default_rng(np.random.SeedSequence((seed, ni, client)))
                x, y = dist.sample(client, n, rng)
                while np.any(np.bincount(y, minlength=dist.num_classes) == 0):
                    resamples += 1
                    warnings.warn(
                        f"client {client} drew no samples of some class at n={n}; redrawing",
                        stacklevel=2,
                    )
                    x, y = dist.sample(client, n, rng)
                counts = np.bincount(y, minlength=dist.num_classes)
                prior = ClassPrior.from_counts(counts, delta)
                std_fits.append(
                    fit_local_mle(x, y, dist.num_classes, "standard", tol=tol, max_iter=max_iter)
                )
                cal_fits.append(
                    fit_local_mle(
                        x, y, dist.num_classes, "calibrated", prior, tol=tol, max_iter=max_iter
                    )
                )
            s2_std_raw[si][ni] = heterogeneity_s2(std_fits)
            s2_cal_raw[si][ni] = heterogeneity_s2(cal_fits)

    gaps = np.zeros((m, m))
    if dist.dim == 1:
        grid = default_grid(dist)
        for i in range(m):
            for u in range(i + 1, m):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    gaps[i, u] = gaps[u, i] = posterior_gap(dist, i, u, grid)

    theta_std = [population_mle(dist, c, "standard") for c in range(m)] if dist.dim == 1 else []
    theta_cal = [population_mle(dist, c, "calibrated") for c in range(m)] if dist.dim == 1 else []
    s_star_sq = heterogeneity_s2(theta_std) if theta_std else float("nan")

    med = lambda raw: [float(np.median([raw[si][ni] for si in range(len(seeds))])) for ni in range(len(sizes))]
    return TheoryReport(
        sizes=sizes,
        s2_standard=med(s2_std_raw),
        s2_calibrated=med(s2_cal_raw),
        s2_standard_raw=s2_std_raw,
        s2_calibrated_raw=s2_cal_raw,
        posterior_gaps=gaps,
        s_star_sq=float(s_star_sq),
        theta_star_standard=[flatten(t).tolist() for t in theta_std],
        theta_star_calibrated=[flatten(t).tolist() for t in theta_cal],
        seeds=list(seeds),
        delta=delta,
        resamples=resamples,
    )


@dataclass
class TheoryCheck:
    name: str
    passed: bool
    detail: str


def check_report(dist: ToyDistribution, report: TheoryReport) -> list[TheoryCheck]:
    """The verification gate: posterior gaps, calibrated decay, separation."""
    checks = []

    differing = []
    for i in range(dist.num_clients):
        for u in range(i + 1, dist.num_clients):
            if not np.array_equal(dist.priors[i], dist.priors[u]):
                differing.append((i, u, report.posterior_gaps[i, u]))
    bad = [(i, u, g) for i, u, g in differing if g <= 0]
    checks.append(
        TheoryCheck(
            "lemma_posterior_gap",
            not bad,
            f"min gap over differing-prior pairs = {min((g for _, _, g in differing), default=float('nan')):.6g}"
            if differing
            else "no differing-prior pairs",
        )
    )

    tail = report.s2_calibrated[-3:]
    decreasing = all(a > b for a, b in zip(tail, tail[1:]))
    checks.append(
        TheoryCheck(
            "calibrated_variance_decreasing",
            decreasing,
            f"calibrated s2 tail {['%.4g' % v for v in tail]}",
        )
    )

    if differing:
        ratio = (
            report.s2_standard[-1] / report.s2_calibrated[-1]
            if report.s2_calibrated[-1] > 0
            else float("inf")
        )
        checks.append(
            TheoryCheck(
                "standard_vs_calibrated_ratio",
                ratio >= 10.0,
                f"s2_standard/s2_calibrated at n={report.sizes[-1]} is {ratio:.2f} (need >= 10)",
            )
        )
    else:
        # the separation claim presumes skew; without it both variances vanish
        checks.append(
            TheoryCheck(
                "standard_vs_calibrated_ratio",
                True,
                "no label skew configured; separation not applicable",
            )
        )
    return checks
