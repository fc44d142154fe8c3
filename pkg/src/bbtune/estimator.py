"""Gradient estimation from loss queries alone.

Only :mod:`bbtune.core` and :mod:`bbtune.oracle` are imported here; nothing
in this module can reach model internals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, RngStream, as_param, sample_unit_sphere
from .oracle import LossOracle


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings of the stochastic estimator.

    ``b`` and ``beta`` default to ``D`` and ``1/D`` when left as ``None``;
    :meth:`resolve` fills them in for a given dimension.
    """

    q: int = 256
    beta: float | None = None
    b: float | None = None

    def __post_init__(self):
        if int(self.q) != self.q or self.q < 1:
            raise ValueError(f"q must be a positive integer, got {self.q}")
        if self.beta is not None and not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.b is not None and not self.b > 0:
            raise ValueError(f"b must be > 0, got {self.b}")

    def resolve(self, dim: int) -> "EstimatorConfig":
        return EstimatorConfig(
            q=self.q,
            beta=1.0 / dim if self.beta is None else self.beta,
            b=float(dim) if self.b is None else self.b,
        )


@dataclass(frozen=True)
class GradientEstimate:
    grad: np.ndarray
    base_loss: float
    queries_used: int
    config: EstimatorConfig | None = None


@dataclass(frozen=True)
class BoundInputs:
    b: float
    D: int
    q: int
    beta: float
    L: float
    grad_norm_sq: float

    def __post_init__(self):
        if self.D < 1 or self.q < 1:
            raise ValueError("D and q must be >= 1")
        for name in ("b", "beta", "L", "grad_norm_sq"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def estimate_coordinate(oracle: LossOracle, theta, beta: float) -> GradientEstimate:
    """Forward differences along every coordinate; costs ``D + 1`` queries."""
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    theta = as_param(theta, oracle.dim)
    d = theta.size
    stack = np.empty((d + 1, d))
    stack[0] = theta
    stack[1:] = theta + beta * np.eye(d)
    losses = oracle.query_many(stack)
    grad = (losses[1:] - losses[0]) / beta
    return GradientEstimate(grad, float(losses[0]), d + 1)


def estimate_stochastic(oracle: LossOracle, theta, cfg: EstimatorConfig, rng: RngStream) -> GradientEstimate:
    """Average of ``q`` one-sided slopes along random unit directions.

    Each sample contributes ``b * (f(theta + beta*eps) - f(theta)) / beta * eps``.
    The base loss and all perturbed losses go out as one batch of ``q + 1``
    queries; directions are drawn before any query is issued, so the result
    does not depend on how the oracle schedules the batch.
    """
    theta = as_param(theta, oracle.dim)
    cfg = cfg.resolve(theta.size)
    eps = sample_unit_sphere(theta.size, rng, n=cfg.q)
    stack = np.empty((cfg.q + 1, theta.size))
    stack[0] = theta
    stack[1:] = theta + cfg.beta * eps
    losses = oracle.query_many(stack)
    slopes = cfg.b * (losses[1:] - losses[0]) / cfg.beta
    grad = (slopes @ eps) / cfg.q
    return GradientEstimate(grad, float(losses[0]), cfg.q + 1, cfg)


def error_bound(inputs: BoundInputs) -> float:
    """Upper bound on the mean squared error of the stochastic estimate."""
    b, d, q = inputs.b, inputs.D, inputs.q
    first = 4.0 * (b**2 / d**2 + b**2 / (d * q) + (b - d) ** 2 / d**2) * inputs.grad_norm_sq
    second = (2 * q + 1) / q * b**2 * inputs.beta**2 * inputs.L**2
    return first + second


@dataclass(frozen=True)
class EstimateQuality:
    cosine: float
    mse: float


class UndefinedCosine(ValueError):
    def __init__(self, mse: float):
        super().__init__("cosine similarity is undefined for a zero true gradient")
        self.mse = mse


def estimate_quality(grad_est: GradientEstimate | np.ndarray, true_grad) -> EstimateQuality:
    """Cosine similarity and squared error of an estimate against the true gradient.

    Raises :class:`UndefinedCosine` (which carries the squared error) when the
    true gradient is zero.
    """
    g = grad_est.grad if isinstance(grad_est, GradientEstimate) else np.asarray(grad_est, dtype=np.float64)
    t = np.asarray(true_grad, dtype=np.float64)
    if g.shape != t.shape:
        raise DimensionError(f"dimension mismatch: {g.shape} vs {t.shape}")
    mse = float(np.sum((g - t) ** 2))
    tn = float(np.linalg.norm(t))
    if tn == 0.0:
        raise UndefinedCosine(mse)
    gn = float(np.linalg.norm(g))
    cos = 0.0 if gn == 0.0 else float(np.dot(g, t) / (gn * tn))
    return EstimateQuality(max(-1.0, min(1.0, cos)), mse)


def median_cosine(oracle: LossOracle, theta, true_grad, cfg: EstimatorConfig, rng: RngStream, trials: int) -> float:
    cos = [estimate_quality(estimate_stochastic(oracle, theta, cfg, rng.fork(i)), true_grad).cosine for i in range(trials)]
    return float(np.median(cos))


__all__ = [
    "BoundInputs",
    "EstimateQuality",
    "EstimatorConfig",
    "GradientEstimate",
    "UndefinedCosine",
    "error_bound",
    "estimate_coordinate",
    "estimate_quality",
    "estimate_stochastic",
    "median_cosine",
]
