"""Optimizers driven by loss queries or estimated gradients.

The step functions are pure: they take a state and inputs and return a new
state and new parameters. The ``*Driver`` classes at the bottom hold that
state across iterations for the trainer and share one calling convention::

    theta, observed_loss = driver.step(oracle, theta, k, rng)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import DimensionError, RngStream, as_param
from .estimator import EstimatorConfig, estimate_stochastic
from .oracle import LossOracle


class StateCorruption(RuntimeError):
    pass


def _check_grad(grad: np.ndarray, dim: int) -> None:
    if grad.shape != (dim,):
        raise DimensionError(f"gradient shape {grad.shape} does not match dimension {dim}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient has non-finite entries")


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    _check_grad(grad, theta.size)
    return theta - lr * grad


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, **hyper) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), **hyper)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("lr and eps must be > 0")


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update."""
    if state.m.shape != theta.shape:
        raise DimensionError(f"Adam state has dimension {state.m.size}, parameters {theta.size}")
    _check_grad(grad, theta.size)
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), new_theta


@dataclass(frozen=True)
class SpsaGcState:
    """SPSA with look-ahead gradient correction.

    Gains follow ``a_k = a / (k + A)**alpha`` and ``c_k = c / k**gamma_c``.
    """

    momentum: np.ndarray
    gamma: float = 0.9
    a: float = 0.05
    c: float = 0.01
    A: float = 0.0
    alpha: float = 0.602
    gamma_c: float = 0.101
    n_two_side: int = 5

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not (self.a > 0 and self.c > 0):
            raise ValueError("a and c must be > 0")
        if self.n_two_side < 1:
            raise ValueError("n_two_side must be >= 1")

    def gains(self, k: int) -> tuple[float, float]:
        return self.a / (k + self.A) ** self.alpha, self.c / k**self.gamma_c


def spsa_gradient(oracle: LossOracle, theta: np.ndarray, c: float, deltas: np.ndarray) -> tuple[np.ndarray, float]:
    """Average two-sided estimate over the Rademacher rows of ``deltas``.

    Returns the estimate and the mean of all queried losses.
    """
    n = deltas.shape[0]
    stack = np.empty((2 * n, theta.size))
    stack[0::2] = theta + c * deltas
    stack[1::2] = theta - c * deltas
    losses = oracle.query_many(stack)
    diffs = (losses[0::2] - losses[1::2]) / (2 * c)
    # 1/delta == delta for +-1 entries
    return (diffs @ deltas) / n, float(losses.mean())


def spsa_gc_step(
    state: SpsaGcState, oracle: LossOracle, theta: np.ndarray, k: int, rng: RngStream
) -> tuple[SpsaGcState, np.ndarray, float]:
    """One SPSA-GC iteration (``k`` counts from 1); costs ``2 * n_two_side`` queries.

    Returns the new state, the new parameters and the mean observed loss.
    """
    if k < 1:
        raise ValueError("iteration counter starts at 1")
    a_k, c_k = state.gains(k)
    look = theta - a_k * state.gamma * state.momentum
    deltas = 2.0 * rng.gen.integers(0, 2, size=(state.n_two_side, theta.size)) - 1.0
    g_hat, observed = spsa_gradient(oracle, look, c_k, deltas)
    momentum = state.gamma * state.momentum + g_hat
    return replace(state, momentum=momentum), theta - a_k * momentum, observed


@dataclass(frozen=True)
class CmaEsState:
    """(mu/mu_w, lambda) CMA-ES state with CSA and rank-one + rank-mu updates."""

    mean: np.ndarray
    sigma: float
    C: np.ndarray
    pc: np.ndarray
    ps: np.ndarray
    popsize: int
    generation: int = 0
    B: np.ndarray | None = None
    Dv: np.ndarray | None = None

    @classmethod
    def initial(cls, mean, sigma: float, popsize: int = 10) -> "CmaEsState":
        mean = as_param(mean)
        n = mean.size
        if popsize < 2:
            raise ValueError("popsize must be >= 2")
        if not sigma > 0:
            raise ValueError("sigma must be > 0")
        return cls(mean, float(sigma), np.eye(n), np.zeros(n), np.zeros(n), int(popsize), 0, np.eye(n), np.ones(n))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class _CmaConstants:
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float


def _cma_constants(n: int, lam: int) -> _CmaConstants:
    mu = lam // 2
    w = math.log((lam + 1) / 2) - np.log(np.arange(1, mu + 1))
    w = w / w.sum()
    mueff = 1.0 / float(np.sum(w**2))
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
    return _CmaConstants(mu, w, mueff, cc, cs, c1, cmu, damps, chi_n)


def cmaes_ask(state: CmaEsState, rng: RngStream) -> np.ndarray:
    """Sample ``popsize`` candidates (rows) from ``N(mean, sigma^2 C)``."""
    if state.Dv is None or np.any(~np.isfinite(state.Dv)) or np.any(state.Dv <= 0):
        raise StateCorruption("covariance matrix is not positive definite")
    z = rng.gen.standard_normal((state.popsize, state.dim))
    y = (z * state.Dv) @ state.B.T
    return state.mean + state.sigma * y


def cmaes_tell(state: CmaEsState, candidates: np.ndarray, losses) -> CmaEsState:
    candidates = np.asarray(candidates, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if candidates.shape != (state.popsize, state.dim) or losses.shape != (state.popsize,):
        raise ValueError(
            f"tell expects {state.popsize} candidates of dimension {state.dim} and as many losses, "
            f"got {candidates.shape} and {losses.shape}"
        )
    n = state.dim
    k = _cma_constants(n, state.popsize)
    order = np.argsort(losses, kind="stable")[: k.mu]
    y = (candidates[order] - state.mean) / state.sigma
    y_w = k.weights @ y
    mean = state.mean + state.sigma * y_w

    c_inv_sqrt = (state.B / state.Dv) @ state.B.T
    ps = (1 - k.cs) * state.ps + math.sqrt(k.cs * (2 - k.cs) * k.mueff) * (c_inv_sqrt @ y_w)
    g = state.generation + 1
    ps_norm = float(np.linalg.norm(ps))
    hsig = ps_norm / math.sqrt(1 - (1 - k.cs) ** (2 * g)) / k.chi_n < 1.4 + 2 / (n + 1)
    pc = (1 - k.cc) * state.pc + (math.sqrt(k.cc * (2 - k.cc) * k.mueff) * y_w if hsig else 0.0)

    rank_mu = (y.T * k.weights) @ y
    decay = 1 - k.c1 - k.cmu + (0.0 if hsig else k.c1 * k.cc * (2 - k.cc))
    C = decay * state.C + k.c1 * np.outer(pc, pc) + k.cmu * rank_mu
    C = (C + C.T) / 2
    sigma = state.sigma * math.exp((k.cs / k.damps) * (ps_norm / k.chi_n - 1))

    evals, B = np.linalg.eigh(C)
    if not np.all(np.isfinite(evals)) or evals.min() <= 0:
        raise StateCorruption(f"covariance lost positive definiteness (min eigenvalue {evals.min():.3g})")
    return replace(state, mean=mean, sigma=sigma, C=C, pc=pc, ps=ps, generation=g, B=B, Dv=np.sqrt(evals))


# -- drivers -----------------------------------------------------------------


class EstimatedGradientDriver:
    """Stochastic gradient estimate followed by an Adam or SGD step."""

    def __init__(self, dim: int, est: EstimatorConfig, kind: str = "adam", lr: float = 0.05, **adam):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown update rule {kind!r}")
        self.kind = kind
        self.lr = lr
        self.est = est
        self.state = AdamState.zeros(dim, lr=lr, **adam) if kind == "adam" else None

    def queries_per_step(self, dim: int) -> int:
        return self.est.q + 1

    def step(self, oracle: LossOracle, theta, k: int, rng: RngStream):
        g = estimate_stochastic(oracle, theta, self.est, rng)
        if self.kind == "adam":
            self.state, theta = adam_step(self.state, theta, g.grad)
        else:
            theta = sgd_step(theta, g.grad, self.lr)
        return theta, g.base_loss


class SpsaGcDriver:
    def __init__(self, dim: int, **params):
        self.state = SpsaGcState(momentum=np.zeros(dim), **params)

    def queries_per_step(self, dim: int) -> int:
        return 2 * self.state.n_two_side

    def step(self, oracle: LossOracle, theta, k: int, rng: RngStream):
        self.state, theta, observed = spsa_gc_step(self.state, oracle, theta, k, rng)
        return theta, observed


class CmaEsDriver:
    """One generation per step; the reported parameters are the distribution mean."""

    def __init__(self, theta0, sigma0: float = 0.5, popsize: int = 10):
        self.state = CmaEsState.initial(theta0, sigma0, popsize)

    def queries_per_step(self, dim: int) -> int:
        return self.state.popsize

    def step(self, oracle: LossOracle, theta, k: int, rng: RngStream):
        cands = cmaes_ask(self.state, rng)
        losses = oracle.query_many(cands)
        self.state = cmaes_tell(self.state, cands, losses)
        return self.state.mean.copy(), float(losses.min())
