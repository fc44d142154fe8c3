"""The black-box boundary.

Optimizers and estimators see a :class:`LossOracle` and nothing else: a
parameter dimension, a loss query, and a :class:`QueryLedger` counting
every call. Adapter training additionally gets a :class:`FeatureOracle`
when the experiment runs in feature-available mode.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .core import DimensionError


class OracleFault(RuntimeError):
    """The black box returned something unusable (e.g. a non-finite loss)."""

    def __init__(self, msg: str, index: int | None = None):
        super().__init__(msg)
        self.index = index


class CapabilityError(RuntimeError):
    """A run needs a capability (e.g. feature access) the oracle does not grant."""


class QueryLedger:
    """Thread-safe count of black-box queries, split by phase label."""

    def __init__(self):
        self._lock = threading.Lock()
        self._per_phase: dict[str, int] = {}

    def add(self, phase: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError("ledger counts only grow")
        with self._lock:
            self._per_phase[phase] = self._per_phase.get(phase, 0) + n

    @property
    def total_queries(self) -> int:
        with self._lock:
            return sum(self._per_phase.values())

    @property
    def per_phase_queries(self) -> dict[str, int]:
        with self._lock:
            return dict(self._per_phase)

    def count(self, phase: str) -> int:
        with self._lock:
            return self._per_phase.get(phase, 0)

    def to_dict(self) -> dict:
        phases = self.per_phase_queries
        return {"total_queries": sum(phases.values()), "per_phase_queries": dict(sorted(phases.items()))}


class LossOracle:
    """Maps a parameter vector to a scalar loss and counts the call.

    ``loss_fn`` evaluates one vector. ``batch_fn``, when given, evaluates an
    ``(n, dim)`` stack in one go and is used by :meth:`query_many`; it must
    agree with ``loss_fn`` row by row. Without ``batch_fn``, ``query_many``
    fans out over ``jobs`` threads.
    """

    def __init__(
        self,
        dim: int,
        loss_fn: Callable[[np.ndarray], float] | None = None,
        batch_fn: Callable[[np.ndarray], np.ndarray] | None = None,
        ledger: QueryLedger | None = None,
        phase: str = "prompt",
        jobs: int = 1,
    ):
        if dim < 1:
            raise DimensionError(f"oracle dimension must be >= 1, got {dim}")
        if loss_fn is None and batch_fn is None:
            raise ValueError("need loss_fn or batch_fn")
        self._dim = int(dim)
        self._loss_fn = loss_fn
        self._batch_fn = batch_fn
        self.ledger = ledger if ledger is not None else QueryLedger()
        self.phase = phase
        self.jobs = max(1, int(jobs))

    @property
    def dim(self) -> int:
        return self._dim

    def with_phase(self, phase: str) -> "LossOracle":
        """Same black box and ledger, counting under another phase label."""
        return LossOracle(self._dim, self._loss_fn, self._batch_fn, self.ledger, phase, self.jobs)

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self._dim,):
            raise DimensionError(f"oracle expects dimension {self._dim}, got shape {theta.shape}")
        return theta

    def _eval_one(self, theta: np.ndarray) -> float:
        if self._loss_fn is not None:
            return float(self._loss_fn(theta))
        return float(self._batch_fn(theta[None, :])[0])

    def query(self, theta) -> float:
        theta = self._check(theta)
        self.ledger.add(self.phase, 1)
        loss = self._eval_one(theta)
        if not np.isfinite(loss):
            raise OracleFault(f"oracle returned non-finite loss {loss}")
        return loss

    def query_many(self, thetas: Sequence | np.ndarray) -> np.ndarray:
        """Evaluate every row of ``thetas``; results keep the input order."""
        if len(thetas) == 0:
            return np.zeros(0)
        if not (isinstance(thetas, np.ndarray) and thetas.ndim == 2 and thetas.shape[1] == self._dim):
            for i, t in enumerate(thetas):
                if np.shape(t) != (self._dim,):
                    raise DimensionError(f"query {i}: oracle expects dimension {self._dim}, got shape {np.shape(t)}")
        stack = np.asarray(thetas, dtype=np.float64)
        self.ledger.add(self.phase, len(stack))
        if self._batch_fn is not None:
            losses = np.asarray(self._batch_fn(stack), dtype=np.float64)
        elif self.jobs > 1:
            with ThreadPoolExecutor(self.jobs) as ex:
                losses = np.array(list(ex.map(self._eval_one, stack)), dtype=np.float64)
        else:
            losses = np.array([self._eval_one(t) for t in stack], dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(losses))
        if bad.size:
            i = int(bad[0])
            raise OracleFault(f"query {i} returned non-finite loss {losses[i]}", index=i)
        return losses


class FeatureOracle:
    """Output-feature access granted in feature-available mode.

    Subclasses provide image features for a named data split and the text
    features produced by a prompt. Calls are tallied in ``calls`` and never
    touch any :class:`QueryLedger`.
    """

    def __init__(self):
        self.calls = 0

    def encode_images(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(features, labels)`` for ``split``; feature rows are unit norm."""
        raise NotImplementedError

    def text_features(self, theta: np.ndarray) -> np.ndarray:
        """Return the ``(C, d_f)`` unit-norm class text features for prompt ``theta``."""
        raise NotImplementedError

    def zero_shot_text_features(self) -> np.ndarray:
        raise NotImplementedError
