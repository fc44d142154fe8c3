"""Learnable transforms over the black box's output image features.

Two designs: a residual two-layer MLP that rewrites the feature itself, and
a key/value cache over few-shot training features whose affinities add to
the zero-shot logits. Both train with exact gradients on features obtained
through a :class:`~bbtune.oracle.FeatureOracle`; no loss query is issued.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core import DimensionError, RngStream, normalize_rows
from .oracle import CapabilityError, FeatureOracle
from .optim import AdamState, adam_step
from .toyvl import softmax

_TINY = 1e-12


class DegenerateFeatureWarning(RuntimeWarning):
    """An adapted feature collapsed to zero and was passed through unchanged."""


@dataclass(frozen=True, eq=False)
class MlpAdapter:
    W1: np.ndarray  # (d_f // 4, d_f)
    b1: np.ndarray
    W2: np.ndarray  # (d_f, d_f // 4)
    b2: np.ndarray
    alpha: float = 0.2

    @classmethod
    def init(cls, d_f: int, rng: RngStream, alpha: float = 0.2) -> "MlpAdapter":
        """Random first layer, zero second layer: starts as the identity map."""
        if not 0 <= alpha <= 1:
            raise ValueError("residual ratio alpha must lie in [0, 1]")
        h = d_f // 4
        if h < 1:
            raise ValueError("d_f must be >= 4")
        W1 = rng.gen.standard_normal((h, d_f)) / np.sqrt(d_f)
        return cls(W1, np.zeros(h), np.zeros((d_f, h)), np.zeros(d_f), alpha)

    @property
    def d_f(self) -> int:
        return self.W1.shape[1]

    def params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_params(self, flat: np.ndarray) -> "MlpAdapter":
        h, d = self.W1.shape
        i = 0
        out = []
        for shape in ((h, d), (h,), (d, h), (d,)):
            n = int(np.prod(shape))
            out.append(flat[i : i + n].reshape(shape).copy())
            i += n
        return replace(self, W1=out[0], b1=out[1], W2=out[2], b2=out[3])

    def to_dict(self) -> dict:
        return {"kind": "mlp", "alpha": self.alpha, "W1": self.W1.tolist(), "b1": self.b1.tolist(),
                "W2": self.W2.tolist(), "b2": self.b2.tolist()}


def _mlp_parts(adapter: MlpAdapter, F: np.ndarray):
    z1 = F @ adapter.W1.T + adapter.b1
    r = np.maximum(z1, 0.0)
    g = adapter.alpha * (r @ adapter.W2.T + adapter.b2) + (1 - adapter.alpha) * F
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    return z1, r, g, gn


def mlp_adapter_forward_many(adapter: MlpAdapter, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adapt each row of ``F``; also returns the mask of rows that collapsed to zero."""
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-1] != adapter.d_f:
        raise DimensionError(f"feature dimension {F.shape[-1]} != adapter width {adapter.d_f}")
    if adapter.alpha == 0.0:
        return F.copy(), np.zeros(len(F), dtype=bool)
    _, _, g, gn = _mlp_parts(adapter, F)
    bad = gn[:, 0] < _TINY
    out = np.where(bad[:, None], F, g / np.where(bad[:, None], 1.0, gn))
    return out, bad


def mlp_adapter_forward(adapter: MlpAdapter, f: np.ndarray) -> np.ndarray:
    out, bad = mlp_adapter_forward_many(adapter, np.atleast_2d(f))
    if bad.any():
        warnings.warn("adapter output has zero norm; feature passed through", DegenerateFeatureWarning, stacklevel=2)
    return out[0] if np.ndim(f) == 1 else out


def mlp_loss_and_grad(adapter: MlpAdapter, F, labels, text_features, tau: float):
    """Cross-entropy of adapted features against fixed text features, and its
    gradient in :meth:`MlpAdapter.params` layout."""
    N = len(labels)
    z1, r, g, gn = _mlp_parts(adapter, F)
    gn = np.maximum(gn, _TINY)
    fh = g / gn
    logits = fh @ text_features.T / tau
    p = softmax(logits)
    loss = float(np.mean(np.log(p[np.arange(N), labels] + 1e-300) * -1.0))
    p[np.arange(N), labels] -= 1.0
    dlog = p / N
    dfh = dlog @ text_features / tau
    dg = (dfh - np.sum(dfh * fh, axis=1, keepdims=True) * fh) / gn
    do = adapter.alpha * dg
    dW2 = do.T @ r
    db2 = do.sum(axis=0)
    dz1 = (do @ adapter.W2) * (z1 > 0)
    dW1 = dz1.T @ F
    db1 = dz1.sum(axis=0)
    return loss, np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])


@dataclass(frozen=True, eq=False)
class CacheAdapter:
    """Few-shot feature cache.

    ``self_match`` marks caches whose key ``j`` was built from training sample
    ``j``; training then masks each sample's own key so the loss does not
    reward memorization.
    """

    keys: np.ndarray  # (C*K, d_f), unit rows
    labels_onehot: np.ndarray  # (C*K, C)
    gamma: float = 5.0
    alpha_tip: float = 1.0
    self_match: bool = False

    def __post_init__(self):
        if len(self.keys) == 0:
            raise ValueError("empty cache")
        if self.labels_onehot.shape[0] != len(self.keys) or not np.all(self.labels_onehot.sum(axis=1) == 1):
            raise ValueError("labels_onehot needs one one-hot row per key")
        if not self.gamma > 0 or self.alpha_tip < 0:
            raise ValueError("gamma must be > 0 and alpha_tip >= 0")

    def to_dict(self) -> dict:
        return {"kind": "cache", "gamma": self.gamma, "alpha_tip": self.alpha_tip, "self_match": self.self_match,
                "n_classes": self.labels_onehot.shape[1], "keys": self.keys.tolist(), "labels": np.argmax(self.labels_onehot, axis=1).tolist()}


def _affinity(adapter: CacheAdapter, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = F @ adapter.keys.T
    return np.exp(-adapter.gamma * (1.0 - s)), s


def cache_adapter_logits(adapter: CacheAdapter, f: np.ndarray, zero_shot_logits: np.ndarray, exclude_self: bool = False) -> np.ndarray:
    """Zero-shot logits plus ``alpha_tip`` times label-weighted key affinities.

    Works on one feature or a stack of rows. ``exclude_self`` zeroes the
    affinity of row ``n`` to key ``n`` (training-split evaluation only).
    """
    F = np.atleast_2d(np.asarray(f, dtype=np.float64))
    if F.shape[1] != adapter.keys.shape[1]:
        raise DimensionError(f"feature dimension {F.shape[1]} != cache key width {adapter.keys.shape[1]}")
    if adapter.alpha_tip == 0.0:
        return np.array(zero_shot_logits, dtype=np.float64, copy=True)
    A, _ = _affinity(adapter, F)
    if exclude_self:
        np.fill_diagonal(A, 0.0)
    out = adapter.alpha_tip * (A @ adapter.labels_onehot) + zero_shot_logits
    return out[0] if np.ndim(f) == 1 else out


def cache_loss_and_grad(adapter: CacheAdapter, F, labels, zs_logits, train_keys: bool):
    """Loss and gradients w.r.t. ``(alpha_tip, gamma)`` and, optionally, keys."""
    N = len(labels)
    A, s = _affinity(adapter, F)
    if adapter.self_match:
        np.fill_diagonal(A, 0.0)
    AL = A @ adapter.labels_onehot
    logits = adapter.alpha_tip * AL + zs_logits
    p = softmax(logits)
    loss = float(-np.mean(np.log(p[np.arange(N), labels] + 1e-300)))
    p[np.arange(N), labels] -= 1.0
    dlog = p / N
    d_alpha = float(np.sum(dlog * AL))
    dA = adapter.alpha_tip * (dlog @ adapter.labels_onehot.T)
    d_gamma = float(np.sum(dA * A * -(1.0 - s)))
    d_keys = (dA * A * adapter.gamma).T @ F if train_keys else None
    return loss, d_alpha, d_gamma, d_keys


def build_cache(train_x: np.ndarray, train_y: np.ndarray, C: int, sigma_aug: float, epochs: int, rng: RngStream,
                gamma: float = 5.0, alpha_tip: float = 1.0) -> CacheAdapter:
    """Keys are renormalized means of ``epochs`` jittered copies of each training feature."""
    if sigma_aug < 0:
        raise ValueError("sigma_aug must be >= 0")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    train_x = np.asarray(train_x, dtype=np.float64)
    if sigma_aug == 0:
        keys = train_x.copy()
    else:
        acc = np.zeros_like(train_x)
        for _ in range(epochs):
            acc += normalize_rows(train_x + sigma_aug * rng.gen.standard_normal(train_x.shape))
        keys = normalize_rows(acc / epochs)
    onehot = np.eye(C)[np.asarray(train_y)]
    return CacheAdapter(keys, onehot, gamma, alpha_tip, self_match=True)


@dataclass(frozen=True)
class AdapterTrainConfig:
    lr: float = 1e-2
    steps: int = 50
    train_keys: bool = False


class AdapterTrainer:
    """Keeps Adam moments for one adapter across repeated training phases."""

    def __init__(self, cfg: AdapterTrainConfig):
        self.cfg = cfg
        self._state: AdamState | None = None

    def train(self, adapter, features: FeatureOracle | None, text_features: np.ndarray, tau: float,
              train: tuple[np.ndarray, np.ndarray] | None = None, on_step=None):
        """Run ``cfg.steps`` full-batch Adam steps; returns the new adapter.

        ``on_step(step, loss)`` is called after every step. The prompt (and so
        ``text_features``) stays fixed for the whole call.
        """
        if features is None:
            raise CapabilityError("adapter training needs feature access (FeatureOracle)")
        if self.cfg.steps == 0:
            return adapter
        F, y = train if train is not None else features.encode_images("train")
        if isinstance(adapter, MlpAdapter):
            return self._train_mlp(adapter, F, y, text_features, tau, on_step)
        if isinstance(adapter, CacheAdapter):
            return self._train_cache(adapter, F, y, text_features, tau, on_step)
        raise TypeError(f"unknown adapter type {type(adapter).__name__}")

    def _adam(self, dim: int) -> AdamState:
        if self._state is None or self._state.m.size != dim:
            self._state = AdamState.zeros(dim, lr=self.cfg.lr)
        return self._state

    def _train_mlp(self, adapter, F, y, T, tau, on_step):
        w = adapter.params()
        state = self._adam(w.size)
        for k in range(self.cfg.steps):
            loss, g = mlp_loss_and_grad(adapter, F, y, T, tau)
            state, w = adam_step(state, w, g)
            adapter = adapter.with_params(w)
            if on_step is not None:
                on_step(k, loss)
        self._state = state
        return adapter

    def _train_cache(self, adapter, F, y, T, tau, on_step):
        zs = F @ T.T / tau
        keys = adapter.keys.copy()
        nk = keys.size if self.cfg.train_keys else 0
        w = np.concatenate([[adapter.alpha_tip, adapter.gamma], keys.ravel()[:nk]])
        state = self._adam(w.size)
        for k in range(self.cfg.steps):
            loss, da, dg, dk = cache_loss_and_grad(adapter, F, y, zs, self.cfg.train_keys)
            grad = np.concatenate([[da, dg], dk.ravel() if nk else []])
            state, w = adam_step(state, w, grad)
            w[0] = max(w[0], 0.0)
            w[1] = max(w[1], 1e-3)
            if nk:
                keys = normalize_rows(w[2:].reshape(adapter.keys.shape))
                w[2:] = keys.ravel()
            adapter = replace(adapter, alpha_tip=float(w[0]), gamma=float(w[1]), keys=keys)
            if on_step is not None:
                on_step(k, loss)
        self._state = state
        return adapter


def adapted_logits(adapter, feats: np.ndarray, text_features: np.ndarray, tau: float, exclude_self: bool = False) -> np.ndarray:
    """Class logits for a feature stack with (or without) an adapter."""
    if adapter is None:
        return feats @ text_features.T / tau
    if isinstance(adapter, MlpAdapter):
        return mlp_adapter_forward_many(adapter, feats)[0] @ text_features.T / tau
    return cache_adapter_logits(adapter, feats, feats @ text_features.T / tau, exclude_self=exclude_self)


def adapter_from_dict(obj: dict):
    if obj["kind"] == "mlp":
        a = lambda k: np.array(obj[k], dtype=np.float64)  # noqa: E731
        return MlpAdapter(a("W1"), a("b1"), a("W2"), a("b2"), float(obj["alpha"]))
    if obj["kind"] == "cache":
        keys = np.array(obj["keys"], dtype=np.float64)
        labels = np.array(obj["labels"])
        C = int(obj["n_classes"])
        return CacheAdapter(keys, np.eye(C)[labels], float(obj["gamma"]), float(obj["alpha_tip"]), bool(obj["self_match"]))
    raise ValueError(f"unknown adapter kind {obj['kind']!r}")
