"""A simulated two-tower vision-language classifier and its few-shot tasks.

The text tower maps ``[v_1..v_M, c_i]`` (prompt tokens followed by a class
embedding) through a frozen ``affine -> tanh -> affine`` network and
normalizes the result. Image features are generated around the text
features of a hidden prompt, pushed through a domain-shift matrix and
corrupted with Gaussian noise. Predictions are a temperature-scaled
softmax over cosine similarities.

Everything here is white-box. Optimizers only ever see the model through
:func:`prompt_loss_oracle` or :class:`ToyFeatureOracle`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .core import DimensionError, RngStream, normalize_rows, sample_unit_sphere
from .oracle import FeatureOracle, LossOracle, QueryLedger

# rows of a prompt batch evaluated together; bounds memory for large q
_CHUNK = 32
# generator scales, fixed once for the default task difficulty
_PROMPT_GAIN = 4.0
_CLASS_GAIN = 3.0
_OFFSET_GAIN = 1.0
_SHIFT_GAIN = 3.0
_MIX_STREAM = 7


@dataclass(frozen=True)
class TaskSpec:
    C: int = 16
    d_e: int = 16
    d_f: int = 32
    M: int = 1
    shots: int = 16
    n_test: int = 100
    sigma: float = 0.15
    shift_strength: float = 0.3
    init_offset: float = 2.0
    tau: float = 0.07
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.C < 2:
            raise ValueError("classification needs >= 2 classes")
        for name in ("d_e", "d_f", "M", "shots", "n_test", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_f < 4:
            raise ValueError("d_f must be >= 4 so the adapter hidden width is positive")
        if self.sigma < 0 or self.shift_strength < 0 or self.init_offset < 0:
            raise ValueError("sigma, shift_strength and init_offset must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True, eq=False)
class ToyVLModel:
    class_emb: np.ndarray  # (C, d_e)
    W1: np.ndarray  # (hidden, (M + 1) * d_e), prompt columns first
    b1: np.ndarray
    W2: np.ndarray  # (d_f, hidden)
    b2: np.ndarray
    tau: float
    M: int
    shift: np.ndarray  # (d_f, d_f)
    sigma: float
    theta_star: np.ndarray  # train-loss minimizer near the anchor
    theta_anchor: np.ndarray  # prompt whose text features seeded the image features
    _class_pre: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for a in (self.class_emb, self.W1, self.b1, self.W2, self.b2, self.shift, self.theta_star, self.theta_anchor):
            a.setflags(write=False)
        de = self.class_emb.shape[1]
        object.__setattr__(self, "_class_pre", self.class_emb @ self.W1[:, self.M * de :].T + self.b1)

    @property
    def C(self) -> int:
        return self.class_emb.shape[0]

    @property
    def d_e(self) -> int:
        return self.class_emb.shape[1]

    @property
    def d_f(self) -> int:
        return self.W2.shape[0]

    @property
    def dim(self) -> int:
        return self.M * self.d_e

    def _check_prompts(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=np.float64)
        if thetas.shape[-1] != self.dim:
            raise DimensionError(f"prompt dimension {thetas.shape[-1]} != M * d_e = {self.dim}")
        return thetas

    def _forward(self, thetas: np.ndarray):
        """Text tower on an ``(n, D)`` stack; returns ``(t, u, h)``, each ``(n, C, .)``."""
        pre = (thetas @ self.W1[:, : self.dim].T)[:, None, :] + self._class_pre[None]
        h = np.tanh(pre)
        u = h @ self.W2.T + self.b2
        return u / np.linalg.norm(u, axis=-1, keepdims=True), u, h

    def text_features(self, theta) -> np.ndarray:
        """``(C, d_f)`` unit-norm class features for one prompt."""
        theta = self._check_prompts(theta)
        if theta.ndim != 1:
            raise DimensionError("text_features takes a single prompt vector")
        return self._forward(theta[None])[0][0]

    def text_features_many(self, thetas) -> np.ndarray:
        return self._forward(self._check_prompts(thetas))[0]


@dataclass(frozen=True, eq=False)
class FewShotDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    C: int

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_x, self.train_y
        if name == "test":
            return self.test_x, self.test_y
        raise KeyError(f"unknown split {name!r}")


@dataclass(frozen=True, eq=False)
class Task:
    spec: TaskSpec
    model: ToyVLModel
    data: FewShotDataset
    theta0: np.ndarray


# -- prediction and loss -------------------------------------------------------


def encode_prompted_text(model: ToyVLModel, prompt) -> np.ndarray:
    return model.text_features(prompt)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(text_features: np.ndarray, image_feature: np.ndarray, tau: float) -> np.ndarray:
    """Class probabilities for one image (or each row of a stack of images)."""
    if len(text_features) == 0:
        raise ValueError("no class text features")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return softmax(np.asarray(image_feature) @ np.asarray(text_features).T / tau)


def batch_loss_many(model: ToyVLModel, thetas, feats: np.ndarray, labels: np.ndarray, extra_logits=None) -> np.ndarray:
    """Mean cross-entropy on ``(feats, labels)`` for every prompt row of ``thetas``.

    Rows are processed in fixed-size blocks (the last one padded), so a
    row's loss is bit-identical whatever batch it arrives in.
    """
    thetas = model._check_prompts(thetas)
    if thetas.ndim != 2:
        raise DimensionError("expected an (n, D) stack of prompts")
    labels = np.asarray(labels)
    n_samples = len(labels)
    if n_samples == 0:
        raise ValueError("empty batch")
    C = model.C
    scaled = np.ascontiguousarray(feats.T) / model.tau  # (d_f, N)
    # cosine logits are bounded by 1/tau, so a per-sample constant stands in
    # for the running max in log-sum-exp
    shift = np.full(n_samples, 1.0 / model.tau)
    extra_t = None
    if extra_logits is not None:
        extra_t = np.ascontiguousarray(np.asarray(extra_logits, dtype=np.float64).T)  # (C, N)
        shift = shift + extra_t.max(axis=0)
    cols = np.arange(n_samples)
    n = len(thetas)
    out = np.empty(n)
    block = np.empty((_CHUNK, thetas.shape[1]))
    for s in range(0, n, _CHUNK):
        k = min(_CHUNK, n - s)
        block[:k] = thetas[s : s + k]
        block[k:] = thetas[s + k - 1]
        t = model._forward(block)[0]
        logits = (t.reshape(-1, t.shape[-1]) @ scaled).reshape(_CHUNK, C, n_samples)
        if extra_t is not None:
            logits += extra_t
        true = logits[:, labels, cols]
        logits -= shift
        np.exp(logits, out=logits)
        lse = np.log(logits.sum(axis=1)) + shift
        out[s : s + k] = (lse - true).mean(axis=1)[:k]
    return out


def batch_loss(model: ToyVLModel, prompt, feats, labels, extra_logits=None) -> float:
    return float(batch_loss_many(model, np.asarray(prompt, dtype=np.float64)[None], feats, labels, extra_logits)[0])


def analytic_prompt_gradient(model: ToyVLModel, prompt, feats, labels, extra_logits=None) -> np.ndarray:
    """Exact gradient of :func:`batch_loss` with respect to the flat prompt."""
    theta = model._check_prompts(prompt)
    if len(labels) == 0:
        raise ValueError("empty batch")
    t, u, h = (a[0] for a in model._forward(theta[None]))
    logits = feats @ t.T / model.tau
    if extra_logits is not None:
        logits = logits + extra_logits
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    dlogits = p / len(labels)  # (N, C)
    dt = dlogits.T @ feats / model.tau  # (C, d_f)
    un = np.linalg.norm(u, axis=-1, keepdims=True)
    du = (dt - np.sum(dt * t, axis=-1, keepdims=True) * t) / un
    dpre = (du @ model.W2) * (1.0 - h**2)  # (C, hidden)
    return dpre.sum(axis=0) @ model.W1[:, : model.dim]


def accuracy(text_features: np.ndarray, feats: np.ndarray, labels: np.ndarray, extra_logits=None) -> float:
    if len(labels) == 0:
        raise ValueError("empty split")
    logits = feats @ text_features.T
    if extra_logits is not None:
        logits = logits + extra_logits
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def normalized_loss(model: ToyVLModel, theta, theta0, feats, labels) -> float:
    """``|L(theta*) - L(theta)| / |L(theta*) - L(theta0)|`` on the given batch."""
    ls, l0, l = batch_loss_many(model, np.stack([model.theta_star, theta0, theta]), feats, labels)
    den = abs(ls - l0)
    if den == 0.0:
        raise ZeroDivisionError("L(theta*) == L(theta0); normalized loss undefined")
    return float(abs(ls - l) / den)


# -- black-box views -------------------------------------------------------------


def prompt_loss_oracle(
    model: ToyVLModel,
    feats: np.ndarray,
    labels: np.ndarray,
    extra_logits: np.ndarray | None = None,
    ledger: QueryLedger | None = None,
    phase: str = "prompt",
) -> LossOracle:
    """Wrap the text tower and a fixed labelled batch as a loss-only oracle."""
    feats = np.array(feats, dtype=np.float64)
    labels = np.array(labels)
    extra = None if extra_logits is None else np.array(extra_logits, dtype=np.float64)

    def batch_fn(thetas):
        return batch_loss_many(model, thetas, feats, labels, extra)

    return LossOracle(model.dim, batch_fn=batch_fn, ledger=ledger, phase=phase)


class ToyFeatureOracle(FeatureOracle):
    def __init__(self, task: Task):
        super().__init__()
        self._model = task.model
        self._data = task.data
        self._theta0 = task.theta0

    def encode_images(self, split: str):
        self.calls += 1
        x, y = self._data.split(split)
        return x.copy(), y.copy()

    def text_features(self, theta):
        self.calls += 1
        return self._model.text_features(theta)

    def zero_shot_text_features(self):
        return self.text_features(self._theta0)


# -- task generation ---------------------------------------------------------------


def _draw(spec: TaskSpec, rng: RngStream) -> tuple[ToyVLModel, FewShotDataset, np.ndarray]:
    g = rng.gen
    de, df, M, C, H = spec.d_e, spec.d_f, spec.M, spec.C, spec.hidden
    class_emb = g.standard_normal((C, de))
    # every prompt token reaches the tower through one shared projection, each
    # after its own orthogonal mix (the first token's mix is the identity), so
    # a longer prompt adds parameters but not directions in the hidden layer
    base = g.standard_normal((H, de)) * (_PROMPT_GAIN / np.sqrt(de))
    mixes = [np.eye(de)] + [_orthogonal(de, rng.fork(_MIX_STREAM, j)) for j in range(1, M)]
    W1 = np.concatenate(
        [base @ Q / np.sqrt(M) for Q in mixes] + [g.standard_normal((H, de)) * (_CLASS_GAIN / np.sqrt(de))],
        axis=1,
    )
    b1 = 0.1 * g.standard_normal(H)
    W2 = g.standard_normal((df, H)) / np.sqrt(H)
    # shared output offset clusters the class features, as in real text towers
    b2 = g.standard_normal(df) * (_OFFSET_GAIN / np.sqrt(df))
    # the anchor's projected prompt is the same for every M, so tasks that
    # differ only in M share their image features
    a = g.standard_normal(de)
    anchor = np.concatenate([Q.T @ a / np.sqrt(M) for Q in mixes])
    R = g.standard_normal((df, df)) * (_SHIFT_GAIN / np.sqrt(df))
    S = np.eye(df) + spec.shift_strength * R
    model = ToyVLModel(class_emb, W1, b1, W2, b2, spec.tau, M, S, spec.sigma, anchor, anchor)

    anchors = model.text_features(anchor)
    per_class = spec.shots + spec.n_test
    y = np.repeat(np.arange(C), per_class)
    noise = g.standard_normal((C * per_class, df))
    x = normalize_rows(anchors[y] @ S.T + spec.sigma * noise)
    x = x.reshape(C, per_class, df)
    train_x = x[:, : spec.shots].reshape(-1, df)
    test_x = x[:, spec.shots :].reshape(-1, df)
    data = FewShotDataset(
        train_x,
        np.repeat(np.arange(C), spec.shots),
        test_x,
        np.repeat(np.arange(C), spec.n_test),
        C,
    )
    theta_star = _refine_optimum(model, data, anchor)
    model = ToyVLModel(class_emb, W1, b1, W2, b2, spec.tau, M, S, spec.sigma, theta_star, anchor)
    # per-token offset norm is init_offset
    offset = spec.init_offset * np.sqrt(M) * sample_unit_sphere(M * de, rng)
    theta0 = theta_star + offset
    return model, data, theta0


def _orthogonal(n: int, rng: RngStream) -> np.ndarray:
    q, r = np.linalg.qr(rng.gen.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _refine_optimum(model: ToyVLModel, data: FewShotDataset, start: np.ndarray) -> np.ndarray:
    """Local minimizer of the training loss, found with analytic gradients."""

    def fun(theta):
        loss = batch_loss(model, theta, data.train_x, data.train_y)
        return loss, analytic_prompt_gradient(model, theta, data.train_x, data.train_y)

    res = optimize.minimize(fun, start, jac=True, method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-9})
    return np.array(res.x)


def _degenerate(model: ToyVLModel) -> str | None:
    t = model.text_features(model.theta_star)
    gram = t @ t.T - 2 * np.eye(len(t))
    if gram.max() > 1 - 1e-6:
        return "two classes share (nearly) identical text features"
    bumped = model.theta_star.copy()
    bumped[0] += 0.1
    if np.array_equal(model.text_features(bumped), t):
        return "text features do not respond to the prompt"
    return None


def generate_task(spec: TaskSpec, attempts: int = 5) -> Task:
    """Build a model, few-shot splits and the initial prompt from ``spec.seed``."""
    reason = None
    for attempt in range(attempts):
        model, data, theta0 = _draw(spec, RngStream(spec.seed, stream_id=1, path=(attempt,)))
        reason = _degenerate(model)
        if reason is None:
            return Task(spec, model, data, theta0)
    raise RuntimeError(f"could not generate a non-degenerate task in {attempts} attempts: {reason}")


# -- serialization -------------------------------------------------------------------


def task_to_dict(task: Task) -> dict:
    m, d = task.model, task.data
    return {
        "format": "bbtune-task/1",
        "spec": asdict(task.spec),
        "model": {
            "class_emb": m.class_emb.tolist(),
            "W1": m.W1.tolist(),
            "b1": m.b1.tolist(),
            "W2": m.W2.tolist(),
            "b2": m.b2.tolist(),
            "tau": m.tau,
            "M": m.M,
            "shift": m.shift.tolist(),
            "sigma": m.sigma,
            "theta_star": m.theta_star.tolist(),
            "theta_anchor": m.theta_anchor.tolist(),
        },
        "data": {
            "C": d.C,
            "train_x": d.train_x.tolist(),
            "train_y": d.train_y.tolist(),
            "test_x": d.test_x.tolist(),
            "test_y": d.test_y.tolist(),
        },
        "theta0": task.theta0.tolist(),
    }


def task_from_dict(obj: dict) -> Task:
    if obj.get("format") != "bbtune-task/1":
        raise ValueError(f"unsupported task format {obj.get('format')!r}")
    spec = TaskSpec(**obj["spec"])
    mo = obj["model"]
    a = lambda k: np.array(mo[k], dtype=np.float64)  # noqa: E731
    model = ToyVLModel(
        a("class_emb"), a("W1"), a("b1"), a("W2"), a("b2"), float(mo["tau"]), int(mo["M"]),
        a("shift"), float(mo["sigma"]), a("theta_star"), a("theta_anchor"),
    )
    do = obj["data"]
    data = FewShotDataset(
        np.array(do["train_x"], dtype=np.float64),
        np.array(do["train_y"], dtype=np.int64),
        np.array(do["test_x"], dtype=np.float64),
        np.array(do["test_y"], dtype=np.int64),
        int(do["C"]),
    )
    return Task(spec, model, data, np.array(obj["theta0"], dtype=np.float64))


def task_json(task: Task) -> str:
    return json.dumps(task_to_dict(task), sort_keys=True)


def task_hash(task: Task) -> str:
    return hashlib.sha256(task_json(task).encode()).hexdigest()
