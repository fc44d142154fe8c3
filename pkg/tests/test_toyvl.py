import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bbtune.toyvl as toyvl
from bbtune.core import RngStream
from bbtune.estimator import EstimatorConfig, estimate_quality, estimate_stochastic
from bbtune.toyvl import (
    TaskSpec,
    ToyVLModel,
    accuracy,
    analytic_prompt_gradient,
    batch_loss,
    batch_loss_many,
    encode_prompted_text,
    generate_task,
    normalized_loss,
    predict,
    prompt_loss_oracle,
    softmax,
    task_from_dict,
    task_hash,
    task_to_dict,
)


@pytest.fixture(scope="module")
def task():
    return generate_task(TaskSpec(seed=3))


@pytest.fixture(scope="module")
def clean_task():
    return generate_task(TaskSpec(seed=4, sigma=0.0, shift_strength=0.0))


def central_difference(model, theta, x, y, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (batch_loss(model, theta + e, x, y) - batch_loss(model, theta - e, x, y)) / (2 * h)
    return g


def test_anchor_prompt_reproduces_generator_features(clean_task):
    m, d = clean_task.model, clean_task.data
    t = encode_prompted_text(m, m.theta_anchor)
    # noiseless, unshifted: every image feature is its class's anchor text feature
    assert np.allclose(d.train_x, t[d.train_y], atol=1e-15)
    assert np.array_equal(t, m.text_features_many(m.theta_anchor[None])[0])


def test_text_features_unit_norm(task):
    t = encode_prompted_text(task.model, task.theta0)
    assert t.shape == (16, 32)
    assert np.all(np.abs(np.linalg.norm(t, axis=1) - 1) <= 1e-9)


def test_text_features_respond_to_prompt(task):
    a = task.model.theta_star.copy()
    b = a.copy()
    b[5] += 0.1
    assert not np.array_equal(encode_prompted_text(task.model, a), encode_prompted_text(task.model, b))


def test_prompt_dimension_checked(task):
    with pytest.raises(ValueError):
        encode_prompted_text(task.model, np.zeros(task.model.dim + 1))


def test_predict_examples():
    t = np.eye(4)
    f = np.full(4, 0.5)
    assert np.allclose(predict(t, f, 0.07), 0.25)
    p = predict(np.eye(2), np.array([1.0, 0.0]), 1.0)
    assert p == pytest.approx([0.7311, 0.2689], abs=1e-4)
    with pytest.raises(ValueError):
        predict(np.zeros((0, 4)), f, 1.0)


@given(st.lists(st.floats(-700, 700), min_size=1, max_size=30))
def test_softmax_normalizes(logits):
    p = softmax(np.array(logits))
    assert abs(p.sum() - 1) <= 1e-9
    assert np.all((p >= 0) & (p <= 1))


def test_argmax_invariant_under_tau(task):
    t = encode_prompted_text(task.model, task.theta0)
    for f in task.data.test_x[::37]:
        assert len({int(np.argmax(predict(t, f, tau))) for tau in (0.01, 0.07, 1.0)}) == 1


def test_loss_zero_for_certain_predictions(clean_task):
    m = dataclasses.replace(clean_task.model, tau=1e-4)
    t = encode_prompted_text(m, m.theta_anchor)
    y = np.arange(m.C)
    assert batch_loss(m, m.theta_anchor, t, y) == pytest.approx(0.0, abs=1e-12)


def test_loss_uniform_is_log_c():
    m = generate_task(TaskSpec(C=10, seed=2)).model
    t = encode_prompted_text(m, m.theta_star)
    # a unit feature equally similar to every class
    _, _, vt = np.linalg.svd(t[1:] - t[0])
    f = vt[-1] / np.linalg.norm(vt[-1])
    loss = batch_loss(m, m.theta_star, f[None], np.array([3]))
    assert loss == pytest.approx(np.log(10), abs=1e-9)


def test_empty_batch_rejected(task):
    with pytest.raises(ValueError):
        batch_loss(task.model, task.theta0, np.zeros((0, 32)), np.zeros(0, dtype=int))


def test_optimum_beats_random_prompts(clean_task):
    m, d = clean_task.model, clean_task.data
    rng = RngStream(8).gen
    best = batch_loss(m, m.theta_star, d.train_x, d.train_y)
    others = batch_loss_many(m, m.theta_star + rng.standard_normal((100, m.dim)), d.train_x, d.train_y)
    assert np.all(best <= others)


def test_batch_rows_independent_of_batch(task):
    m, d = task.model, task.data
    thetas = task.theta0 + 0.3 * RngStream(1).gen.standard_normal((70, m.dim))
    full = batch_loss_many(m, thetas, d.train_x, d.train_y)
    perm = np.random.default_rng(0).permutation(70)
    assert np.array_equal(batch_loss_many(m, thetas[perm], d.train_x, d.train_y), full[perm])
    assert full[17] == batch_loss(m, thetas[17], d.train_x, d.train_y)


@pytest.mark.parametrize("tau", [0.07, 0.5])
def test_analytic_gradient_matches_finite_differences(tau):
    for k in range(4):
        t = generate_task(TaskSpec(seed=20 + k, tau=tau, M=1 + k % 2))
        m, d = t.model, t.data
        theta = t.theta0 + 0.5 * RngStream(k).gen.standard_normal(m.dim)
        g = analytic_prompt_gradient(m, theta, d.train_x, d.train_y)
        fd = central_difference(m, theta, d.train_x, d.train_y)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_single_class_gradient_is_zero(task):
    m = task.model
    one = ToyVLModel(m.class_emb[:1], m.W1, m.b1, m.W2, m.b2, m.tau, m.M, m.shift, m.sigma, m.theta_star, m.theta_anchor)
    x = task.data.train_x[:5]
    y = np.zeros(5, dtype=int)
    assert batch_loss(one, task.theta0, x, y) == 0.0
    assert np.all(analytic_prompt_gradient(one, task.theta0, x, y) == 0.0)


def test_noiseless_task_is_solved_by_optimum(clean_task):
    m, d = clean_task.model, clean_task.data
    assert accuracy(encode_prompted_text(m, m.theta_star), d.test_x, d.test_y) == 1.0


def test_default_task_has_a_gap():
    acc0, acc_star = [], []
    for s in range(10):
        t = generate_task(TaskSpec(seed=s))
        acc0.append(accuracy(encode_prompted_text(t.model, t.theta0), t.data.test_x, t.data.test_y))
        acc_star.append(accuracy(encode_prompted_text(t.model, t.model.theta_star), t.data.test_x, t.data.test_y))
    lo, hi = np.median(acc0), np.median(acc_star)
    assert 1 / 16 < lo < hi
    assert hi - lo >= 0.15


def test_generation_is_deterministic():
    assert task_hash(generate_task(TaskSpec(seed=9))) == task_hash(generate_task(TaskSpec(seed=9)))
    assert task_hash(generate_task(TaskSpec(seed=9))) != task_hash(generate_task(TaskSpec(seed=10)))


def test_serialization_round_trip(task):
    back = task_from_dict(task_to_dict(task))
    assert task_hash(back) == task_hash(task)
    assert np.array_equal(back.model.W1, task.model.W1)


def test_splits_are_balanced(task):
    d = task.data
    assert np.all(np.bincount(d.train_y) == 16)
    assert np.all(np.bincount(d.test_y) == 100)
    assert np.all(np.abs(np.linalg.norm(d.test_x, axis=1) - 1) <= 1e-9)


def test_prompt_length_keeps_image_features():
    a = generate_task(TaskSpec(seed=5, M=1)).data
    b = generate_task(TaskSpec(seed=5, M=4)).data
    assert np.allclose(a.train_x, b.train_x, atol=1e-12)


def test_degenerate_draws_give_up(monkeypatch):
    monkeypatch.setattr(toyvl, "_degenerate", lambda model: "forced")
    with pytest.raises(RuntimeError, match="5 attempts"):
        generate_task(TaskSpec(seed=0, C=3, n_test=2, shots=2))


@pytest.mark.parametrize(
    "kwargs,msg",
    [({"C": 1}, "classification needs >= 2 classes"), ({"sigma": -1.0}, ">= 0"), ({"tau": 0.0}, "tau")],
)
def test_spec_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        TaskSpec(**kwargs)


def test_normalized_loss_endpoints(task):
    m, d = task.model, task.data
    assert normalized_loss(m, task.theta0, task.theta0, d.train_x, d.train_y) == pytest.approx(1.0)
    assert normalized_loss(m, m.theta_star, task.theta0, d.train_x, d.train_y) == 0.0
    with pytest.raises(ZeroDivisionError):
        normalized_loss(m, task.theta0, m.theta_star, d.train_x, d.train_y)


def test_normalized_loss_midpoint(clean_task):
    m, d = clean_task.model, clean_task.data
    mid = 0.5 * (clean_task.theta0 + m.theta_star)
    assert 0 < normalized_loss(m, mid, clean_task.theta0, d.train_x, d.train_y) < 1


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_features_unit_norm_property(seed):
    t = generate_task(TaskSpec(seed=seed, C=4, n_test=3, shots=2))
    feats = encode_prompted_text(t.model, t.theta0 + RngStream(seed).gen.standard_normal(t.model.dim))
    assert np.all(np.abs(np.linalg.norm(feats, axis=1) - 1) <= 1e-9)


def test_estimator_agrees_with_analytic_gradient():
    t = generate_task(TaskSpec(seed=6, M=4))
    m, d = t.model, t.data
    oracle = prompt_loss_oracle(m, d.train_x, d.train_y)
    true = analytic_prompt_gradient(m, t.theta0, d.train_x, d.train_y)
    cfg = EstimatorConfig(q=256)
    cos = [estimate_quality(estimate_stochastic(oracle, t.theta0, cfg, RngStream(1).fork(i)), true).cosine for i in range(100)]
    assert np.median(cos) >= 0.2
    assert oracle.ledger.total_queries == 100 * 257
