import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from expertflow import numerics as nx
from expertflow.event_codec import TaskType
from expertflow.exceptions import ConfigError, RoutingError
from expertflow.gating import (
    DYNAMIC, TOPK, Expert, GatingParams, cosine_scores, dynamic_gate, moe_forward,
    vanilla_topk_gate,
)
from expertflow.lifecycle import RoutingRecord


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def eq6_active(x, a, W, G, alpha):
    """Brute-force Eq. 6 evaluation, one expert at a time in plain floats."""
    out = []
    nx_ = math.sqrt(sum(v * v for v in x))
    for e in range(W.shape[1]):
        col = W[:, e]
        s = sum(float(u) * float(v) for u, v in zip(x, col)) / (nx_ * math.sqrt(sum(float(v) ** 2 for v in col)))
        if sig((s + alpha * a[e]) / (1 + alpha)) - sig(G[e]) > 0:
            out.append(e)
    return tuple(out)


def test_cosine_examples():
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = GatingParams(W=W, G=np.zeros(2))
    assert cosine_scores([3.0, 0.0], p)[0] == 1.0
    assert cosine_scores([3.0, 0.0], p)[1] == 0.0
    with pytest.raises(RoutingError):
        cosine_scores([0.0, 0.0], p)


def test_cosine_matches_formula_oracle():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(8, 4))
    x = rng.normal(size=8)
    p = GatingParams(W=W, G=np.zeros(4))
    oracle = [x @ W[:, e] / (np.linalg.norm(x) * np.linalg.norm(W[:, e])) for e in range(4)]
    assert np.max(np.abs(cosine_scores(x, p) - oracle)) < 1e-12


def test_topk_examples():
    p = GatingParams(W=np.eye(3), G=np.zeros(3), mode=TOPK, k=2)
    dec = vanilla_topk_gate([2.0, 1.0, 0.0], p)
    assert dec.active == (0, 1)
    assert np.allclose(dec.weights, [0.7311, 0.2689], atol=1e-4)
    full = vanilla_topk_gate([2.0, 1.0, 0.0], p, k=3)
    assert np.allclose(full.weights, full.scores, atol=1e-15)
    dom = vanilla_topk_gate([900.0, 0.0, 0.0], p, k=1)
    assert dom.active == (0,) and dom.weights == (1.0,)


def test_topk_ties_go_to_lower_index():
    p = GatingParams(W=np.eye(4), G=np.zeros(4), mode=TOPK, k=2)
    assert vanilla_topk_gate([1.0, 1.0, 1.0, 1.0], p).active == (0, 1)


def test_topk_rejects_bad_k():
    p = GatingParams(W=np.eye(3), G=np.zeros(3), mode=TOPK, k=2)
    with pytest.raises(ConfigError):
        vanilla_topk_gate([1.0, 0, 0], p, k=4)


def test_dynamic_examples():
    s = 0.2
    x = [s, math.sqrt(1 - s * s)]
    W = np.array([[1.0], [0.0]])
    on = dynamic_gate(x, [0.9], GatingParams(W=W, G=np.array([0.5]), alpha=1.0))
    assert on.active == (0,) and on.weights == (1.0,)
    off = dynamic_gate(x, [0.9], GatingParams(W=W, G=np.array([0.5]), alpha=0.0))
    assert off.active == () and off.unrouted


def test_dynamic_matches_eq6_oracle_on_random_tokens():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        d, K = int(rng.integers(2, 9)), int(rng.integers(1, 7))
        W = rng.normal(size=(d, K))
        G = rng.normal(0, 0.5, K)
        a = rng.uniform(0, 1, K)
        alpha = float(rng.uniform(0, 2))
        x = rng.normal(size=d)
        dec = dynamic_gate(x, a, GatingParams(W=W, G=G, alpha=alpha))
        assert dec.active == eq6_active(x, a, W, G, alpha)


@given(st.integers(0, 2**32 - 1))
def test_dynamic_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(6, 5))
    dec = dynamic_gate(rng.normal(size=6), rng.uniform(0, 1, 5), GatingParams(W=W, G=rng.normal(0, 0.3, 5)))
    if dec.active:
        assert abs(sum(dec.weights) - 1.0) < 1e-12
    else:
        assert dec.unrouted


@given(st.integers(0, 2**32 - 1))
def test_alpha_zero_is_pure_threshold(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(5, 6))
    G = rng.normal(0, 0.5, 6)
    p = GatingParams(W=W, G=G, alpha=0.0)
    x = rng.normal(size=5)
    s = cosine_scores(x, p)
    assert dynamic_gate(x, rng.uniform(0, 1, 6), p).active == tuple(np.flatnonzero(s > G))


@given(st.integers(0, 2**32 - 1))
def test_dynamic_monotone_in_task_rate(seed):
    rng = np.random.default_rng(seed)
    K = 4
    p = GatingParams(W=rng.normal(size=(5, K)), G=rng.normal(0, 0.5, K), alpha=float(rng.uniform(0.01, 3)))
    x = rng.normal(size=5)
    a = rng.uniform(0, 1, K)
    before = set(dynamic_gate(x, a, p).active)
    e = int(rng.integers(0, K))
    a2 = a.copy()
    a2[e] = rng.uniform(a[e], 1.0)
    after = set(dynamic_gate(x, a2, p).active)
    assert e not in before or e in after


def test_scalar_rates_mode_uses_mean():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(4, 3))
    G = np.zeros(3)
    x = rng.normal(size=4)
    a = np.array([0.1, 0.5, 0.9])
    d1 = dynamic_gate(x, a, GatingParams(W=W, G=G, alpha=1.0, scalar_rates=True))
    d2 = dynamic_gate(x, np.full(3, 0.5), GatingParams(W=W, G=G, alpha=1.0))
    assert d1.active == d2.active and d1.weights == d2.weights


def _experts(rng, K, d, h=5):
    return [Expert.init(rng, d, h) for _ in range(K)]


def test_moe_single_active_expert_is_exact():
    rng = np.random.default_rng(2)
    d = 4
    ex = _experts(rng, 2, d)
    W = np.zeros((d, 2))
    W[0, 0] = 1.0
    W[1, 1] = 1.0
    p = GatingParams(W=W, G=np.array([0.0, 5.0]), alpha=0.0)
    x = np.array([[1.0, 0.2, 0.1, 0.0]])
    Y, dec = moe_forward(x, [TaskType.TIME], ex, p, RoutingRecord.fresh(2, d))
    assert dec[0].active == (0,)
    assert np.array_equal(Y, ex[0](x))


def test_moe_unrouted_token_is_zero():
    rng = np.random.default_rng(3)
    ex = _experts(rng, 2, 3)
    p = GatingParams(W=rng.normal(size=(3, 2)), G=np.array([9.0, 9.0]))
    Y, dec = moe_forward(rng.normal(size=(2, 3)), [0, 2], ex, p, RoutingRecord.fresh(2, 3))
    assert all(d.unrouted for d in dec)
    assert np.all(Y == 0.0)


def test_moe_topk_matches_naive_loop():
    rng = np.random.default_rng(4)
    d, K = 5, 3
    ex = _experts(rng, K, d)
    p = GatingParams(W=rng.normal(size=(d, K)), G=np.zeros(K), mode=TOPK, k=2)
    X = rng.normal(size=(6, d))
    Y, dec = moe_forward(X, [0] * 6, ex, p)
    for i in range(6):
        ref = vanilla_topk_gate(X[i], p)
        assert dec[i].active == ref.active
        y = sum(w * ex[e](X[i : i + 1])[0] for e, w in zip(ref.active, ref.weights))
        assert np.max(np.abs(Y[i] - y)) < 1e-12


def test_moe_dynamic_matches_reference_gate():
    rng = np.random.default_rng(5)
    d, K = 6, 4
    ex = _experts(rng, K, d)
    rec = RoutingRecord.fresh(K, d)
    rec.A = rng.uniform(0, 1, rec.A.shape)
    p = GatingParams(W=rng.normal(size=(d, K)), G=rng.normal(0, 0.2, K), alpha=0.7)
    X = rng.normal(size=(20, d))
    tags = rng.integers(0, 7, 20)
    Y, dec = moe_forward(X, tags, ex, p, rec)
    for i in range(20):
        ref = dynamic_gate(X[i], rec.A[tags[i]], p)
        assert dec[i].active == ref.active
        assert np.allclose(dec[i].weights, ref.weights, atol=1e-14)
        y = sum((w * ex[e](X[i : i + 1])[0] for e, w in zip(ref.active, ref.weights)), np.zeros(d))
        assert np.max(np.abs(Y[i] - y)) < 1e-12


def test_moe_requires_experts():
    p = GatingParams(W=np.eye(2), G=np.zeros(2))
    with pytest.raises(ConfigError):
        moe_forward(np.ones((1, 2)), [0], [], p, RoutingRecord.fresh(2, 2))


def test_topk_active_set_size_is_k():
    rng = np.random.default_rng(6)
    ex = _experts(rng, 5, 4)
    for k in range(1, 6):
        p = GatingParams(W=rng.normal(size=(4, 5)), G=np.zeros(5), mode=TOPK, k=k)
        _, dec = moe_forward(rng.normal(size=(10, 4)), [0] * 10, ex, p)
        assert all(len(d.active) == k for d in dec)
        assert all(abs(sum(d.weights) - 1) < 1e-12 for d in dec)


def test_straight_through_threshold_gradient():
    # one token, one gate: loss = c * M with M = ste_sign(sigma(q) - sigma(G))
    for G0, c in ((0.3, 1.7), (-0.4, -2.0)):
        g = nx.Graph()
        Gn = g.leaf([[G0]], "G")
        q = g.const([[0.8]])
        M = nx.ste_sign(nx.sub(nx.sigmoid(q), nx.sigmoid(Gn)))
        grads = nx.backward(g, nx.scale(nx.total(M), c))
        s = sig(G0)
        assert abs(grads["G"][0, 0] - (-s * (1 - s) * c)) < 1e-15


def test_gating_params_validation():
    with pytest.raises(ConfigError):
        GatingParams(W=np.eye(2), G=np.zeros(3))
    with pytest.raises(ConfigError):
        GatingParams(W=np.eye(2), G=np.zeros(2), mode=TOPK, k=3)
    with pytest.raises(ConfigError):
        GatingParams(W=np.eye(2), G=np.zeros(2), alpha=-1)
    p = GatingParams.init(np.random.default_rng(0), 5, 3)
    assert np.allclose(np.linalg.norm(p.W, axis=0), 1.0)
    assert np.array_equal(p.G, np.zeros(3)) and p.mode == DYNAMIC
