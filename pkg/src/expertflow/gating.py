"""Top-k softmax gating, task-aware dynamic gating and the MoE mixture.

Two layers live here. The per-token functions (:func:`cosine_scores`,
:func:`vanilla_topk_gate`, :func:`dynamic_gate`) are the plain reference
definitions. :func:`moe_layer` is the vectorised graph version used for
training; :func:`moe_forward` wraps it for array inputs.

Sums over experts are accumulated in expert order, one column at a time, so
that experts contributing an exact zero can be removed without changing a
single bit of the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, RoutingError

DYNAMIC = "dynamic"
TOPK = "topk"


@dataclass
class Expert:
    """Two-layer feed-forward expert ``W2 @ gelu(W1 @ x + b1) + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, h: int) -> "Expert":
        return cls(
            W1=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h)),
            b1=np.zeros((1, h)),
            W2=rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, d)),
            b2=np.zeros((1, d)),
        )

    def arrays(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "Expert":
        return Expert(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        g = nx.Graph(requires_grad=False)
        nodes = [g.const(a) for a in (self.W1, self.b1, self.W2, self.b2)]
        return expert_forward(g.const(x), *nodes).value


@dataclass
class GatingParams:
    """Expert representation columns ``W`` (d x K), thresholds ``G`` (K,).

    ``scalar_rates`` collapses the per-expert task rate row to its mean,
    which is the scalar reading of the task activation rate.
    """

    W: np.ndarray
    G: np.ndarray
    alpha: float = 0.05
    mode: str = DYNAMIC
    k: int = 2
    scalar_rates: bool = False

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.G = np.asarray(self.G, dtype=np.float64).reshape(-1)
        if self.W.ndim != 2:
            raise ConfigError("gating W must be a d x K matrix")
        if self.mode not in (DYNAMIC, TOPK):
            raise ConfigError(f"unknown gating mode {self.mode!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.G.shape[0] != self.W.shape[1]:
            raise ConfigError(f"{self.W.shape[1]} expert columns but {self.G.shape[0]} thresholds")
        if self.mode == TOPK and not 1 <= self.k <= self.K:
            raise ConfigError(f"top-k needs 1 <= k <= K, got k={self.k}, K={self.K}")

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, K: int, **kw) -> "GatingParams":
        W = rng.normal(size=(d, K))
        W /= np.linalg.norm(W, axis=0, keepdims=True)
        return cls(W=W, G=np.zeros(K), **kw)

    def renormalize(self) -> None:
        """Rescale every expert column to unit L2 norm (dynamic mode geometry)."""
        self.W = self.W / np.linalg.norm(self.W, axis=0, keepdims=True)

    def copy(self) -> "GatingParams":
        return GatingParams(self.W.copy(), self.G.copy(), self.alpha, self.mode, self.k, self.scalar_rates)


@dataclass
class RoutingDecision:
    active: tuple
    weights: tuple
    scores: np.ndarray
    unrouted: bool = False


@dataclass
class RoutingBatch:
    """Routing outcome for ``n`` tokens as dense n x K arrays."""

    mask: np.ndarray  # bool n x K
    weights: np.ndarray  # n x K, zero off the active set
    scores: np.ndarray  # n x K raw scores (cosines or softmax probabilities)
    preact: Optional[np.ndarray] = None  # dynamic gate pre-activations
    tokens: Optional[np.ndarray] = None  # gate inputs, needed for unrouted aggregation

    @property
    def unrouted(self) -> np.ndarray:
        return ~self.mask.any(axis=1)

    def __len__(self):
        return self.mask.shape[0]

    def decision(self, i: int) -> RoutingDecision:
        active = tuple(int(e) for e in np.flatnonzero(self.mask[i]))
        return RoutingDecision(
            active=active,
            weights=tuple(float(self.weights[i, e]) for e in active),
            scores=self.scores[i].copy(),
            unrouted=not active,
        )

    def decisions(self) -> list:
        return [self.decision(i) for i in range(len(self))]


# --- reference per-token gates ----------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def cosine_scores(x, params: GatingParams) -> np.ndarray:
    """Cosine similarity between token ``x`` and every expert column."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    nrm = np.linalg.norm(x)
    if nrm == 0:
        raise RoutingError("cannot score a zero-norm token")
    cols = np.linalg.norm(params.W, axis=0)
    return (x @ params.W) / (nrm * cols)


def vanilla_topk_gate(x, params: GatingParams, k: Optional[int] = None) -> RoutingDecision:
    """Softmax over ``W^T x``, keep the k largest, renormalise over them."""
    k = params.k if k is None else k
    if not 1 <= k <= params.K:
        raise ConfigError(f"top-k needs 1 <= k <= K, got k={k}, K={params.K}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    logits = x @ params.W
    e = np.exp(logits - logits.max())
    g = e / e.sum()
    order = np.argsort(-g, kind="stable")[:k]
    active = tuple(sorted(int(i) for i in order))
    sel = np.array([g[i] for i in active])
    weights = sel / sel.sum()
    return RoutingDecision(active=active, weights=tuple(float(w) for w in weights), scores=g)


def task_rates(params: GatingParams, rates) -> np.ndarray:
    rates = np.asarray(rates, dtype=np.float64).reshape(-1)
    if params.scalar_rates or rates.size == 1:
        return np.full(params.K, rates.mean())
    return rates


def dynamic_gate(x, rates, params: GatingParams) -> RoutingDecision:
    """Task-weighted threshold gate.

    Expert e is active iff ``sigmoid((s_e + alpha*a_e) / (1 + alpha)) -
    sigmoid(G_e) > 0``; active experts are mixed with weights proportional
    to the first sigmoid term.
    """
    s = cosine_scores(x, params)
    a = task_rates(params, rates)
    q = _sigmoid((s + params.alpha * a) / (1.0 + params.alpha))
    p = q - _sigmoid(params.G)
    active = tuple(int(e) for e in np.flatnonzero(p > 0))
    if not active:
        return RoutingDecision(active=(), weights=(), scores=s, unrouted=True)
    sel = q[list(active)]
    total = 0.0
    for v in sel:
        total += v
    return RoutingDecision(active=active, weights=tuple(float(v / total) for v in sel), scores=s)


# --- graph-level layer ------------------------------------------------------


def expert_forward(X, W1, b1, W2, b2):
    h = nx.gelu(nx.add(nx.matmul(X, W1), b1))
    return nx.add(nx.matmul(h, W2), b2)


def _ordered_row_sum(x):
    """Row sums accumulated column by column in index order."""
    K = x.value.shape[1]
    acc = nx.slice_cols(x, 0, 1)
    for e in range(1, K):
        acc = nx.add(acc, nx.slice_cols(x, e, e + 1))
    return acc


def rowwise_matmul(a, b):
    """``a @ b`` with each entry reduced independently of the other columns.

    BLAS may pick a different kernel when the column count of ``b`` changes;
    this form keeps every score bit-stable under expert removal. The product
    is forced to C order so the reduction axis is contiguous whatever layout
    ``b`` arrives in (column selection hands back Fortran-ordered arrays).
    """
    A, B = a.value, b.value
    out = np.multiply(A[:, None, :], B.T[None, :, :], order="C").sum(axis=2)

    def vjp(g):
        return g @ B.T, A.T @ g

    return a.graph._record("rowwise_matmul", out, (a, b), vjp)


@dataclass
class MoEOutput:
    y: object  # graph node, n x d
    routing: RoutingBatch
    assign: object  # graph node, n x K gate activations sigma(.) (soft mass for the aux loss)
    preact: object = None  # graph node of dynamic pre-activations


def rate_matrix(params: GatingParams, A: np.ndarray, tags: Sequence[int]) -> np.ndarray:
    rows = np.asarray(A, dtype=np.float64)[np.asarray(tags, dtype=np.intp)]
    if params.scalar_rates:
        rows = np.repeat(rows.mean(axis=1, keepdims=True), params.K, axis=1)
    return rows


def moe_layer(
    X,
    tags: Sequence[int],
    experts: Sequence[tuple],
    W,
    G,
    params: GatingParams,
    A: Optional[np.ndarray],
    anchor: Optional[np.ndarray] = None,
) -> MoEOutput:
    """Route the rows of graph node ``X`` through ``experts``.

    ``experts`` holds (W1, b1, W2, b2) node tuples; ``W`` and ``G`` are the
    gating nodes (G as 1 x K). ``A`` is the task x expert rate table used by
    the dynamic gate. ``anchor`` freezes the step function at given
    pre-activations (see :func:`numerics.ste_sign`).
    """
    K = len(experts)
    if K == 0:
        raise ConfigError("MoE layer needs at least one expert")
    if W.value.shape[1] != K:
        raise ConfigError(f"{W.value.shape[1]} gating columns for {K} experts")
    g = X.graph
    n = X.value.shape[0]
    preact = None
    if params.mode == DYNAMIC:
        xn = X.value
        if np.any((xn * xn).sum(axis=1) == 0):
            raise RoutingError("cannot score a zero-norm token")
        S = rowwise_matmul(nx.l2_normalize_rows(X), nx.l2_normalize_cols(W))
        rates = g.const(rate_matrix(params, A, tags))
        Q = nx.sigmoid(nx.scale(nx.add(S, nx.scale(rates, params.alpha)), 1.0 / (1.0 + params.alpha)))
        preact = nx.sub(Q, nx.sigmoid(G))
        M = nx.ste_sign(preact, anchor)
        mass = nx.mul(M, Q)
        soft = Q
        active = (anchor if anchor is not None else preact.value) > 0
        scores = S.value
    else:
        logits = rowwise_matmul(X, W)
        probs = nx.softmax_rows(logits)
        order = np.argsort(-probs.value, axis=1, kind="stable")[:, : params.k]
        active = np.zeros((n, K), dtype=bool)
        np.put_along_axis(active, order, True, axis=1)
        mass = nx.mul(probs, g.const(active.astype(np.float64)))
        soft = probs
        scores = probs.value
    denom = _ordered_row_sum(mass)
    unrouted = ~active.any(axis=1)
    # unrouted rows: denominator 0 -> divide by 1, every weight stays 0
    weights = nx.div(mass, nx.add(denom, g.const(unrouted.astype(np.float64)[:, None])))
    y = None
    for e, (W1, b1, W2, b2) in enumerate(experts):
        contrib = nx.mul(nx.slice_cols(weights, e, e + 1), expert_forward(X, W1, b1, W2, b2))
        y = contrib if y is None else nx.add(y, contrib)
    routing = RoutingBatch(
        mask=active,
        weights=weights.value,
        scores=scores,
        preact=None if preact is None else preact.value,
        tokens=X.value,
    )
    return MoEOutput(y=y, routing=routing, assign=soft, preact=preact)


def moe_forward(X, tags, experts: Sequence[Expert], params: GatingParams, record=None):
    """Array-level MoE forward: returns ``(Y, decisions)``.

    Unrouted tokens produce a zero row; the residual connection that keeps
    them alive lives in the decoder block.
    """
    if len(experts) == 0:
        raise ConfigError("MoE layer needs at least one expert")
    g = nx.Graph(requires_grad=False)
    X = g.const(X)
    nodes = [tuple(g.const(a) for a in (ex.W1, ex.b1, ex.W2, ex.b2)) for ex in experts]
    A = None
    if params.mode == DYNAMIC:
        if record is None:
            raise ConfigError("dynamic gating needs a routing record for task rates")
        A = record.A
    out = moe_layer(X, tags, nodes, g.const(params.W), g.const(params.G.reshape(1, -1)), params, A)
    return out.y.value, out.routing.decisions()
