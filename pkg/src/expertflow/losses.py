"""Training objectives: cross-entropy, z-loss and the task-dependent auxiliary loss.

All functions accept graph nodes (or plain arrays, which are wrapped as
fresh leaves) and return 1x1 nodes so they compose into one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ContractError


@dataclass
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 1e-4
    z_coef: float = 1e-3
    # "ema": historical activation rates as the target share; "batch": this batch's counts
    aux_target: str = "ema"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "z_coef"):
            if getattr(self, name) < 0:
                raise ConfigError(f"losses.{name} must be >= 0")
        if self.aux_target not in ("ema", "batch"):
            raise ConfigError(f"losses.aux_target must be 'ema' or 'batch', got {self.aux_target!r}")


def _node(x):
    if isinstance(x, nx.Node):
        return x
    return nx.Graph().leaf(x)


def _reduce(per_row, reduction: str, count: int):
    s = nx.total(per_row)
    if reduction == "sum":
        return s
    if reduction == "mean":
        return nx.scale(s, 1.0 / max(count, 1))
    raise ContractError(f"unknown reduction {reduction!r}")


def cross_entropy(logits, targets: Sequence[int], mask=None, reduction: str = "mean"):
    """Mean (or sum) over unmasked rows of ``-log softmax(logits)[target]``."""
    logits = _node(logits)
    n, V = logits.value.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (n,):
        raise ContractError(f"{targets.shape[0]} targets for {n} logit rows")
    if n and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"target id outside vocabulary of size {V}")
    nll = nx.scale(nx.pick(nx.log_softmax_rows(logits), targets), -1.0)
    count = n
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(n, 1)
        nll = nx.mul(nll, logits.graph.const(m))
        count = int(m.sum())
    return _reduce(nll, reduction, count)


def z_loss(logits, mask=None, reduction: str = "mean"):
    """Mean squared log-partition ``logsumexp(row)^2``."""
    logits = _node(logits)
    n = logits.value.shape[0]
    sq = nx.square(nx.logsumexp_rows(logits))
    count = n
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(n, 1)
        sq = nx.mul(sq, logits.graph.const(m))
        count = int(m.sum())
    return _reduce(sq, reduction, count)


def concentration_term(A_e, n_soft):
    """Squared distance between the normalised rate and assignment shares.

    ``A_e`` is a constant array; ``n_soft`` a 1 x K node. A side whose total
    is zero contributes a zero share vector.
    """
    g = n_soft.graph
    A = np.asarray(A_e, dtype=np.float64).reshape(1, -1)
    if A.shape[1] != n_soft.value.shape[1]:
        raise ContractError(f"{A.shape[1]} rates for {n_soft.value.shape[1]} experts")
    a_sum = A.sum()
    a_share = g.const(A / a_sum if a_sum > 0 else np.zeros_like(A))
    n_sum = float(n_soft.value.sum())
    if n_sum > 0:
        n_share = nx.div(n_soft, nx.total(n_soft))
    else:
        n_share = g.const(np.zeros_like(n_soft.value))
    return nx.total(nx.square(nx.sub(a_share, n_share)))


def aux_loss(A_e, n_soft, W_g, weights: LossWeights):
    """``lambda1 * concentration + lambda2 * sum_e ||w_e||^2``.

    When both the rate and assignment totals are zero only the norm penalty
    remains.
    """
    n_soft = _node(n_soft)
    g = n_soft.graph
    W_g = W_g if isinstance(W_g, nx.Node) else g.leaf(W_g)
    if np.any(n_soft.value < 0):
        raise ContractError("assignment mass must be nonnegative")
    reg = nx.scale(nx.total(nx.square(W_g)), weights.lambda2)
    conc = concentration_term(A_e, n_soft)
    return nx.add(nx.scale(conc, weights.lambda1), reg)


def stage_loss(stage: int, parts: Mapping[str, object], weights: LossWeights):
    """Combine per-stage objectives: CE alone in stage 1, the trio after."""
    if not isinstance(parts["ce"], nx.Node):
        g = nx.Graph()
        parts = {k: v if isinstance(v, nx.Node) else g.leaf(v) for k, v in parts.items()}
    if stage == 1:
        return parts["ce"]
    if stage in (2, 3):
        out = nx.add(parts["ce"], nx.scale(parts["z"], weights.z_coef))
        return nx.add(out, parts["aux"])
    raise ContractError(f"unknown training stage {stage!r}")
