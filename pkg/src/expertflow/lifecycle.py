"""Routing statistics and the expert add/remove lifecycle."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .event_codec import TaskType
from .exceptions import ConfigError
from .gating import Expert, GatingParams, RoutingBatch

logger = logging.getLogger(__name__)

N_TASK_TYPES = len(TaskType)
CSV_HEADER = "layer,expert,task_type,activation_rate"


@dataclass
class LifecycleConfig:
    ema_decay: float = 0.99
    tau_min: float = 0.01
    tau_add: float = 0.05
    window: int = 200
    warmup: int = 500
    K_min: int = 2
    K_max: int = 16
    new_expert_noise: float = 0.02
    enabled: bool = True
    in_finetune: bool = True

    def __post_init__(self):
        if not 0 < self.ema_decay < 1:
            raise ConfigError("lifecycle.ema_decay must lie in (0, 1)")
        if not 0 < self.tau_min < 1:
            raise ConfigError("lifecycle.tau_min must lie in (0, 1)")
        if not 0 <= self.tau_add <= 1:
            raise ConfigError("lifecycle.tau_add must lie in [0, 1]")
        if self.window < 1 or self.warmup < 0:
            raise ConfigError("lifecycle.window must be >= 1 and warmup >= 0")
        if self.K_min < 1 or self.K_min > self.K_max:
            raise ConfigError("lifecycle needs 1 <= K_min <= K_max")

    def due(self, step: int) -> bool:
        """Whether an add/remove check runs after ``step`` recorded batches."""
        return self.enabled and step >= self.warmup and step > 0 and step % self.window == 0


@dataclass
class RoutingRecord:
    """Per-layer routing history.

    ``A`` holds EMA activation rates per (task type, expert); ``A_e`` the
    overall per-expert rate; ``R_E`` the last step each expert fired (-1 if
    never); ``rs_mean``/``rs_count`` the running mean of unrouted token
    embeddings.
    """

    A: np.ndarray
    A_e: np.ndarray
    R_E: np.ndarray
    rs_mean: np.ndarray
    rs_count: int = 0
    unrouted_frac: float = 0.0
    step: int = 0
    ema_decay: float = 0.99

    @classmethod
    def fresh(cls, K: int, d: int, ema_decay: float = 0.99) -> "RoutingRecord":
        return cls(
            A=np.zeros((N_TASK_TYPES, K)),
            A_e=np.zeros(K),
            R_E=np.full(K, -1.0),
            rs_mean=np.zeros(d),
            ema_decay=ema_decay,
        )

    @property
    def K(self) -> int:
        return self.A.shape[1]

    def copy(self) -> "RoutingRecord":
        return RoutingRecord(
            self.A.copy(), self.A_e.copy(), self.R_E.copy(), self.rs_mean.copy(),
            self.rs_count, self.unrouted_frac, self.step, self.ema_decay,
        )

    def reset_unrouted(self) -> None:
        self.rs_mean = np.zeros_like(self.rs_mean)
        self.rs_count = 0
        self.unrouted_frac = 0.0


def _as_batch(decisions, K: int, tokens=None) -> RoutingBatch:
    if isinstance(decisions, RoutingBatch):
        if tokens is not None:
            decisions.tokens = np.asarray(tokens, dtype=np.float64)
        return decisions
    n = len(decisions)
    mask = np.zeros((n, K), dtype=bool)
    weights = np.zeros((n, K))
    for i, dec in enumerate(decisions):
        for e, w in zip(dec.active, dec.weights):
            mask[i, e] = True
            weights[i, e] = w
    scores = np.array([dec.scores for dec in decisions]) if n else np.zeros((0, K))
    tok = None if tokens is None else np.asarray(tokens, dtype=np.float64)
    return RoutingBatch(mask=mask, weights=weights, scores=scores, tokens=tok)


def record_batch(decisions, tags: Sequence[int], record: RoutingRecord, tokens=None) -> RoutingRecord:
    """Fold one batch of routing decisions into ``record`` (in place).

    ``decisions`` is a :class:`RoutingBatch` or a list of per-token
    decisions; ``tokens`` supplies embeddings for the unrouted-token mean when
    the batch does not carry them.
    """
    batch = _as_batch(decisions, record.K, tokens)
    tags = np.asarray(tags, dtype=np.intp)
    mask = batch.mask
    if mask.shape != (len(tags), record.K):
        raise ConfigError(f"routing mask {mask.shape} does not match {len(tags)} tags x {record.K} experts")
    beta = record.ema_decay
    act = mask.astype(np.float64)
    for t in range(N_TASK_TYPES):
        rows = tags == t
        cnt = int(rows.sum())
        if cnt == 0:
            continue
        rate = act[rows].sum(axis=0) / cnt
        record.A[t] = beta * record.A[t] + (1.0 - beta) * rate
    n = len(tags)
    if n:
        record.A_e = beta * record.A_e + (1.0 - beta) * act.mean(axis=0)
        fired = mask.any(axis=0)
        record.R_E = np.where(fired, float(record.step), record.R_E)
        unrouted = ~mask.any(axis=1)
        record.unrouted_frac = beta * record.unrouted_frac + (1.0 - beta) * float(unrouted.mean())
        if unrouted.any() and batch.tokens is not None:
            xs = batch.tokens[unrouted]
            m = xs.shape[0]
            total = record.rs_count + m
            record.rs_mean = record.rs_mean + (xs.sum(axis=0) - m * record.rs_mean) / total
            record.rs_count = total
    record.step += 1
    return record


def _mean_expert(experts: Sequence[Expert]) -> Expert:
    return Expert(
        W1=np.mean([e.W1 for e in experts], axis=0),
        b1=np.mean([e.b1 for e in experts], axis=0),
        W2=np.mean([e.W2 for e in experts], axis=0),
        b2=np.mean([e.b2 for e in experts], axis=0),
    )


def maybe_add_expert(
    record: RoutingRecord,
    gating: GatingParams,
    experts: list,
    cfg: LifecycleConfig,
    rng: Optional[np.random.Generator] = None,
) -> Optional[int]:
    """Append an expert aimed at the unrouted-token direction, if triggered.

    The new gating column is the unit-normalised unrouted mean with threshold
    0; its body is the mean of the current experts plus Gaussian noise.
    Mutates ``gating``, ``experts`` and ``record``; returns the new index.
    """
    if record.unrouted_frac <= cfg.tau_add or record.rs_count == 0 or gating.K >= cfg.K_max:
        return None
    norm = float(np.linalg.norm(record.rs_mean))
    if norm == 0.0:
        logger.warning("unrouted-token mean is the zero vector; skipping expert addition")
        return None
    rng = rng if rng is not None else np.random.default_rng(0)
    col = record.rs_mean / norm
    gating.W = np.concatenate([gating.W, col[:, None]], axis=1)
    gating.G = np.concatenate([gating.G, [0.0]])
    base = _mean_expert(experts)
    sd = cfg.new_expert_noise
    experts.append(
        Expert(
            W1=base.W1 + rng.normal(0.0, sd, base.W1.shape),
            b1=base.b1 + rng.normal(0.0, sd, base.b1.shape),
            W2=base.W2 + rng.normal(0.0, sd, base.W2.shape),
            b2=base.b2 + rng.normal(0.0, sd, base.b2.shape),
        )
    )
    record.A = np.concatenate([record.A, np.zeros((N_TASK_TYPES, 1))], axis=1)
    record.A_e = np.concatenate([record.A_e, [0.0]])
    record.R_E = np.concatenate([record.R_E, [-1.0]])
    record.reset_unrouted()
    return gating.K - 1


def remove_stale_experts(record: RoutingRecord, gating: GatingParams, experts: list, cfg: LifecycleConfig):
    """Drop experts whose overall activation rate is below ``tau_min``.

    At least ``K_min`` experts survive: when too many fall below the
    threshold the ones with the highest rate are kept. Returns
    ``(removed, remap)`` where ``remap`` maps surviving old indices to new.
    """
    K = gating.K
    cand = [e for e in range(K) if record.A_e[e] < cfg.tau_min]
    budget = max(0, K - cfg.K_min)
    if len(cand) > budget:
        cand = sorted(cand, key=lambda e: (record.A_e[e], e))[:budget]
    removed = sorted(cand)
    if not removed:
        return [], {e: e for e in range(K)}
    keep = [e for e in range(K) if e not in set(removed)]
    gating.W = gating.W[:, keep]
    gating.G = gating.G[keep]
    experts[:] = [experts[e] for e in keep]
    record.A = record.A[:, keep]
    record.A_e = record.A_e[keep]
    record.R_E = record.R_E[keep]
    return removed, {old: new for new, old in enumerate(keep)}


def export_activation_csv(records: Sequence[RoutingRecord]) -> str:
    """Per (layer, expert, task type) activation rates as CSV text."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for layer, rec in enumerate(records):
        for e in range(rec.K):
            for t in TaskType:
                buf.write(f"{layer},{e},{t.name},{rec.A[t, e]:.6f}\n")
    return buf.getvalue()


def parse_activation_csv(text: str) -> list:
    """Inverse of :func:`export_activation_csv` as (layer, expert, task, rate) tuples."""
    lines = text.strip("\n").split("\n")
    if lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {lines[0]!r}")
    out = []
    for line in lines[1:]:
        layer, expert, task, rate = line.split(",")
        out.append((int(layer), int(expert), task, float(rate)))
    return out
