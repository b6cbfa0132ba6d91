"""scikit-learn style wrapper around the staged training pipeline."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError
from .lifecycle import LifecycleConfig
from .losses import LossWeights
from .metrics import EvalReport, evaluate
from .model import DecoderState, ModelConfig, Predictor, measure_routing, run_stage


def check_samples(X, d: Optional[int] = None) -> list:
    """Validate a sequence of grounding samples; returns it as a list.

    Each sample needs a finite 2-D ``frames`` array, one nondecreasing
    timestamp per frame and a non-empty ``query``.
    """
    if X is None or isinstance(X, (str, bytes)):
        raise ContractError("expected a sequence of samples")
    samples = list(X)
    if not samples:
        raise ContractError("expected at least one sample")
    for i, s in enumerate(samples):
        for attr in ("frames", "frame_timestamps", "query"):
            if not hasattr(s, attr):
                raise ContractError(f"sample {i} has no {attr!r}")
        frames = np.asarray(s.frames)
        if frames.ndim != 2:
            raise ContractError(f"sample {i}: frames must be 2-D, got shape {frames.shape}")
        if d is not None and frames.shape[1] != d:
            raise ContractError(f"sample {i}: frame width {frames.shape[1]} != {d}")
        if not np.all(np.isfinite(frames)):
            raise ContractError(f"sample {i}: frames contain non-finite values")
        ts = np.asarray(s.frame_timestamps, dtype=np.float64)
        if ts.shape != (frames.shape[0],):
            raise ContractError(f"sample {i}: need one timestamp per frame")
        if np.any(np.diff(ts) < 0):
            raise ContractError(f"sample {i}: timestamps must be nondecreasing")
        if len(s.query) == 0:
            raise ContractError(f"sample {i}: empty query")
    return samples


class TemporalGrounder(BaseEstimator):
    """Three-stage dynamic-MoE decoder with the ``fit``/``predict``/``score`` API.

    ``fit`` expects samples carrying ``gold`` event sequences; ``y`` is
    ignored (targets live on the samples).
    """

    def __init__(
        self,
        d=64,
        blocks=2,
        attn_heads=2,
        expert_hidden=128,
        K_init=8,
        text_vocab=64,
        max_frames=32,
        gating="dynamic",
        k=2,
        alpha=0.05,
        steps=(500, 1000, 1000),
        batch_size=8,
        lr=3e-4,
        lifecycle=None,
        losses=None,
        seed=0,
    ):
        self.d = d
        self.blocks = blocks
        self.attn_heads = attn_heads
        self.expert_hidden = expert_hidden
        self.K_init = K_init
        self.text_vocab = text_vocab
        self.max_frames = max_frames
        self.gating = gating
        self.k = k
        self.alpha = alpha
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lifecycle = lifecycle
        self.losses = losses
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d, blocks=self.blocks, attn_heads=self.attn_heads, expert_hidden=self.expert_hidden,
            K_init=self.K_init, text_vocab=self.text_vocab, max_frames=self.max_frames,
            gating=self.gating, k=self.k, alpha=self.alpha, seed=self.seed,
        )

    def fit(self, X, y=None):
        samples = check_samples(X, self.d)
        if any(getattr(s, "gold", None) is None for s in samples):
            raise ContractError("fit needs samples with gold event sequences")
        if len(self.steps) != 3:
            raise ContractError("steps must list three stage lengths")
        lcfg = self.lifecycle or LifecycleConfig()
        weights = self.losses or LossWeights()
        state = DecoderState.init(self._model_config(), ema_decay=lcfg.ema_decay)
        self.history_ = []
        offset = 0
        for stage, n in zip((1, 2, 3), self.steps):
            run_stage(
                stage, samples, state, n, lcfg, weights, batch_size=self.batch_size,
                lr=self.lr, on_step=self.history_.append, step_offset=offset,
            )
            offset += n
        self.state_ = state
        self.n_experts_ = tuple(blk.gating.K for blk in state.moe)
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "state_")
        predictor = Predictor(self.state_)
        return [predictor.predict(s).events for s in check_samples(X, self.d)]

    def evaluate(self, X) -> EvalReport:
        check_is_fitted(self, "state_")
        return evaluate(Predictor(self.state_), check_samples(X, self.d))

    def score(self, X, y=None) -> float:
        """Mean of every per-kind metric in the evaluation report."""
        report = self.evaluate(X)
        vals = [v for row in report.per_kind.values() for v in row.values()]
        return math.fsum(vals) / len(vals)

    def routing_rates(self, X) -> list:
        """Per-block (task type x expert) activation-rate tables over ``X``."""
        check_is_fitted(self, "state_")
        return [r.A.copy() for r in measure_routing(self.state_, check_samples(X, self.d), self.batch_size)]
