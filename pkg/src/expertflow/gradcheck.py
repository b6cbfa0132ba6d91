"""Full-model finite-difference check of the analytic gradients.

The dynamic gate's step function is frozen at reference pre-activations
(``numerics.ste_sign`` anchor mode), which turns the straight-through rule
into an exact derivative of a smooth surrogate. Gate thresholds are set so
every pre-activation sits well away from zero; half the experts always fire
and half never do, so both the active and the inactive straight-through
paths are exercised.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .losses import LossWeights
from .model import DecoderState, ModelConfig, compute_losses, enter_stage, forward_batch, pack, sample_item
from .synthdata import SynthConfig, gen_sample

TOLERANCE = 1e-3
MIN_MARGIN = 0.05


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)  # parameter group -> relative error
    min_margin: float = 0.0
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE and self.min_margin > MIN_MARGIN


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b)) / scale


def tiny_setup(seed: int = 0):
    """d=16, K=4, one block, plus a two-sample batch."""
    mcfg = ModelConfig(
        d=16, blocks=1, attn_heads=2, expert_hidden=16, K_init=4, text_vocab=10,
        max_frames=4, max_targets=24, max_events=1, seed=seed,
    )
    dcfg = SynthConfig(
        n_classes=2, frames=4, dim=16, max_events=1, saliency_table=(3, 1),
        min_len=1.0, max_len=2.0, min_gap=0.5, text_vocab=10, seed=seed,
    )
    state = DecoderState.init(mcfg)
    for s in (1, 2, 3):
        enter_stage(state, s)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    blk = state.moe[0]
    blk.gating.G = np.array([-3.0, 3.0, -3.0, 3.0])
    blk.record.A = rng.uniform(0.0, 1.0, blk.record.A.shape)
    blk.record.A_e = rng.uniform(0.05, 1.0, blk.record.A_e.shape)
    # perturb the cloned experts so they differ noticeably
    for ex in blk.experts:
        for name, arr in ex.arrays().items():
            setattr(ex, name, arr + rng.normal(0.0, 0.2, arr.shape))
    for name in ("head.time", "head.score", "head.text"):
        state.params[name] = rng.normal(0.0, 0.3, state.params[name].shape)
    samples = [gen_sample(dcfg, "DVC", 1), gen_sample(dcfg, "MR", 2)]
    return state, samples


def run_gradcheck(seed: int = 0, h: float = 1e-5, weights: LossWeights = None, log=None) -> GradcheckReport:
    t0 = time.perf_counter()
    weights = weights or LossWeights(lambda1=0.5, lambda2=0.01, z_coef=0.01)
    state, samples = tiny_setup(seed)
    batch = pack(state.config, [sample_item(s) for s in samples])
    names = list(state.named_parameters())
    ref = forward_batch(state, batch, requires_grad=False)
    anchors = [out.preact.value.copy() for out in ref.moe]
    margin = float(min(np.abs(a).min() for a in anchors))

    res = forward_batch(state, batch, trainable=set(names), anchors=anchors)
    loss = compute_losses(state, res, 3, weights)["total"]
    analytic = nx.backward(res.graph, loss)

    def loss_at(name):
        base = state.named_parameters()[name].copy()

        def f(theta):
            state.set_parameter(name, theta)
            out = forward_batch(state, batch, anchors=anchors, requires_grad=False)
            return float(compute_losses(state, out, 3, weights)["total"].value[0, 0])

        return f, base

    report = GradcheckReport(min_margin=margin)
    for name in names:
        f, base = loss_at(name)
        try:
            numeric = nx.finite_diff(f, base, h)
        finally:
            state.set_parameter(name, base)
        report.errors[name] = relative_error(analytic[name], numeric)
        if log is not None:
            log(name, report.errors[name])
    report.seconds = time.perf_counter() - t0
    return report
