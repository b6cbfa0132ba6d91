"""Task-aware dynamic mixture-of-experts decoder for temporal grounding on synthetic data."""

from .event_codec import Event, EventSequence, TaskType, TokenStream, decode_events, encode_events
from .exceptions import ExpertFlowError
from .gating import GatingParams, dynamic_gate, moe_forward, vanilla_topk_gate
from .lifecycle import LifecycleConfig, RoutingRecord
from .losses import LossWeights
from .metrics import EvalReport, evaluate
from .model import DecoderState, ModelConfig, generate, run_stage, train_step
from .synthdata import SynthConfig, gen_sample, gen_split

__version__ = "0.1.0"

__all__ = [
    "DecoderState",
    "EvalReport",
    "Event",
    "EventSequence",
    "ExpertFlowError",
    "GatingParams",
    "LifecycleConfig",
    "LossWeights",
    "ModelConfig",
    "RoutingRecord",
    "SynthConfig",
    "TaskType",
    "TokenStream",
    "decode_events",
    "dynamic_gate",
    "encode_events",
    "evaluate",
    "gen_sample",
    "gen_split",
    "generate",
    "moe_forward",
    "run_stage",
    "train_step",
    "vanilla_topk_gate",
]
