"""Tiny causal decoder with MoE feed-forward blocks and three decoding heads.

Sequences are ``visual tokens ++ query tokens ++ target inputs``. Several
samples are packed into one matrix per step; a block-diagonal causal mask
keeps them independent.

Embedding tables follow the output segments: timestamps and the tokens that
close a timestamp field use the time table, saliency digits and their
closing ``<sync>`` the score table, caption tokens and their closing
``<sync>`` the text table. The heads mirror the same split.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .event_codec import (
    EOS,
    NUM_STRUCT,
    SYNC,
    TEXT_OFFSET,
    TOKEN_TABLE,
    GrammarState,
    TaskType,
    TokenStream,
    decode_events,
    derive_tags,
    encode_events,
    format_number,
)
from .exceptions import CheckpointError, ConfigError, ContractError, NonFiniteLossError
from .gating import DYNAMIC, TOPK, Expert, GatingParams, expert_forward, moe_layer
from .lifecycle import LifecycleConfig, RoutingRecord, maybe_add_expert, record_batch, remove_stale_experts
from .losses import LossWeights, aux_loss, cross_entropy, stage_loss, z_loss
from .metrics import Prediction

HEAD_TIME, HEAD_SCORE, HEAD_TEXT = 0, 1, 2
HEAD_NAMES = ("time", "score", "text")
HEAD_TASK = (TaskType.TIME, TaskType.SCORE, TaskType.TEXT)
MAX_QUERY = 4


@dataclass
class ModelConfig:
    d: int = 64
    blocks: int = 2
    attn_heads: int = 2
    expert_hidden: int = 128
    K_init: int = 8
    text_vocab: int = 64
    max_frames: int = 32
    max_targets: int = 64
    gating: str = DYNAMIC
    k: int = 2
    alpha: float = 0.05
    scalar_rates: bool = False
    max_events: int = 3
    max_caption: int = 4
    init_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.blocks < 1 or self.attn_heads < 1:
            raise ConfigError("model.d, model.blocks and model.attn_heads must be positive")
        if self.d % self.attn_heads:
            raise ConfigError("model.d must be divisible by model.attn_heads")
        if self.gating not in (DYNAMIC, TOPK):
            raise ConfigError(f"model.gating must be 'dynamic' or 'topk', got {self.gating!r}")
        if self.K_init < 1:
            raise ConfigError("model.K_init must be >= 1")
        if self.gating == TOPK and not 1 <= self.k <= self.K_init:
            raise ConfigError("model.k must lie in 1..K_init")
        if self.alpha < 0:
            raise ConfigError("model.alpha must be >= 0")
        if self.text_vocab < 1 or self.max_frames < 1 or self.max_targets < 2:
            raise ConfigError("model vocabulary and context sizes must be positive")

    @property
    def context(self) -> int:
        return self.max_frames + MAX_QUERY + self.max_targets


# --- parameters and optimiser -------------------------------------------------


class Adam:
    """Adam with global gradient-norm clipping, keyed by parameter name."""

    def __init__(self, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, clip=1.0):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def reset(self):
        self.t = 0
        self.m.clear()
        self.v.clear()

    def step(self, params: dict, grads: dict) -> tuple:
        """Return ``(updated params, pre-clip grad norm)`` for the names in ``grads``."""
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for name, g in grads.items():
            g = g * scale
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out, norm

    def remap_block(self, prefix: str, keep: Sequence[int], added: int = 0):
        """Follow expert removal/addition in one block: keep listed experts, zero-init new ones."""
        new_m, new_v = {}, {}
        for store, new in ((self.m, new_m), (self.v, new_v)):
            for name, arr in store.items():
                if not name.startswith(prefix):
                    new[name] = arr
                    continue
                rest = name[len(prefix):]
                if rest.startswith("experts."):
                    j, leaf = rest[len("experts."):].split(".", 1)
                    j = int(j)
                    if j in keep:
                        new[f"{prefix}experts.{keep.index(j)}.{leaf}"] = arr
                elif rest in ("gate.W", "gate.G"):
                    arr = arr[:, list(keep)]
                    if added:
                        arr = np.concatenate([arr, np.zeros((arr.shape[0], added))], axis=1)
                    new[name] = arr
        self.m, self.v = new_m, new_v


@dataclass
class MoEState:
    gating: GatingParams
    experts: list
    record: RoutingRecord


class DecoderState:
    """All parameters, routing records, optimiser state and the stage marker."""

    def __init__(self, config: ModelConfig, params: dict, moe: list, stage: int = 0, lifecycle_seed=None):
        self.config = config
        self.params = params
        self.moe = moe
        self.stage = stage
        self.optimizer = Adam()
        self.rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, 0xADD]) if lifecycle_seed is None else lifecycle_seed
        )

    @classmethod
    def init(cls, config: ModelConfig, ema_decay: float = 0.99) -> "DecoderState":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xDEC0DE]))
        d, V = config.d, config.text_vocab
        std = 0.02
        p = {
            "embed.frame": np.eye(d) + rng.normal(0.0, std, (d, d)),
            "embed.time": rng.normal(0.0, std * 10, (NUM_STRUCT, d)),
            "embed.score": rng.normal(0.0, std * 10, (NUM_STRUCT, d)),
            "embed.text": rng.normal(0.0, std * 10, (V + 2, d)),
            "embed.pos": rng.normal(0.0, std * 10, (config.context, d)),
        }
        for i in range(config.blocks):
            p[f"blocks.{i}.norm1"] = np.ones((1, d))
            for w in ("Wq", "Wk", "Wv"):
                p[f"blocks.{i}.attn.{w}"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
            p[f"blocks.{i}.attn.Wo"] = rng.normal(0.0, std, (d, d))
            p[f"blocks.{i}.norm2"] = np.ones((1, d))
            ffn = Expert.init(rng, d, config.expert_hidden)
            ffn.W2 = ffn.W2 * 0.1
            for k, v in ffn.arrays().items():
                p[f"blocks.{i}.ffn.{k}"] = v
        p["norm_f"] = np.ones((1, d))
        p["head.time"] = rng.normal(0.0, std, (d, NUM_STRUCT))
        p["head.score"] = rng.normal(0.0, std, (d, NUM_STRUCT))
        p["head.text"] = rng.normal(0.0, std, (d, V + 2))
        moe = []
        for i in range(config.blocks):
            gating = GatingParams.init(
                rng, d, config.K_init, alpha=config.alpha, mode=config.gating,
                k=min(config.k, config.K_init), scalar_rates=config.scalar_rates,
            )
            moe.append(MoEState(gating, [], RoutingRecord.fresh(config.K_init, d, ema_decay)))
        return cls(config, p, moe)

    # parameters ---------------------------------------------------------------

    def named_parameters(self) -> dict:
        out = dict(self.params)
        for i, blk in enumerate(self.moe):
            out[f"blocks.{i}.gate.W"] = blk.gating.W
            out[f"blocks.{i}.gate.G"] = blk.gating.G.reshape(1, -1)
            for j, ex in enumerate(blk.experts):
                for k, v in ex.arrays().items():
                    out[f"blocks.{i}.experts.{j}.{k}"] = v
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            self.params[name] = value
            return
        parts = name.split(".")
        blk = self.moe[int(parts[1])]
        if parts[2] == "gate":
            if parts[3] == "W":
                blk.gating.W = value
            else:
                blk.gating.G = np.asarray(value).reshape(-1)
        elif parts[2] == "experts":
            setattr(blk.experts[int(parts[3])], parts[4], value)
        else:
            raise KeyError(name)

    def trainable(self, stage: int) -> set:
        names = self.named_parameters()
        if stage == 1:
            return {n for n in names if ".gate." not in n and ".experts." not in n}
        if stage == 2:
            return {n for n in names if ".gate." in n or ".experts." in n}
        if stage == 3:
            return {n for n in names if n != "embed.frame" and ".ffn." not in n}
        raise ContractError(f"unknown stage {stage!r}")

    @property
    def uses_moe(self) -> bool:
        return self.stage >= 2

    def copy(self) -> "DecoderState":
        return copy.deepcopy(self)


# --- sequence packing ------------------------------------------------------------


def segment_of_stream(ids: Sequence[int], tags: Sequence[TaskType]) -> list:
    """Segment (head index) of every token in an event stream.

    ``<sync>`` belongs to the field it closes; EOS belongs to the time
    segment because it competes with the first digit of a new event.
    """
    out = []
    prev = None
    for tok, tag in zip(ids, tags):
        if tag in (TaskType.TIME, TaskType.SEP, TaskType.EOS):
            seg = HEAD_TIME
        elif tag == TaskType.SCORE:
            seg = HEAD_SCORE
        elif tag == TaskType.TEXT:
            seg = HEAD_TEXT
        else:  # SYNC
            seg = prev
        out.append(seg)
        prev = seg
    return out


def head_local(token: int, head: int, text_vocab: int) -> int:
    if head in (HEAD_TIME, HEAD_SCORE):
        if token >= NUM_STRUCT:
            raise ContractError(f"token {token} cannot be emitted by the {HEAD_NAMES[head]} head")
        return token
    if token >= TEXT_OFFSET:
        local = token - TEXT_OFFSET
        if local >= text_vocab:
            raise ContractError(f"text token {token} outside vocabulary")
        return local
    if token == SYNC:
        return text_vocab
    if token == EOS:
        return text_vocab + 1
    raise ContractError(f"token {token} cannot be emitted by the text head")


def local_to_token(local: int, head: int, text_vocab: int) -> int:
    if head in (HEAD_TIME, HEAD_SCORE):
        return local
    if local < text_vocab:
        return local + TEXT_OFFSET
    return SYNC if local == text_vocab else EOS


@dataclass
class PackedBatch:
    n: int
    frames: np.ndarray  # n x d, zero outside visual rows
    onehot: tuple  # (time n x 14, score n x 14, text n x (V+2)) input-embedding selectors
    pos: np.ndarray  # position within the sample
    seg: np.ndarray  # sample index of each row
    tags: np.ndarray  # routing task type per row
    mask: np.ndarray  # n x n additive attention mask
    pred_rows: tuple  # per head: row indices whose output predicts a target
    pred_targets: tuple  # per head: head-local target ids
    n_targets: int
    sample_ranges: list = field(default_factory=list)


def _time_avg_row(ts: float, out_row: np.ndarray) -> None:
    toks = format_number(round(float(ts) * 10) / 10, TaskType.TIME)
    for t in toks:
        out_row[t] += 1.0 / len(toks)


def pack(
    config: ModelConfig,
    items: Sequence[tuple],
) -> PackedBatch:
    """Build a packed batch from ``(frames, timestamps, query, target_ids, hints)`` tuples.

    ``target_ids`` is the teacher stream (ending in EOS for training, or a
    generation prefix). Every target token becomes a prediction row; the
    extra final row of a prefix is marked by ``pred_rows`` too when
    ``target_ids`` does not end in EOS.
    """
    V = config.text_vocab
    rows_frames, rows_time, rows_score, rows_text = [], [], [], []
    pos, seg, tags = [], [], []
    pred_rows = ([], [], [])
    pred_targets = ([], [], [])
    ranges = []
    n = 0
    for b, (frames, timestamps, query, target_ids, hints) in enumerate(items):
        frames = np.asarray(frames, dtype=np.float64)
        T = frames.shape[0]
        if T > config.max_frames:
            raise ContractError(f"{T} frames exceed max_frames={config.max_frames}")
        if len(timestamps) != T:
            raise ContractError(f"{len(timestamps)} timestamps for {T} frames")
        if hints is not None and len(hints) != T:
            raise ContractError(f"{len(hints)} saliency hints for {T} frames")
        if frames.shape[1] != config.d:
            raise ContractError(f"frame width {frames.shape[1]} != model width {config.d}")
        if not 1 <= len(query) <= MAX_QUERY:
            raise ContractError(f"query length must be 1..{MAX_QUERY}")
        ids = list(target_ids)
        if len(ids) > config.max_targets:
            raise ContractError(f"{len(ids)} target tokens exceed max_targets={config.max_targets}")
        stream_tags = derive_tags(ids)
        segs = segment_of_stream(ids, stream_tags)
        L = T + len(query) + max(len(ids) - 1, 0) + (0 if ids and ids[-1] == EOS else 1)
        if not ids:
            L = T + len(query)
        if L > config.context:
            raise ContractError(f"sequence of {L} tokens exceeds context {config.context}")
        start = n
        for i in range(T):
            r_t = np.zeros(NUM_STRUCT)
            _time_avg_row(timestamps[i], r_t)
            r_s = np.zeros(NUM_STRUCT)
            if hints is not None:
                for t in format_number(int(hints[i]), TaskType.SCORE):
                    r_s[t] += 1.0
            rows_frames.append(frames[i])
            rows_time.append(r_t)
            rows_score.append(r_s)
            rows_text.append(np.zeros(V + 2))
            tags.append(TaskType.VISUAL)
        for q in query:
            r = np.zeros(V + 2)
            r[head_local(q, HEAD_TEXT, V)] = 1.0
            rows_frames.append(np.zeros(config.d))
            rows_time.append(np.zeros(NUM_STRUCT))
            rows_score.append(np.zeros(NUM_STRUCT))
            rows_text.append(r)
            tags.append(TaskType.TEXT)
        # inputs: every target except a final EOS
        ended = bool(ids) and ids[-1] == EOS
        inputs = ids[:-1] if ended else ids
        for tok, tag, sg in zip(inputs, stream_tags, segs):
            r_t, r_s, r_x = np.zeros(NUM_STRUCT), np.zeros(NUM_STRUCT), np.zeros(V + 2)
            if sg == HEAD_TIME:
                r_t[tok] = 1.0
            elif sg == HEAD_SCORE:
                r_s[tok] = 1.0
            else:
                r_x[head_local(tok, HEAD_TEXT, V)] = 1.0
            rows_frames.append(np.zeros(config.d))
            rows_time.append(r_t)
            rows_score.append(r_s)
            rows_text.append(r_x)
            tags.append(tag)
        length = T + len(query) + len(inputs)
        pos.extend(range(length))
        seg.extend([b] * length)
        first_pred = start + T + len(query) - 1
        for k, tok in enumerate(ids):
            h = segs[k]
            pred_rows[h].append(first_pred + k)
            pred_targets[h].append(head_local(tok, h, V))
        ranges.append((start, start + length))
        n += length
    seg_a = np.asarray(seg)
    pos_a = np.asarray(pos)
    allowed = (seg_a[:, None] == seg_a[None, :]) & (pos_a[None, :] <= pos_a[:, None])
    mask = np.where(allowed, 0.0, -1e30)
    return PackedBatch(
        n=n,
        frames=np.asarray(rows_frames),
        onehot=(np.asarray(rows_time), np.asarray(rows_score), np.asarray(rows_text)),
        pos=pos_a,
        seg=seg_a,
        tags=np.asarray(tags, dtype=np.intp),
        mask=mask,
        pred_rows=tuple(np.asarray(r, dtype=np.intp) for r in pred_rows),
        pred_targets=tuple(np.asarray(t, dtype=np.intp) for t in pred_targets),
        n_targets=sum(len(r) for r in pred_rows),
        sample_ranges=ranges,
    )


def teacher_stream(sample) -> TokenStream:
    return encode_events(sample.gold)


def sample_item(sample, target_ids=None):
    ids = teacher_stream(sample).ids if target_ids is None else target_ids
    return (sample.frames, sample.frame_timestamps, sample.query, ids, None)


# --- forward ------------------------------------------------------------------


@dataclass
class ForwardResult:
    graph: nx.Graph
    params: dict  # name -> node
    logits: tuple  # per head: node (rows x width) or None
    moe: list  # per block: MoEOutput or None
    hidden: object  # final normalised hidden states node
    batch: PackedBatch


def _param_nodes(g: nx.Graph, state: DecoderState, trainable: set) -> dict:
    out = {}
    for name, arr in state.named_parameters().items():
        out[name] = g.leaf(arr, name) if name in trainable else g.const(arr, name)
    return out


def _attention(g, X, P, i, cfg: ModelConfig, mask_node):
    q = nx.matmul(X, P[f"blocks.{i}.attn.Wq"])
    k = nx.matmul(X, P[f"blocks.{i}.attn.Wk"])
    v = nx.matmul(X, P[f"blocks.{i}.attn.Wv"])
    dh = cfg.d // cfg.attn_heads
    heads = []
    for h in range(cfg.attn_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = nx.slice_cols(q, lo, hi), nx.slice_cols(k, lo, hi), nx.slice_cols(v, lo, hi)
        scores = nx.add(nx.scale(nx.matmul(qh, nx.transpose(kh)), 1.0 / np.sqrt(dh)), mask_node)
        heads.append(nx.matmul(nx.softmax_rows(scores), vh))
    cat = heads[0] if len(heads) == 1 else nx.concat_cols(heads)
    return nx.matmul(cat, P[f"blocks.{i}.attn.Wo"])


def embed_inputs(g, P, batch: PackedBatch):
    oh_t, oh_s, oh_x = batch.onehot
    x = nx.matmul(g.const(batch.frames), P["embed.frame"])
    x = nx.add(x, nx.matmul(g.const(oh_t), P["embed.time"]))
    x = nx.add(x, nx.matmul(g.const(oh_s), P["embed.score"]))
    x = nx.add(x, nx.matmul(g.const(oh_x), P["embed.text"]))
    return nx.add(x, nx.take_rows(P["embed.pos"], batch.pos))


def forward_batch(
    state: DecoderState,
    batch: PackedBatch,
    trainable: Optional[set] = None,
    anchors: Optional[list] = None,
    rows_only: Optional[np.ndarray] = None,
    requires_grad: bool = True,
) -> ForwardResult:
    """Run the decoder over a packed batch.

    ``anchors`` (one array per block) freezes the dynamic gate step function
    for finite-difference checks. ``rows_only`` restricts head evaluation to
    the given rows (generation).
    """
    cfg = state.config
    g = nx.Graph(requires_grad=requires_grad)
    P = _param_nodes(g, state, trainable or set())
    x = embed_inputs(g, P, batch)
    mask_node = g.const(batch.mask)
    moe_out = []
    for i in range(cfg.blocks):
        h = nx.rms_norm(x, P[f"blocks.{i}.norm1"])
        x = nx.add(x, _attention(g, h, P, i, cfg, mask_node))
        h = nx.rms_norm(x, P[f"blocks.{i}.norm2"])
        if state.uses_moe:
            blk = state.moe[i]
            experts = [
                tuple(P[f"blocks.{i}.experts.{j}.{k}"] for k in ("W1", "b1", "W2", "b2"))
                for j in range(len(blk.experts))
            ]
            out = moe_layer(
                h, batch.tags, experts, P[f"blocks.{i}.gate.W"], P[f"blocks.{i}.gate.G"],
                blk.gating, blk.record.A, None if anchors is None else anchors[i],
            )
            moe_out.append(out)
            x = nx.add(x, out.y)
        else:
            ffn = [P[f"blocks.{i}.ffn.{k}"] for k in ("W1", "b1", "W2", "b2")]
            x = nx.add(x, expert_forward(h, *ffn))
            moe_out.append(None)
    hf = nx.rms_norm(x, P["norm_f"])
    logits = []
    for hd, name in enumerate(HEAD_NAMES):
        rows = batch.pred_rows[hd]
        if rows_only is not None:
            logits.append(None)
            continue
        if len(rows) == 0:
            logits.append(None)
            continue
        logits.append(nx.matmul(nx.take_rows(hf, rows), P[f"head.{name}"]))
    return ForwardResult(graph=g, params=P, logits=tuple(logits), moe=moe_out, hidden=hf, batch=batch)


def head_logits(res: ForwardResult, row: int, head: int) -> np.ndarray:
    h = res.hidden.value[row]
    return h @ res.params[f"head.{HEAD_NAMES[head]}"].value


def forward(sample, state: DecoderState, teacher: Optional[TokenStream] = None) -> list:
    """Per-target-position logits, each from the head matching the position's task type.

    Returns a list of ``(TaskType, logits vector)`` in stream order.
    """
    ids = teacher_stream(sample).ids if teacher is None else teacher.ids
    batch = pack(state.config, [sample_item(sample, ids)])
    res = forward_batch(state, batch, requires_grad=False)
    rows = []
    for hd in range(3):
        if res.logits[hd] is None:
            continue
        for r, row in enumerate(batch.pred_rows[hd]):
            rows.append((int(row), HEAD_TASK[hd], res.logits[hd].value[r]))
    rows.sort(key=lambda t: t[0])
    return [(task, vec) for _, task, vec in rows]


def fuse_frame_tokens(frames, timestamps, state: DecoderState, saliency_hints=None) -> np.ndarray:
    """Frame embeddings projected by the fusion table plus mean time-token embeddings."""
    frames = np.asarray(frames, dtype=np.float64)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if len(timestamps) != frames.shape[0]:
        raise ContractError(f"{len(timestamps)} timestamps for {frames.shape[0]} frames")
    if saliency_hints is not None and len(saliency_hints) != frames.shape[0]:
        raise ContractError("one saliency hint per frame is required")
    if np.any(np.diff(timestamps) < 0):
        raise ContractError("frame timestamps must be nondecreasing")
    T = frames.shape[0]
    avg_t = np.zeros((T, NUM_STRUCT))
    avg_s = np.zeros((T, NUM_STRUCT))
    for i in range(T):
        _time_avg_row(timestamps[i], avg_t[i])
        if saliency_hints is not None:
            for t in format_number(int(saliency_hints[i]), TaskType.SCORE):
                avg_s[i, t] += 1.0
    p = state.params
    return frames @ p["embed.frame"] + avg_t @ p["embed.time"] + avg_s @ p["embed.score"]


# --- losses per step --------------------------------------------------------------


def compute_losses(state: DecoderState, res: ForwardResult, stage: int, weights: LossWeights) -> dict:
    batch = res.batch
    g = res.graph
    ce_parts, z_parts = [], []
    for hd in range(3):
        lg = res.logits[hd]
        if lg is None:
            continue
        ce_parts.append(cross_entropy(lg, batch.pred_targets[hd], reduction="sum"))
        z_parts.append(z_loss(lg, reduction="sum"))
    ce = ce_parts[0]
    z = z_parts[0]
    for a, b in zip(ce_parts[1:], z_parts[1:]):
        ce = nx.add(ce, a)
        z = nx.add(z, b)
    ce = nx.scale(ce, 1.0 / batch.n_targets)
    z = nx.scale(z, 1.0 / batch.n_targets)
    aux = g.const(np.zeros((1, 1)))
    if stage >= 2 and state.uses_moe:
        task_rows = np.flatnonzero((batch.tags == TaskType.TIME) | (batch.tags == TaskType.SCORE))
        for i, out in enumerate(res.moe):
            blk = state.moe[i]
            if len(task_rows):
                n_soft = nx.col_sum(nx.take_rows(out.assign, task_rows))
            else:
                n_soft = g.const(np.zeros((1, blk.gating.K)))
            if weights.aux_target == "batch":
                rates = out.routing.mask.sum(axis=0).astype(np.float64)
            else:
                rates = blk.record.A_e
            aux = nx.add(aux, aux_loss(rates, n_soft, res.params[f"blocks.{i}.gate.W"], weights))
    total = stage_loss(stage, {"ce": ce, "z": z, "aux": aux}, weights)
    return {"ce": ce, "z": z, "aux": aux, "total": total}


# --- training -------------------------------------------------------------------


@dataclass
class StepLog:
    step: int
    stage: int
    ce: float
    z: float
    aux: float
    total: float
    active_experts_mean: float
    K: tuple
    events: list = field(default_factory=list)  # (layer, "add"/"remove", expert index)


def enter_stage(state: DecoderState, stage: int) -> None:
    """Move ``state`` to ``stage``; stages must run in order 1 -> 2 -> 3."""
    if stage not in (1, 2, 3):
        raise ContractError(f"unknown stage {stage!r}")
    if stage == state.stage:
        return
    if stage != state.stage + 1:
        raise ContractError(f"stage {stage} cannot follow stage {state.stage}")
    cfg = state.config
    if stage == 2:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC10E]))
        for i, blk in enumerate(state.moe):
            base = Expert(*(state.params[f"blocks.{i}.ffn.{k}"] for k in ("W1", "b1", "W2", "b2")))
            blk.experts = []
            for _ in range(blk.gating.K):
                blk.experts.append(
                    Expert(*(a + rng.normal(0.0, cfg.init_noise, a.shape) for a in (base.W1, base.b1, base.W2, base.b2)))
                )
    state.stage = stage
    state.optimizer.reset()


def _lifecycle(state: DecoderState, stage: int, lcfg: LifecycleConfig, step: int, log_events: list):
    for i, blk in enumerate(state.moe):
        if blk.gating.mode != DYNAMIC:
            continue
        if stage == 3 and not lcfg.in_finetune:
            continue
        if not lcfg.due(blk.record.step):
            continue
        prefix = f"blocks.{i}."
        removed, remap = remove_stale_experts(blk.record, blk.gating, blk.experts, lcfg)
        keep = sorted(remap, key=remap.get)
        for e in removed:
            log_events.append((i, "remove", e))
        new = maybe_add_expert(blk.record, blk.gating, blk.experts, lcfg, state.rng)
        if new is not None:
            log_events.append((i, "add", new))
        if removed or new is not None:
            state.optimizer.remap_block(prefix, keep, added=0 if new is None else 1)


def train_step(
    batch_samples: Sequence,
    state: DecoderState,
    stage: int,
    lcfg: Optional[LifecycleConfig] = None,
    weights: Optional[LossWeights] = None,
    step: int = 0,
) -> StepLog:
    """One teacher-forced optimisation step; mutates ``state`` in place."""
    if stage not in (1, 2, 3):
        raise ContractError(f"unknown stage {stage!r}")
    if stage != state.stage:
        raise ContractError(f"state is in stage {state.stage}, not {stage}; call enter_stage first")
    lcfg = lcfg or LifecycleConfig()
    weights = weights or LossWeights()
    batch = pack(state.config, [sample_item(s) for s in batch_samples])
    trainable = state.trainable(stage)
    res = forward_batch(state, batch, trainable=trainable)
    parts = compute_losses(state, res, stage, weights)
    vals = {k: float(v.value[0, 0]) for k, v in parts.items()}
    if not all(np.isfinite(v) for v in vals.values()):
        raise NonFiniteLossError(f"non-finite loss at stage {stage} step {step}: {vals}", vals)
    grads = nx.backward(res.graph, parts["total"])
    grads = {n: grads[n] for n in trainable if n in grads}
    params = state.named_parameters()
    updated, _ = state.optimizer.step(params, grads)
    for name, value in updated.items():
        state.set_parameter(name, value)
    res.graph.release()
    active = 0.0
    routed = 0
    events: list = []
    if state.uses_moe:
        for i, out in enumerate(res.moe):
            record_batch(out.routing, batch.tags, state.moe[i].record)
            active += float(out.routing.mask.sum())
            routed += out.routing.mask.shape[0]
        if lcfg.enabled:
            _lifecycle(state, stage, lcfg, step, events)
        for blk in state.moe:
            if blk.gating.mode == DYNAMIC:
                blk.gating.renormalize()
    return StepLog(
        step=step,
        stage=stage,
        ce=vals["ce"],
        z=vals["z"],
        aux=vals["aux"],
        total=vals["total"],
        active_experts_mean=active / routed if routed else 0.0,
        K=tuple(blk.gating.K for blk in state.moe) if state.uses_moe else tuple(0 for _ in state.moe),
        events=events,
    )


def run_stage(
    stage: int,
    dataset: Sequence,
    state: DecoderState,
    steps: int,
    lcfg: Optional[LifecycleConfig] = None,
    weights: Optional[LossWeights] = None,
    batch_size: int = 8,
    lr: float = 3e-4,
    on_step: Optional[Callable[[StepLog], None]] = None,
    step_offset: int = 0,
) -> DecoderState:
    """Enter ``stage`` and train for ``steps`` minibatches drawn from ``dataset``."""
    enter_stage(state, stage)
    state.optimizer.lr = lr
    rng = np.random.default_rng(np.random.SeedSequence([state.config.seed, 0xBA7C, stage]))
    n = len(dataset)
    bs = min(batch_size, n)
    for s in range(steps):
        idx = rng.choice(n, size=bs, replace=False)
        log = train_step([dataset[i] for i in sorted(idx)], state, stage, lcfg, weights, step=step_offset + s)
        if on_step is not None:
            on_step(log)
    return state


# --- generation -------------------------------------------------------------------


def generate(
    frames,
    query,
    state: DecoderState,
    max_events: Optional[int] = None,
    timestamps=None,
    return_prediction: bool = False,
):
    """Greedy decoding under the event grammar.

    Only grammar-legal tokens of the head matching the current field are
    considered, so the output always decodes; numeric fields are further
    restricted so that intervals stay ordered and inside the video.
    """
    cfg = state.config
    max_events = cfg.max_events if max_events is None else max_events
    if max_events < 1:
        raise ContractError("max_events must be >= 1")
    frames = np.asarray(frames, dtype=np.float64)
    if timestamps is None:
        timestamps = np.arange(frames.shape[0], dtype=np.float64)
    max_time = float(timestamps[-1]) + 1.0 if len(timestamps) else 0.0
    grammar = GrammarState(cfg.text_vocab, max_time, max_events, cfg.max_caption)
    # worst-case tokens of one event: two timestamps, sep, three syncs, score digit, caption
    time_len = len(format_number(max_time, TaskType.TIME))
    event_budget = 2 * time_len + 5 + cfg.max_caption
    ids: list = []
    res = None
    while not grammar.done:
        allowed = grammar.allowed()
        head = {TaskType.TIME: HEAD_TIME, TaskType.SCORE: HEAD_SCORE, TaskType.TEXT: HEAD_TEXT}[grammar.head()]
        if EOS in allowed and len(ids) + event_budget + 1 > cfg.max_targets:
            allowed = [EOS]
        batch = pack(cfg, [(frames, timestamps, query, ids, None)])
        res = forward_batch(state, batch, rows_only=np.array([batch.n - 1]), requires_grad=False)
        logits = head_logits(res, batch.n - 1, head)
        locals_ = [head_local(t, head, cfg.text_vocab) for t in allowed]
        best = max(range(len(allowed)), key=lambda k: (logits[locals_[k]], -k))
        tok = allowed[best]
        grammar.step(tok)
        ids.append(tok)
    events = decode_events(ids, text_vocab=cfg.text_vocab)
    if not return_prediction:
        return events
    act, routed = 0.0, 0
    if res is not None and state.uses_moe:
        for out in res.moe:
            act += float(out.routing.mask.sum())
            routed += out.routing.mask.shape[0]
    return Prediction(events=events, active_experts=act, routed=routed)


class Predictor:
    """Adapter giving :func:`metrics.evaluate` a ``predict(sample)`` method."""

    def __init__(self, state: DecoderState, max_events: Optional[int] = None):
        self.state = state
        self.max_events = max_events

    def predict(self, sample) -> Prediction:
        return generate(
            sample.frames, sample.query, self.state, self.max_events,
            timestamps=sample.frame_timestamps, return_prediction=True,
        )


class OracleModel:
    """Replays gold sequences; the perfect-predictor reference for evaluation."""

    def predict(self, sample) -> Prediction:
        return Prediction(events=sample.gold)


# --- checkpoints -------------------------------------------------------------------

MAGIC = b"EXPF1"
VERSION = 1


def _state_header(state: DecoderState) -> dict:
    return {
        "model": asdict(state.config),
        "stage": state.stage,
        "token_table": TOKEN_TABLE,
        "blocks": [
            {
                "K": blk.gating.K,
                "alpha": blk.gating.alpha,
                "mode": blk.gating.mode,
                "k": blk.gating.k,
                "scalar_rates": blk.gating.scalar_rates,
                "n_experts": len(blk.experts),
                "record": {
                    "rs_count": blk.record.rs_count,
                    "unrouted_frac": blk.record.unrouted_frac,
                    "step": blk.record.step,
                    "ema_decay": blk.record.ema_decay,
                },
            }
            for blk in state.moe
        ],
        "optimizer": {"t": state.optimizer.t, "lr": state.optimizer.lr},
        "rng": state.rng.bit_generator.state,
    }


def _state_arrays(state: DecoderState) -> list:
    out = list(state.named_parameters().items())
    for i, blk in enumerate(state.moe):
        out.append((f"record.{i}.A", blk.record.A))
        out.append((f"record.{i}.A_e", blk.record.A_e))
        out.append((f"record.{i}.R_E", blk.record.R_E))
        out.append((f"record.{i}.rs_mean", blk.record.rs_mean))
    for name in sorted(state.optimizer.m):
        out.append((f"optim.m.{name}", state.optimizer.m[name]))
        out.append((f"optim.v.{name}", state.optimizer.v[name]))
    return out


def _float_repr(obj):
    # floats as repr strings so the header text round-trips bit-exactly
    if isinstance(obj, float):
        return {"__f64__": obj.hex()}
    if isinstance(obj, dict):
        return {k: _float_repr(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_float_repr(v) for v in obj]
    return obj


def _float_unrepr(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__f64__"}:
            return float.fromhex(obj["__f64__"])
        return {k: _float_unrepr(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_float_unrepr(v) for v in obj]
    return obj


def checkpoint_bytes(state: DecoderState) -> bytes:
    header = json.dumps(_float_repr(_state_header(state)), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header]
    arrays = _state_arrays(state)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(state: DecoderState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state))


def load_checkpoint_bytes(data: bytes) -> DecoderState:
    """Rebuild a state from checkpoint bytes; any malformed input raises CheckpointError."""
    try:
        return _parse_checkpoint(data)
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(data: bytes) -> DecoderState:
    if data[:5] != MAGIC:
        raise CheckpointError("not an expert-flow checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 5)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 7
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = _float_unrepr(json.loads(data[off : off + hlen].decode("utf-8")))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        arrays[name] = arr
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint records")
    config = ModelConfig(**header["model"])
    moe = []
    for i, b in enumerate(header["blocks"]):
        gating = GatingParams(
            W=arrays[f"blocks.{i}.gate.W"], G=arrays[f"blocks.{i}.gate.G"].reshape(-1),
            alpha=b["alpha"], mode=b["mode"], k=b["k"], scalar_rates=b["scalar_rates"],
        )
        experts = [
            Expert(*(arrays[f"blocks.{i}.experts.{j}.{k}"] for k in ("W1", "b1", "W2", "b2")))
            for j in range(b["n_experts"])
        ]
        r = b["record"]
        record = RoutingRecord(
            A=arrays[f"record.{i}.A"], A_e=arrays[f"record.{i}.A_e"], R_E=arrays[f"record.{i}.R_E"],
            rs_mean=arrays[f"record.{i}.rs_mean"], rs_count=r["rs_count"], unrouted_frac=r["unrouted_frac"],
            step=r["step"], ema_decay=r["ema_decay"],
        )
        moe.append(MoEState(gating, experts, record))
    params = {
        k: v for k, v in arrays.items()
        if not k.startswith(("record.", "optim.")) and ".gate." not in k and ".experts." not in k
    }
    state = DecoderState(config, params, moe, stage=header["stage"])
    state.optimizer.t = header["optimizer"]["t"]
    state.optimizer.lr = header["optimizer"]["lr"]
    for k, v in arrays.items():
        if k.startswith("optim.m."):
            state.optimizer.m[k[len("optim.m."):]] = v
        elif k.startswith("optim.v."):
            state.optimizer.v[k[len("optim.v."):]] = v
    state.rng.bit_generator.state = header["rng"]
    return state


def load_checkpoint(path) -> DecoderState:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())


# --- routing inspection -------------------------------------------------------------


def measure_routing(state: DecoderState, dataset: Sequence, batch_size: int = 8) -> list:
    """Exact per-task-type activation rates over ``dataset`` under teacher forcing.

    Returns one :class:`RoutingRecord` per block whose ``A`` holds plain
    means (not EMAs). A state that has not reached stage 2 is probed with
    freshly cloned experts and its initial gating.
    """
    if not state.uses_moe:
        state = state.copy()
        for s in range(state.stage + 1, 3):
            enter_stage(state, s)
    counts = [np.zeros((len(TaskType), blk.gating.K)) for blk in state.moe]
    totals = np.zeros(len(TaskType))
    for lo in range(0, len(dataset), batch_size):
        chunk = dataset[lo : lo + batch_size]
        batch = pack(state.config, [sample_item(s) for s in chunk])
        res = forward_batch(state, batch, requires_grad=False)
        for t in range(len(TaskType)):
            totals[t] += int((batch.tags == t).sum())
        for i, out in enumerate(res.moe):
            act = out.routing.mask.astype(np.float64)
            for t in range(len(TaskType)):
                counts[i][t] += act[batch.tags == t].sum(axis=0)
    records = []
    for i, blk in enumerate(state.moe):
        rec = RoutingRecord.fresh(blk.gating.K, state.config.d)
        nz = totals > 0
        rec.A[nz] = counts[i][nz] / totals[nz, None]
        rec.A_e = counts[i].sum(axis=0) / max(totals.sum(), 1.0)
        records.append(rec)
    return records
