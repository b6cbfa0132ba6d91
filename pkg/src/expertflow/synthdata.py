"""Seed-addressed synthetic temporal-grounding samples (MR / DVC / VHD).

A video is ``frames`` one-second frames. Each event covers an interval on
the 0.5 s grid and belongs to a class with a fixed unit prototype; a frame
embedding is the coverage-weighted mix of the class and background
prototypes plus Gaussian noise, so half-second boundaries stay visible in
the frame content.

Text-vocabulary layout (local index; token id = index + 14)::

    0 MR marker   1 DVC marker   2 VHD marker   3 "any" query token
    4 .. 4+C-1    class query tokens
    4+C + 2c, 4+C + 2c + 1   caption template of class c
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .event_codec import TEXT_OFFSET, Event, EventSequence
from .exceptions import ConfigError, GenerationError

TASK_KINDS = ("MR", "DVC", "VHD")
_PROTO_SALT = 0x5EED_C1A5
ANY_TOKEN = 3


@dataclass
class SynthConfig:
    n_classes: int = 6
    frames: int = 32
    dim: int = 64
    min_events: int = 1
    max_events: int = 3
    noise: float = 0.3
    saliency_table: tuple = (1, 4, 2, 0, 3, 1)
    min_len: float = 2.0
    max_len: float = 8.0
    min_gap: float = 1.0
    text_vocab: int = 64
    seed: int = 0

    def __post_init__(self):
        self.saliency_table = tuple(int(s) for s in self.saliency_table)
        if self.n_classes < 1:
            raise ConfigError("data.n_classes must be >= 1")
        if 4 + 3 * self.n_classes > self.text_vocab:
            raise ConfigError("data.text_vocab must hold 4 + 3 * n_classes tokens")
        if len(self.saliency_table) < self.n_classes:
            raise ConfigError("data.saliency_table needs one score per class")
        if any(not 0 <= s <= 4 for s in self.saliency_table):
            raise ConfigError("data.saliency_table scores must lie in 0..4")
        if not 1 <= self.min_events <= self.max_events:
            raise ConfigError("data needs 1 <= min_events <= max_events")
        if self.noise < 0:
            raise ConfigError("data.noise must be >= 0")
        for name in ("min_len", "max_len", "min_gap"):
            if (getattr(self, name) * 2) % 1:
                raise ConfigError(f"data.{name} must lie on the 0.5 s grid")
        if not 0 < self.min_len <= self.max_len:
            raise ConfigError("data needs 0 < min_len <= max_len")

    def marker(self, kind: str) -> int:
        return TEXT_OFFSET + TASK_KINDS.index(kind)

    def class_token(self, c: int) -> int:
        return TEXT_OFFSET + 4 + c

    def caption(self, c: int) -> tuple:
        base = TEXT_OFFSET + 4 + self.n_classes + 2 * c
        return (base, base + 1)


@dataclass
class SyntheticSample:
    frames: np.ndarray
    frame_timestamps: np.ndarray
    query: tuple
    task_kind: str
    gold: EventSequence
    seed: int = 0
    classes: tuple = field(default=())

    def __eq__(self, other):
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (
            np.array_equal(self.frames, other.frames)
            and np.array_equal(self.frame_timestamps, other.frame_timestamps)
            and self.query == other.query
            and self.task_kind == other.task_kind
            and self.gold == other.gold
            and self.seed == other.seed
        )


def prototype(index: int, dim: int) -> np.ndarray:
    """Unit vector for class ``index`` (-1 is the background)."""
    rng = np.random.default_rng(np.random.SeedSequence([_PROTO_SALT, index + 1, dim]))
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _place_intervals(rng, cfg: SynthConfig, m: int):
    T = float(cfg.frames)
    if m * cfg.min_len + (m - 1) * cfg.min_gap > T:
        raise GenerationError(f"{m} events of >= {cfg.min_len}s do not fit in {T}s")
    lens_grid = np.arange(cfg.min_len, min(cfg.max_len, T) + 0.25, 0.5)
    for _ in range(1000):
        lens = rng.choice(lens_grid, size=m)
        slack = T - lens.sum() - (m - 1) * cfg.min_gap
        if slack < 0:
            continue
        # split the slack over m+1 gaps on the half-second grid
        units = int(round(slack * 2))
        cuts = np.sort(rng.integers(0, units + 1, size=m))
        gaps = np.diff(np.concatenate([[0], cuts])) / 2.0
        out, t = [], 0.0
        for i in range(m):
            t += gaps[i] + (cfg.min_gap if i else 0.0)
            out.append((t, t + float(lens[i])))
            t += float(lens[i])
        return out
    raise GenerationError("could not place events")


def gen_sample(cfg: SynthConfig, task_kind: str, seed: int) -> SyntheticSample:
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, TASK_KINDS.index(task_kind)]))
    m = int(rng.integers(cfg.min_events, cfg.max_events + 1))
    if m > cfg.n_classes:
        raise GenerationError(f"{m} events need {m} distinct classes, only {cfg.n_classes} exist")
    intervals = _place_intervals(rng, cfg, m)
    classes = [int(c) for c in rng.choice(cfg.n_classes, size=m, replace=False)]

    T, d = cfg.frames, cfg.dim
    coverage = np.zeros((T, m))
    for j, (s, e) in enumerate(intervals):
        for i in range(T):
            coverage[i, j] = max(0.0, min(e, i + 1.0) - max(s, float(i)))
    protos = np.stack([prototype(c, d) for c in classes])
    bg = prototype(-1, d)
    frames = np.empty((T, d))
    for i in range(T):
        inside = coverage[i].sum()
        if inside >= 1.0:
            frames[i] = coverage[i] @ protos
        else:
            frames[i] = coverage[i] @ protos + (1.0 - inside) * bg
    if cfg.noise > 0:
        frames = frames + rng.normal(0.0, cfg.noise, size=(T, d))

    events = [
        Event(s, e, cfg.saliency_table[c], cfg.caption(c)) for (s, e), c in zip(intervals, classes)
    ]
    if task_kind == "MR":
        j = int(rng.integers(0, m))
        gold = EventSequence((events[j],))
        query = (cfg.marker("MR"), cfg.class_token(classes[j]))
    else:
        gold = EventSequence(tuple(events))
        query = (cfg.marker(task_kind), TEXT_OFFSET + ANY_TOKEN)
    return SyntheticSample(
        frames=frames,
        frame_timestamps=np.arange(T, dtype=np.float64),
        query=query,
        task_kind=task_kind,
        gold=gold,
        seed=seed,
        classes=tuple(classes),
    )


def gen_split(cfg: SynthConfig, n: int, base_seed: int = 0) -> list:
    """``n`` samples with seeds ``base_seed + i``; task kinds cycle MR, DVC, VHD."""
    if n < 1:
        raise ConfigError("split size must be >= 1")
    return [gen_sample(cfg, TASK_KINDS[i % 3], base_seed + i) for i in range(n)]


def make_splits(cfg: SynthConfig, n_train: int, n_val: int, base_seed: int = 0):
    """Train and validation splits drawn from disjoint seed ranges."""
    train = gen_split(cfg, n_train, base_seed)
    val = gen_split(cfg, n_val, base_seed + n_train)
    return train, val


# --- dump format --------------------------------------------------------------


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(text: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").reshape(shape).astype(np.float64)


def sample_record(sample: SyntheticSample) -> dict:
    return {
        "seed": sample.seed,
        "task_kind": sample.task_kind,
        "query": list(sample.query),
        "frames_shape": list(sample.frames.shape),
        "frames": _b64(sample.frames),
        "frame_timestamps": _b64(sample.frame_timestamps),
        "gold": [
            {"start_s": ev.start_s, "end_s": ev.end_s, "saliency": ev.saliency, "caption": list(ev.caption)}
            for ev in sample.gold
        ],
        "classes": list(sample.classes),
    }


def sample_from_record(rec: dict) -> SyntheticSample:
    shape = tuple(rec["frames_shape"])
    return SyntheticSample(
        frames=_unb64(rec["frames"], shape),
        frame_timestamps=_unb64(rec["frame_timestamps"], (shape[0],)),
        query=tuple(rec["query"]),
        task_kind=rec["task_kind"],
        gold=EventSequence(
            tuple(Event(e["start_s"], e["end_s"], e["saliency"], tuple(e["caption"])) for e in rec["gold"])
        ),
        seed=rec["seed"],
        classes=tuple(rec.get("classes", ())),
    )


def dumps_sample(sample: SyntheticSample) -> str:
    return json.dumps(sample_record(sample), sort_keys=True, separators=(",", ":"))


def sample_digest(sample: SyntheticSample) -> str:
    return hashlib.sha256(dumps_sample(sample).encode("utf-8")).hexdigest()


def dump_dataset(samples: Iterable[SyntheticSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(dumps_sample(s) + "\n")


def load_dataset(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [sample_from_record(json.loads(line)) for line in fh if line.strip()]
