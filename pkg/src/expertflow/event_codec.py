"""Event triplets <-> interleaved, task-tagged token streams.

Token id table (fixed, also embedded in checkpoints)::

    0-9   digits            10  '.'
    11    <sep>             12  <sync>
    13    EOS               14+ text vocabulary

Per event the stream is ``TIME(start) <sep> TIME(end) <sync> SCORE <sync>
TEXT... <sync>``; the whole stream ends with EOS.
"""

from __future__ import annotations

import enum
import operator
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence

from .exceptions import DomainError, ParseError

DOT = 10
SEP = 11
SYNC = 12
EOS = 13
TEXT_OFFSET = 14
NUM_STRUCT = 14  # width of the time/score vocabularies (ids 0..13)
MAX_SALIENCY = 4

TOKEN_TABLE = {
    **{str(i): i for i in range(10)},
    ".": DOT,
    "<sep>": SEP,
    "<sync>": SYNC,
    "EOS": EOS,
    "text_offset": TEXT_OFFSET,
}


class TaskType(enum.IntEnum):
    TIME = 0
    SCORE = 1
    TEXT = 2
    SEP = 3
    SYNC = 4
    EOS = 5
    # frame tokens; never appears inside an event stream
    VISUAL = 6


STREAM_TYPES = (TaskType.TIME, TaskType.SCORE, TaskType.TEXT, TaskType.SEP, TaskType.SYNC, TaskType.EOS)


def _tenths(value: float) -> int:
    t = round(value * 10)
    if abs(value * 10 - t) > 1e-6:
        raise DomainError(f"time {value!r} is not representable at one decimal")
    return int(t)


@dataclass(frozen=True)
class Event:
    start_s: float
    end_s: float
    saliency: int
    caption: tuple

    def __post_init__(self):
        object.__setattr__(self, "caption", tuple(int(c) for c in self.caption))
        if not (0 <= self.start_s < self.end_s):
            raise DomainError(f"invalid interval [{self.start_s}, {self.end_s}]")
        _tenths(self.start_s)
        _tenths(self.end_s)
        if isinstance(self.saliency, bool) or int(self.saliency) != self.saliency:
            raise DomainError(f"saliency must be an integer, got {self.saliency!r}")
        if not 0 <= self.saliency <= MAX_SALIENCY:
            raise DomainError(f"saliency {self.saliency} outside 0..{MAX_SALIENCY}")
        if not self.caption:
            raise DomainError("caption must be nonempty")
        if min(self.caption) < TEXT_OFFSET:
            raise DomainError("caption contains reserved token ids")

    @property
    def interval(self):
        return (self.start_s, self.end_s)


@dataclass(frozen=True)
class EventSequence:
    events: tuple = ()

    def __post_init__(self):
        events = tuple(self.events)
        object.__setattr__(self, "events", events)
        for prev, cur in zip(events, events[1:]):
            if cur.start_s < prev.start_s:
                raise DomainError("events must be sorted by start time")
            if cur.start_s < prev.end_s:
                raise DomainError(
                    f"events overlap: [{prev.start_s}, {prev.end_s}] and [{cur.start_s}, {cur.end_s}]"
                )

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]


@dataclass(frozen=True)
class TokenStream:
    ids: tuple
    tags: tuple

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "tags", tuple(TaskType(t) for t in self.tags))
        if len(self.ids) != len(self.tags):
            raise ValueError("ids and tags must have equal length")

    def __len__(self):
        return len(self.ids)

    @property
    def tokens(self):
        return list(zip(self.ids, self.tags))


def number_string(value, kind: TaskType) -> str:
    if kind == TaskType.TIME:
        if value < 0:
            raise DomainError(f"negative time {value}")
        t = _tenths(float(value))
        return f"{t // 10}.{t % 10}"
    if kind == TaskType.SCORE:
        if isinstance(value, bool) or int(value) != value or not 0 <= value <= MAX_SALIENCY:
            raise DomainError(f"score {value!r} outside 0..{MAX_SALIENCY}")
        return str(int(value))
    raise DomainError(f"cannot format numbers of kind {kind!r}")


def format_number(value, kind: TaskType) -> list:
    """Number tokens for a timestamp (``'12.5'``) or a saliency score (``'3'``)."""
    return [DOT if ch == "." else int(ch) for ch in number_string(value, kind)]


def encode_events(seq: EventSequence) -> TokenStream:
    ids, tags = [], []

    def emit(toks, tag):
        ids.extend(toks)
        tags.extend([tag] * len(toks))

    for ev in seq.events:
        emit(format_number(ev.start_s, TaskType.TIME), TaskType.TIME)
        emit([SEP], TaskType.SEP)
        emit(format_number(ev.end_s, TaskType.TIME), TaskType.TIME)
        emit([SYNC], TaskType.SYNC)
        emit(format_number(ev.saliency, TaskType.SCORE), TaskType.SCORE)
        emit([SYNC], TaskType.SYNC)
        emit(list(ev.caption), TaskType.TEXT)
        emit([SYNC], TaskType.SYNC)
    emit([EOS], TaskType.EOS)
    return TokenStream(tuple(ids), tuple(tags))


def token_tag(token: int) -> TaskType:
    """Tag of a token id outside number fields (numbers need grammar state)."""
    if token == SEP:
        return TaskType.SEP
    if token == SYNC:
        return TaskType.SYNC
    if token == EOS:
        return TaskType.EOS
    if token >= TEXT_OFFSET:
        return TaskType.TEXT
    return TaskType.TIME


def derive_tags(ids: Sequence[int]) -> tuple:
    """Re-derive the tag of every position from token ids alone.

    Number tokens are TIME inside the two timestamp fields of an event and
    SCORE inside the saliency field; the field is tracked by counting
    ``<sync>`` tokens modulo three.
    """
    tags = []
    sync_count = 0
    for tok in ids:
        if tok <= DOT:
            tags.append(TaskType.SCORE if sync_count % 3 == 1 else TaskType.TIME)
        else:
            tags.append(token_tag(tok))
            if tok == SYNC:
                sync_count += 1
    return tuple(tags)


class _Parser:
    def __init__(self, ids, text_vocab):
        self.ids = list(ids)
        self.pos = 0
        self.text_vocab = text_vocab

    def peek(self):
        return self.ids[self.pos] if self.pos < len(self.ids) else None

    def fail(self, message, expected):
        raise ParseError(message, self.pos, expected)

    def expect(self, token, expected):
        tok = self.peek()
        if tok is None:
            self.fail("truncated stream", expected)
        if tok != token:
            self.fail(f"unexpected token {tok}", expected)
        self.pos += 1

    def number(self, expected):
        start = self.pos
        digits = []
        while self.peek() is not None and self.peek() <= 9:
            digits.append(self.ids[self.pos])
            self.pos += 1
        if not digits:
            if self.peek() is None:
                self.fail("truncated stream", expected)
            self.fail(f"unexpected token {self.peek()}", expected)
        if len(digits) > 1 and digits[0] == 0:
            raise ParseError("malformed number (leading zero)", start, expected)
        if self.peek() is None:
            self.fail("truncated stream", "'.'")
        if self.peek() != DOT:
            self.fail("malformed number (missing '.')", "'.'")
        self.pos += 1
        tok = self.peek()
        if tok is None:
            self.fail("truncated stream", "decimal digit")
        if tok > 9:
            self.fail("malformed number (empty decimal)", "decimal digit")
        self.pos += 1
        whole = 0
        for d in digits:
            whole = whole * 10 + d
        return (whole * 10 + tok) / 10

    def score(self):
        tok = self.peek()
        if tok is None:
            self.fail("truncated stream", "SCORE digit")
        if tok > MAX_SALIENCY:
            self.fail(f"invalid score token {tok}", "SCORE digit 0-4")
        self.pos += 1
        return tok

    def caption(self):
        toks = []
        while True:
            tok = self.peek()
            if tok is None:
                self.fail("truncated stream", "TEXT or <sync>")
            if tok == SYNC:
                break
            if tok < TEXT_OFFSET:
                self.fail(f"reserved token {tok} in caption", "TEXT or <sync>")
            if self.text_vocab is not None and tok >= TEXT_OFFSET + self.text_vocab:
                self.fail(f"token {tok} outside text vocabulary", "TEXT or <sync>")
            toks.append(tok)
            self.pos += 1
        if not toks:
            self.fail("empty caption", "TEXT")
        self.pos += 1
        return tuple(toks)

    def parse(self):
        events = []
        prev_end = None
        while True:
            tok = self.peek()
            if tok is None:
                self.fail("truncated stream", "TIME or EOS")
            if tok == EOS:
                self.pos += 1
                break
            ev_start = self.pos
            start = self.number("TIME")
            self.expect(SEP, "<sep>")
            end = self.number("TIME")
            if not start < end:
                raise ParseError(f"start {start} >= end {end}", ev_start, "start < end")
            if prev_end is not None and start < prev_end:
                raise ParseError("event overlaps or precedes previous event", ev_start, "ordered events")
            self.expect(SYNC, "<sync>")
            sal = self.score()
            self.expect(SYNC, "<sync>")
            cap = self.caption()
            events.append(Event(start, end, sal, cap))
            prev_end = end
        if self.pos != len(self.ids):
            self.fail("tokens after EOS", "end of stream")
        return EventSequence(tuple(events))


def decode_events(stream, text_vocab: Optional[int] = None) -> EventSequence:
    """Parse a token stream (``TokenStream`` or plain ids) back into events.

    Raises :class:`ParseError` carrying the failing index and the expected
    token category.
    """
    ids = stream.ids if isinstance(stream, TokenStream) else tuple(stream)
    clean = []
    for i, tok in enumerate(ids):
        try:
            tok = operator.index(tok)
        except TypeError:
            raise ParseError(f"non-integer token {tok!r}", i, "token id") from None
        if tok < 0:
            raise ParseError(f"negative token id {tok}", i, "token id")
        clean.append(tok)
    return _Parser(clean, text_vocab).parse()


# --- incremental grammar, used by constrained generation -------------------


class Field(enum.Enum):
    EVENT = "event"  # expecting a new event or EOS
    START = "start"
    END = "end"
    SCORE = "score"
    CAPTION = "caption"
    DONE = "done"


@lru_cache(maxsize=None)
def _number_strings(lo: int, hi: int) -> tuple:
    return tuple(f"{t // 10}.{t % 10}" for t in range(lo, hi + 1))


@lru_cache(maxsize=200_000)
def _viable_next(lo: int, hi: int, prefix: str) -> frozenset:
    """Characters that extend ``prefix`` towards some number in [lo, hi] tenths."""
    n = len(prefix)
    out = set()
    for s in _number_strings(lo, hi):
        if len(s) > n and s.startswith(prefix):
            out.add(s[n])
    return frozenset(out)


class GrammarState:
    """Left-to-right automaton over the event grammar.

    ``allowed()`` lists the token ids that keep the stream completable into
    a valid :class:`EventSequence` (sorted, non-overlapping, start < end,
    times within ``[0, max_time]``); ``head()`` names the decoding head for
    the next position.
    """

    def __init__(self, text_vocab: int, max_time: float, max_events: int, max_caption: int = 4):
        self.text_vocab = text_vocab
        self.max_tenths = _tenths(max_time)
        self.max_events = max_events
        self.max_caption = max_caption
        self.field = Field.EVENT
        self.prefix = ""
        self.after_dot = False
        self.n_events = 0
        self.prev_end = 0
        self.start = 0
        self.caption_len = 0
        self.ids: list = []

    def _range(self):
        if self.field == Field.START:
            return self.prev_end, self.max_tenths - 1
        return self.start + 1, self.max_tenths

    def head(self) -> TaskType:
        if self.field == Field.SCORE:
            return TaskType.SCORE
        if self.field == Field.CAPTION:
            return TaskType.TEXT
        return TaskType.TIME

    def allowed(self) -> list:
        f = self.field
        if f == Field.DONE:
            return []
        if f == Field.EVENT:
            opts = [EOS]
            if self.n_events < self.max_events and self.prev_end <= self.max_tenths - 1:
                opts = sorted(int(c) for c in _viable_next(self.prev_end, self.max_tenths - 1, "")) + opts
            return opts
        if f in (Field.START, Field.END):
            lo, hi = self._range()
            if self.after_dot and len(self.prefix) and self.prefix[-1] != ".":
                return [SEP if f == Field.START else SYNC]
            nxt = _viable_next(lo, hi, self.prefix)
            return sorted(DOT if c == "." else int(c) for c in nxt)
        if f == Field.SCORE:
            if self.prefix:
                return [SYNC]
            return list(range(MAX_SALIENCY + 1))
        # caption
        text = list(range(TEXT_OFFSET, TEXT_OFFSET + self.text_vocab))
        if self.caption_len == 0:
            return text
        if self.caption_len >= self.max_caption:
            return [SYNC]
        return text + [SYNC]

    def tag_for(self, token: int) -> TaskType:
        if token <= DOT:
            return TaskType.SCORE if self.field == Field.SCORE else TaskType.TIME
        return token_tag(token)

    def step(self, token: int) -> TaskType:
        if token not in self.allowed():
            raise ParseError(f"token {token} not allowed in field {self.field.value}", len(self.ids), self.field.value)
        tag = self.tag_for(token)
        self.ids.append(token)
        f = self.field
        if f == Field.EVENT:
            if token == EOS:
                self.field = Field.DONE
                return tag
            self.field = Field.START
            self.prefix, self.after_dot = "", False
            f = Field.START
        if f in (Field.START, Field.END):
            if token == SEP:
                self.start = self._value()
                self.field = Field.END
                self.prefix, self.after_dot = "", False
            elif token == SYNC:
                self.prev_end = self._value()
                self.field = Field.SCORE
                self.prefix = ""
            else:
                self.prefix += "." if token == DOT else str(token)
                self.after_dot = "." in self.prefix
        elif f == Field.SCORE:
            if token == SYNC:
                self.field = Field.CAPTION
                self.caption_len = 0
            else:
                self.prefix = str(token)
        elif f == Field.CAPTION:
            if token == SYNC:
                self.n_events += 1
                self.field = Field.EVENT
            else:
                self.caption_len += 1
        return tag

    def _value(self) -> int:
        whole, frac = self.prefix.split(".")
        return int(whole) * 10 + int(frac)

    @property
    def done(self) -> bool:
        return self.field == Field.DONE


def random_event_sequence(rng, text_vocab: int = 16, max_events: int = 4, max_time: float = 60.0, max_caption: int = 4):
    """Draw a valid EventSequence from ``rng`` (a ``numpy.random.Generator``)."""
    n = int(rng.integers(0, max_events + 1))
    max_t = _tenths(max_time)
    cuts = sorted(int(x) for x in rng.choice(max_t + 1, size=2 * n, replace=False))
    events = []
    for i in range(n):
        start, end = cuts[2 * i], cuts[2 * i + 1]
        cap_len = int(rng.integers(1, max_caption + 1))
        cap = tuple(int(c) + TEXT_OFFSET for c in rng.integers(0, text_vocab, size=cap_len))
        events.append(Event(start / 10, end / 10, int(rng.integers(0, MAX_SALIENCY + 1)), cap))
    return EventSequence(tuple(events))


def iter_event_intervals(seq: Iterable[Event]):
    for ev in seq:
        yield ev.start_s, ev.end_s
