"""Temporal grounding metrics and the evaluation harness."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .event_codec import EventSequence
from .exceptions import ContractError

F1_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
MAP_THRESHOLDS = (0.5, 0.75)
METRIC_KEYS = ("r1_iou50", "r1_iou70", "mean_iou", "dvc_f1", "caption_token_acc", "map_avg", "hit_at_1")
KIND_METRICS = {
    "MR": ("r1_iou50", "r1_iou70", "mean_iou"),
    "DVC": ("dvc_f1", "caption_token_acc"),
    "VHD": ("map_avg", "hit_at_1"),
}


def temporal_iou(a, b) -> float:
    (s1, e1), (s2, e2) = a, b
    if not (s1 < e1 and s2 < e2):
        raise ContractError(f"degenerate interval in IoU: {a}, {b}")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


def _intervals(seq):
    out = []
    for item in seq:
        if hasattr(item, "start_s"):
            out.append((item.start_s, item.end_s))
        else:
            out.append(tuple(item))
    return out


def recall_at_iou(preds: Sequence, golds: Sequence, tau: float):
    """Fraction of samples whose top-1 interval reaches IoU ``tau``.

    ``preds[i]`` is an interval or ``None`` (no prediction, IoU 0). Returns
    ``(recall, mean_iou)``.
    """
    if len(preds) != len(golds):
        raise ContractError("one prediction slot per gold target is required")
    if not golds:
        return 0.0, 0.0
    ious = [0.0 if p is None else temporal_iou(p, g) for p, g in zip(preds, golds)]
    hits = sum(1 for v in ious if v >= tau)
    return hits / len(golds), math.fsum(ious) / len(golds)


def greedy_match(preds: Sequence, golds: Sequence, tau: float) -> list:
    """One-to-one matching taking pairs in descending IoU order.

    Ties go to the lower prediction index, then the lower gold index. Only
    pairs with IoU >= ``tau`` are eligible.
    """
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(golds):
            v = temporal_iou(p, g)
            if v >= tau:
                pairs.append((-v, i, j))
    pairs.sort()
    used_p, used_g, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j))
    return out


def _f1(n_match: int, n_pred: int, n_gold: int) -> float:
    if n_pred == 0 and n_gold == 0:
        return 1.0
    p = n_match / n_pred if n_pred else 0.0
    r = n_match / n_gold if n_gold else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def dvc_f1(preds, golds, thresholds=F1_THRESHOLDS) -> float:
    """Mean over IoU thresholds of the localisation F1 under greedy matching."""
    P, G = _intervals(preds), _intervals(golds)
    scores = [_f1(len(greedy_match(P, G, t)), len(P), len(G)) for t in thresholds]
    return math.fsum(scores) / len(scores)


def caption_token_acc(preds: EventSequence, golds: EventSequence, tau: float = 0.5) -> float:
    """Exact caption-token accuracy over pairs matched at IoU ``tau``.

    Each matched pair scores the fraction of positions (up to the longer
    caption) whose tokens agree; unmatched gold events score 0.
    """
    if len(golds) == 0:
        return 1.0 if len(preds) == 0 else 0.0
    matches = greedy_match(_intervals(preds), _intervals(golds), tau)
    total = 0.0
    for i, j in matches:
        a, b = preds[i].caption, golds[j].caption
        n = max(len(a), len(b))
        total += sum(1 for x, y in zip(a, b) if x == y) / n
    return total / len(golds)


def _rank(preds):
    """Order scored predictions by score descending, earlier start first on ties."""
    items = [((float(iv[0]), float(iv[1])), float(score)) for iv, score in preds]
    return sorted(items, key=lambda it: (-it[1], it[0][0]))


def average_precision(preds, golds, tau: float) -> float:
    """Area under the precision-recall step curve for one IoU threshold."""
    G = _intervals(golds)
    if not G:
        return 0.0
    ranked = _rank(preds)
    used = set()
    tp = 0
    ap = 0.0
    for k, (iv, _) in enumerate(ranked, start=1):
        best, best_j = -1.0, None
        for j, g in enumerate(G):
            if j in used:
                continue
            v = temporal_iou(iv, g)
            if v >= tau and v > best:
                best, best_j = v, j
        if best_j is not None:
            used.add(best_j)
            tp += 1
            ap += tp / k
    return ap / len(G)


def highlight_map(preds, golds, thresholds=MAP_THRESHOLDS) -> float:
    """Mean AP over ``thresholds``; ``preds`` are ``(interval, score)`` pairs."""
    aps = [average_precision(preds, golds, t) for t in thresholds]
    return math.fsum(aps) / len(aps)


def hit_at_1(preds, golds) -> int:
    """1 iff the top-scored prediction hits (IoU >= 0.5) a maximal-saliency gold event.

    ``golds`` are ``(interval, saliency)`` pairs.
    """
    if not preds or not golds:
        return 0
    top_iv, _ = _rank(preds)[0]
    best = max(s for _, s in golds)
    return int(any(s == best and temporal_iou(top_iv, iv) >= 0.5 for iv, s in golds))


# --- harness ----------------------------------------------------------------


@dataclass
class Prediction:
    events: EventSequence
    active_experts: float = 0.0  # summed over (token, layer) routing evaluations
    routed: int = 0  # number of (token, layer) routing evaluations


@dataclass
class EvalReport:
    per_kind: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    mean_active_experts: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "mean_active_experts": self.mean_active_experts,
            "per_kind": {k: dict(v) for k, v in self.per_kind.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_kind", "count", *METRIC_KEYS])
        for kind in sorted(self.per_kind):
            row = self.per_kind[kind]
            vals = ["" if row.get(m) is None else f"{row[m]:.6f}" for m in METRIC_KEYS]
            w.writerow([kind, self.counts.get(kind, 0), *vals])
        return buf.getvalue()

    def rate(self, kind: str, metric: str) -> Optional[float]:
        return self.per_kind.get(kind, {}).get(metric)


def _sample_metrics(kind: str, pred: EventSequence, gold: EventSequence) -> dict:
    if kind == "MR":
        g = gold[0].interval
        p = pred[0].interval if len(pred) else None
        iou = 0.0 if p is None else temporal_iou(p, g)
        return {"r1_iou50": float(iou >= 0.5), "r1_iou70": float(iou >= 0.7), "mean_iou": iou}
    if kind == "DVC":
        return {"dvc_f1": dvc_f1(pred, gold), "caption_token_acc": caption_token_acc(pred, gold)}
    if kind == "VHD":
        scored = [(ev.interval, ev.saliency) for ev in pred]
        return {
            "map_avg": highlight_map(scored, [ev.interval for ev in gold]),
            "hit_at_1": float(hit_at_1(scored, [(ev.interval, ev.saliency) for ev in gold])),
        }
    raise ContractError(f"unknown task kind {kind!r}")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("EXPERTFLOW_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model, dataset: Sequence) -> EvalReport:
    """Run ``model.predict(sample)`` over ``dataset`` and aggregate metrics per task kind.

    ``model`` may also be a plain callable with the same contract.
    Aggregation uses exactly rounded sums, so the report does not depend on
    dataset order.
    """
    if not dataset:
        raise ContractError("cannot evaluate an empty dataset")
    predict: Callable = model.predict if hasattr(model, "predict") else model
    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(predict, dataset))
    else:
        preds = [predict(s) for s in dataset]

    per_sample: dict = {}
    active, routed = [], 0
    for sample, pred in zip(dataset, preds):
        if not isinstance(pred, Prediction):
            pred = Prediction(events=pred)
        m = _sample_metrics(sample.task_kind, pred.events, sample.gold)
        per_sample.setdefault(sample.task_kind, []).append(m)
        active.append(pred.active_experts)
        routed += pred.routed
    report = EvalReport()
    for kind in sorted(per_sample):
        rows = per_sample[kind]
        report.counts[kind] = len(rows)
        report.per_kind[kind] = {
            key: math.fsum(r[key] for r in rows) / len(rows) for key in KIND_METRICS[kind]
        }
    report.mean_active_experts = math.fsum(active) / routed if routed else None
    return report
