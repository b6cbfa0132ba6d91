import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from expertflow.event_codec import Event, EventSequence
from expertflow.exceptions import ContractError
from expertflow.metrics import (
    MAP_THRESHOLDS, EvalReport, average_precision, caption_token_acc, dvc_f1, evaluate,
    greedy_match, highlight_map, hit_at_1, recall_at_iou, temporal_iou,
)
from expertflow.model import OracleModel
from expertflow.synthdata import SynthConfig, gen_split
from oracles import frac_iou, oracle_ap, oracle_f1


def rand_interval(rng, T=20):
    s = rng.randrange(0, 2 * T) / 2
    return (s, s + rng.randrange(1, 16) / 2)


def test_iou_examples():
    assert temporal_iou((0, 10), (0, 10)) == 1.0
    assert temporal_iou((0, 1), (2, 3)) == 0.0
    assert abs(temporal_iou((0, 10), (5, 15)) - 1 / 3) < 1e-15
    with pytest.raises(ContractError):
        temporal_iou((3, 3), (0, 1))


@given(st.integers(0, 2**31))
def test_iou_properties(seed):
    rng = random.Random(seed)
    a, b = rand_interval(rng), rand_interval(rng)
    v = temporal_iou(a, b)
    assert v == temporal_iou(b, a) and 0 <= v <= 1
    assert (v == 1) == (a == b)
    assert abs(v - float(frac_iou(a, b))) < 1e-15


def test_recall_examples_and_oracle():
    assert recall_at_iou([(0, 10)], [(0, 10)], 0.9)[0] == 1.0
    assert recall_at_iou([(0, 10)], [(5, 15)], 0.3)[0] == 1.0
    assert recall_at_iou([(0, 10)], [(5, 15)], 0.5)[0] == 0.0
    rng = random.Random(0)
    for _ in range(200):
        n = rng.randrange(1, 8)
        golds = [rand_interval(rng) for _ in range(n)]
        preds = [None if rng.random() < 0.1 else rand_interval(rng) for _ in range(n)]
        tau = rng.choice([0.5, 0.7])
        ious = [Fraction(0) if p is None else frac_iou(p, g) for p, g in zip(preds, golds)]
        r, m = recall_at_iou(preds, golds, tau)
        assert r == sum(1 for v in ious if v >= Fraction(str(tau))) / n
        assert abs(m - float(sum(ious) / n)) < 1e-12


def test_dvc_examples():
    ev = [(0, 4), (6, 9)]
    assert dvc_f1(ev, ev) == 1.0
    assert dvc_f1([], ev) == 0.0
    assert dvc_f1([], []) == 1.0
    P, G = [(0, 10), (0, 5)], [(0, 9), (4, 14)]
    want = oracle_f1(P, G)
    assert abs(dvc_f1(P, G) - float(want)) < 1e-12
    # greedy takes (0,10)-(0,9) first and strands the other pair at tau=0.3
    assert greedy_match(P, G, 0.3) == [(0, 0)]


def test_dvc_and_map_match_exhaustive_oracles():
    rng = random.Random(1)
    for _ in range(300):
        P = [rand_interval(rng, 8) for _ in range(rng.randrange(0, 5))]
        G = [rand_interval(rng, 8) for _ in range(rng.randrange(0, 5))]
        assert abs(dvc_f1(P, G) - float(oracle_f1(P, G))) < 1e-9
        scored = [(p, rng.randrange(0, 5)) for p in P]
        want = sum(oracle_ap(scored, G, t) for t in MAP_THRESHOLDS) / len(MAP_THRESHOLDS)
        assert abs(highlight_map(scored, G) - float(want)) < 1e-9


def test_map_examples():
    G = [(0, 4), (6, 9)]
    assert highlight_map([(g, 3) for g in G], G) == 1.0
    assert highlight_map([((20, 22), 4)], G) == 0.0
    rng = random.Random(2)
    P = [(rand_interval(rng), rng.random()) for _ in range(5)]
    G = [rand_interval(rng) for _ in range(3)]
    for t in MAP_THRESHOLDS:
        assert abs(average_precision(P, G, t) - float(oracle_ap(P, G, t))) < 1e-9


def test_hit_at_1_examples():
    golds = [((0, 4), 4), ((6, 9), 2)]
    assert hit_at_1([((0, 4), 3), ((6, 9), 1)], golds) == 1
    assert hit_at_1([((20, 25), 3)], golds) == 0
    assert hit_at_1([((6, 9), 3), ((0, 4), 1)], golds) == 0
    assert hit_at_1([], golds) == 0
    # ties on score go to the earlier start
    assert hit_at_1([((6, 9), 2), ((0, 4), 2)], golds) == 1


def test_caption_accuracy():
    g = EventSequence((Event(0, 4, 1, (20, 21)), Event(6, 9, 2, (22, 23))))
    assert caption_token_acc(g, g) == 1.0
    p = EventSequence((Event(0, 4, 1, (20, 99)),))
    assert caption_token_acc(p, g) == 0.25


def test_evaluate_oracle_and_empty():
    data = gen_split(SynthConfig(), 30)
    rep = evaluate(OracleModel(), data)
    assert rep.counts == {"MR": 10, "DVC": 10, "VHD": 10}
    assert all(v == 1.0 for row in rep.per_kind.values() for v in row.values())
    empty = evaluate(lambda s: EventSequence(()), data)
    assert empty.rate("MR", "r1_iou50") == 0.0 and empty.rate("DVC", "dvc_f1") == 0.0
    assert empty.rate("VHD", "map_avg") == 0.0
    with pytest.raises(ContractError):
        evaluate(OracleModel(), [])


def test_evaluate_order_invariant():
    data = gen_split(SynthConfig(), 24)
    rng = np.random.default_rng(3)

    def noisy(s):
        r = np.random.default_rng(s.seed)
        evs = tuple(Event(e.start_s, e.end_s + float(r.integers(0, 3)), e.saliency, e.caption) for e in s.gold)
        fixed = []
        for e in evs:
            if fixed and e.start_s < fixed[-1].end_s:
                continue
            fixed.append(e)
        return EventSequence(tuple(fixed))

    a = evaluate(noisy, data)
    b = evaluate(noisy, [data[i] for i in rng.permutation(len(data))])
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()


def test_report_formats():
    rep = evaluate(OracleModel(), gen_split(SynthConfig(), 3))
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("task_kind,count,r1_iou50")
    assert [l.split(",")[0] for l in lines[1:]] == ["DVC", "MR", "VHD"]
    assert isinstance(rep, EvalReport) and rep.to_json().endswith("\n")
