import json
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from expertflow.event_codec import decode_events, encode_events
from expertflow.exceptions import ConfigError, GenerationError
from expertflow.synthdata import (
    TASK_KINDS, SynthConfig, dump_dataset, gen_sample, gen_split, load_dataset, make_splits, prototype,
    sample_digest,
)


def test_zero_noise_frames_are_prototypes():
    cfg = SynthConfig(noise=0.0)
    for seed in range(10):
        s = gen_sample(cfg, "DVC", seed)
        for ev, c in zip(s.gold, s.classes):
            for i in range(int(np.ceil(ev.start_s)), int(np.floor(ev.end_s))):
                assert np.array_equal(s.frames[i], prototype(c, cfg.dim))


def test_determinism():
    cfg = SynthConfig()
    for kind in TASK_KINDS:
        assert gen_sample(cfg, kind, 7) == gen_sample(cfg, kind, 7)
    assert gen_sample(cfg, "MR", 7) != gen_sample(cfg, "MR", 8)


def test_digest_golden():
    with open(os.path.join(FIXTURES, "synth_digests.json")) as fh:
        golden = json.load(fh)
    cfg = SynthConfig()
    for key, digest in golden.items():
        kind, seed = key.split(":")
        assert sample_digest(gen_sample(cfg, kind, int(seed))) == digest, key


def test_split_round_robin_and_disjoint():
    cfg = SynthConfig()
    assert [s.task_kind for s in gen_split(cfg, 3)] == ["MR", "DVC", "VHD"]
    counts = Counter(s.task_kind for s in gen_split(cfg, 300))
    assert counts == {"MR": 100, "DVC": 100, "VHD": 100}
    train, val = make_splits(cfg, 30, 20)
    assert not {s.seed for s in train} & {s.seed for s in val}
    with pytest.raises(ConfigError):
        gen_split(cfg, 0)


@given(st.integers(0, 10**6), st.sampled_from(TASK_KINDS))
def test_gold_satisfies_codec_invariants(seed, kind):
    cfg = SynthConfig()
    s = gen_sample(cfg, kind, seed)
    evs = s.gold.events
    assert evs and all(0 <= e.start_s < e.end_s <= cfg.frames for e in evs)
    assert all(a.end_s <= b.start_s for a, b in zip(evs, evs[1:]))
    assert all((e.start_s * 2) % 1 == 0 and (e.end_s * 2) % 1 == 0 for e in evs)
    assert decode_events(encode_events(s.gold)) == s.gold
    if kind == "MR":
        c = [cls for cls in s.classes if cfg.caption(cls) == evs[0].caption]
        assert len(evs) == 1 and s.query[1] == cfg.class_token(c[0])
    else:
        assert [e.caption for e in evs] == [cfg.caption(c) for c in s.classes]
        assert [e.saliency for e in evs] == [cfg.saliency_table[c] for c in s.classes]


def test_templates_are_collision_free():
    cfg = SynthConfig()
    toks = [t for c in range(cfg.n_classes) for t in cfg.caption(c)]
    toks += [cfg.class_token(c) for c in range(cfg.n_classes)] + [cfg.marker(k) for k in TASK_KINDS]
    assert len(toks) == len(set(toks))


def test_class_separability():
    # Per frame, unit prototypes under sigma=0.3 noise in 64 dims sit about
    # 2.4 noise sd apart, so single-frame accuracy is near 95%. Averaging the
    # interior frames of an event separates the classes almost surely.
    cfg = SynthConfig()
    protos = np.stack([prototype(c, cfg.dim) for c in range(cfg.n_classes)])
    frame_right = frame_total = ev_right = ev_total = 0
    for seed in range(200):
        s = gen_sample(cfg, "DVC", seed)
        for ev, c in zip(s.gold, s.classes):
            rows = s.frames[int(np.ceil(ev.start_s)):int(np.floor(ev.end_s))]
            frame_right += int(np.sum(np.argmax(rows @ protos.T, axis=1) == c))
            frame_total += len(rows)
            ev_right += int(np.argmax(protos @ rows.mean(axis=0)) == c)
            ev_total += 1
    assert ev_total > 300 and ev_right / ev_total >= 0.99
    assert 0.93 <= frame_right / frame_total <= 0.98


def test_dump_round_trip(tmp_path):
    data = gen_split(SynthConfig(), 6)
    path = tmp_path / "d.jsonl"
    dump_dataset(data, path)
    assert load_dataset(path) == data


def test_config_errors():
    with pytest.raises(ConfigError):
        SynthConfig(n_classes=30, text_vocab=64)
    with pytest.raises(ConfigError):
        SynthConfig(saliency_table=(5, 0, 0, 0, 0, 0))
    with pytest.raises(GenerationError):
        gen_sample(SynthConfig(frames=4, min_events=3, max_events=3), "DVC", 0)
