import os

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def tiny_config(**over):
    """A run config small enough for unit tests (d=16, one block, 8 frames)."""
    from expertflow.config import from_dict

    raw = {
        "model": {"d": 16, "blocks": 1, "attn_heads": 2, "expert_hidden": 16, "K_init": 4, "text_vocab": 32,
                  "max_frames": 8, "max_targets": 48},
        "data": {"dim": 16, "frames": 8, "text_vocab": 32, "n_classes": 4, "saliency_table": [1, 4, 2, 0],
                 "min_len": 1.0, "max_len": 3.0},
        "lifecycle": {"K_min": 2, "K_max": 8, "warmup": 10, "window": 10},
        "steps": {"s1": 10, "s2": 10, "s3": 10},
        "train": {"batch_size": 4, "n_train": 12, "n_val": 6},
    }
    for key, value in over.items():
        section, name = key.split("__")
        raw.setdefault(section, {})[name] = value
    return from_dict(raw)
