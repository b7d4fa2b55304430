"""
Shared pytest configuration.

Slow tests (marked @pytest.mark.slow) run real multi-round training and are
skipped unless SELFFED_RUN_SLOW=1 is set in the environment.

To run them:
    SELFFED_RUN_SLOW=1 pytest tests/ -v -m slow
"""

import os

import numpy as np
import pytest

from selffed.config import ArchConfig, config_from_dict


def _run_slow() -> bool:
    return os.getenv("SELFFED_RUN_SLOW", "") == "1"


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless explicitly requested."""
    skip_slow = pytest.mark.skip(reason="Slow training test. Set SELFFED_RUN_SLOW=1.")
    if _run_slow():
        return
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_arch_dict():
    return {
        "image_size": 8,
        "patch_size": 2,
        "channels": 1,
        "embed_dim": 8,
        "depths": [1, 1],
        "num_heads": [2, 2],
        "window_size": 2,
        "proj_hidden_dim": 16,
        "proj_dim": 8,
        "classifier_hidden_dim": 8,
    }


def tiny_config_dict(output_dir, **overrides):
    """A complete two-round-per-phase experiment on 8x8 grayscale shapes."""
    data = {
        "seed": 7,
        "label_fraction": 0.5,
        "probe_steps": 20,
        "workers": 2,
        "output_dir": str(output_dir),
        "arch": tiny_arch_dict(),
        "federation": {
            "num_clients": 3,
            "clients_per_round": 2,
            "rounds_pretrain": 2,
            "rounds_finetune": 2,
            "batch_size": 16,
            "checkpoint_every": 1,
        },
        "optim": {"warmup_rounds": 0},
        "contrastive": {"queue_size": 16, "batch_size": 8},
        "dataset": {"num_classes": 2, "per_class": 40, "noise": 0.05},
        "partition": {"delta": 1.0, "min_samples": 4},
    }
    for dotted, value in overrides.items():
        node = data
        keys = dotted.split("__")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    return data


@pytest.fixture
def tiny_arch():
    return ArchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in tiny_arch_dict().items()})


@pytest.fixture
def tiny_config(tmp_path):
    return config_from_dict(tiny_config_dict(tmp_path / "run"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_config(tmp_path):
    """Factory: make_config("name", federation__beta=1.0) -> validated tiny config."""
    def factory(name="run", **overrides):
        return config_from_dict(tiny_config_dict(tmp_path / name, **overrides))
    return factory
