"""Shared test fixtures; the heavyweight ones are session-scoped."""

import json

import pytest


@pytest.fixture
def tiny_config(tmp_path):
    """A config that trains in about a second, for CLI plumbing tests."""
    cfg = {
        "train_images": 6,
        "val_images": 2,
        "train": {"epochs": 3, "step_epochs": [1, 2]},
        "model": {"fpn_dim": 16},
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)
