import json
from pathlib import Path

import pytest

from goldood.data import DatasetBundle, OodRecipe, apply_recipe, make_sbm_toy
from goldood.pipeline import TrainConfig

ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = ROOT / "configs" / "sbm_toy.json"


def toy_bundle(seed=0):
    """The committed desk-scale fixture: 500-node 2-class SBM plus feature-interpolation OOD."""
    g = make_sbm_toy(250, 0.05, 0.005, 16, 2, seed=seed)
    return apply_recipe(DatasetBundle(g), OodRecipe("feature", seed=seed + 100))


def toy_config(**overrides):
    flat = json.loads(TOY_CONFIG.read_text())
    return TrainConfig.from_flat(flat, TrainConfig(**overrides)) if overrides else TrainConfig.from_flat(flat)


@pytest.fixture(scope="session")
def sbm_bundle():
    return toy_bundle(0)
