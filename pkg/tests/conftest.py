"""Shared fixtures: the shipped template, tiny recognizers and tiny datasets."""

import pathlib

import numpy as np
import pytest

from aroface import constraint, data
from aroface.geometry import GridShape
from aroface.harness.config import RunConfig, build_config
from aroface.recognizer import MarginConfig, ModelSpec, Recognizer, init_params

ROOT = pathlib.Path(__file__).resolve().parents[1]
TEMPLATE_PATH = ROOT / "benchmark" / "template_112.txt"


@pytest.fixture
def template_112() -> constraint.LandmarkTemplate:
    return constraint.load_template(TEMPLATE_PATH)


@pytest.fixture
def template_16(template_112) -> constraint.LandmarkTemplate:
    return template_112.rescaled(GridShape(16, 16))


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec(kind="conv", input_channels=1, height=16, width=16, conv_channels=[2, 3],
                     kernel_size=3, stride=2, embedding_dim=4, num_classes=3)


@pytest.fixture
def tiny_model(tiny_spec) -> Recognizer:
    return Recognizer(init_params(tiny_spec, seed=7), MarginConfig())


@pytest.fixture
def tiny_splits(template_16):
    spec = data.SyntheticSpec(n_classes=3, train_per_class=4, test_per_class=3, height=16, width=16, seed=3)
    return data.synthetic_splits(spec, template_16)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def tiny_config(tmp_path: pathlib.Path, **overrides) -> RunConfig:
    """A run small enough for unit tests: 3 classes at 16x16, one epoch."""
    flat = {
        "template": str(TEMPLATE_PATH),
        "output_dir": str(tmp_path / "run"),
        "epochs": 1,
        "batch_size": 4,
        "synthetic.n_classes": 3,
        "synthetic.train_per_class": 4,
        "synthetic.test_per_class": 3,
        "synthetic.height": 16,
        "synthetic.width": 16,
        "model.conv_channels": "2,3",
        "model.kernel_size": 3,
        "model.embedding_dim": 4,
        "eval.far_list": "0.1",
    }
    flat.update(overrides)
    return build_config(flat)
