import numpy as np
import pytest

from castream.backbone import StagedBackbone, default_stage_specs
from castream.dataset import generate_dataset
from castream.model import CAClassifier
from castream.stream import CAStream, StreamConfig

TINY_WIDTHS = (3, 4, 6)
TINY_INPUT = (3, 12, 12)


def tiny_backbone(seed=0, dtype=np.float64, num_classes=4):
    specs = default_stage_specs(TINY_WIDTHS, 3, blocks=1)
    return StagedBackbone(specs, num_classes, TINY_INPUT, seed=seed, dtype=dtype)


def tiny_stream(backbone, **kw):
    return CAStream(backbone.dims, backbone.num_classes, StreamConfig(**kw), dtype=backbone.dtype)


@pytest.fixture
def backbone64():
    return tiny_backbone()


@pytest.fixture
def images64():
    return np.random.default_rng(11).uniform(0, 1, (5,) + TINY_INPUT)


@pytest.fixture
def ca_model():
    bb = tiny_backbone(seed=2)
    return CAClassifier(bb, tiny_stream(bb, seed=3))


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(24, seed=5)
