import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from clusterdet.dataset import GenSpec, generate  # noqa: E402
from clusterdet.trainer import TrainConfig  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_spec():
    return GenSpec(image_size=64, glyphs_per_image=(1, 3), glyph_size=(14, 28), seed=3, font_size=32)


@pytest.fixture(scope="session")
def small_rubbing(small_spec):
    return generate(small_spec, "rubbing", 6)


@pytest.fixture(scope="session")
def small_font(small_spec):
    return generate(small_spec, "font", 8)


@pytest.fixture
def small_config():
    return TrainConfig(iterations=4, obc_count=4, n_neg_clusters=8, m_pos_clusters=2, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
