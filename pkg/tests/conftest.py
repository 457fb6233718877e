import numpy as np
import pytest
import torch
from hypothesis import settings

from jasrnet import synthetic
from jasrnet.model import ModelConfig

settings.register_profile("ci", deadline=None, max_examples=40)
settings.load_profile("ci")

torch.set_num_threads(1)

# miniature network: every code path, small enough for 64-bit finite differences
MINI = ModelConfig(channels=4, extraction_blocks=2, alignment_stages=2, num_landmarks=3,
                   input_size=16, heatmap_size=2)
# desk-scale network for the 128x128 pipeline
TINY = ModelConfig(channels=8, extraction_blocks=1, alignment_stages=2)


@pytest.fixture(scope="session")
def faces():
    """Six synthetic 68-point samples at 128x128."""
    return synthetic.make_dataset(6, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mini_batch(seed, n=2, k=3, size=16):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, size, size, generator=g, dtype=torch.float64)
    hr = torch.rand(n, 3, size, size, generator=g, dtype=torch.float64)
    hm = torch.rand(n, k, size // 8, size // 8, generator=g, dtype=torch.float64)
    return x, hr, hm
