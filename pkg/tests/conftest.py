import numpy as np
import pytest

from src.config import RunConfig
from src.helpers.dataset import DatasetSpec, write_dataset
from src.verify import micro_model


TINY_SPEC = DatasetSpec(size=32, n_source=6, n_target=6, n_val=2)


def tiny_config(data_root, output_dir, **overrides):
    """A model small enough to train for a couple of steps on 32px images."""
    values = dict(
        image_size=32, crop_size=32,
        channels=(4, 8, 8, 8), heads=(1, 1, 2, 2), reductions=(4, 2, 1, 1),
        embed_dim=8, disc_channels=(4, 4, 1),
        tau=0.5, batch_size=1, warmup_iterations=2, iterations=2, warmup_steps=1,
        eval_every=0, log_every=1, data_root=str(data_root), output_dir=str(output_dir),
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def model():
    return micro_model(seed=3)


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp('plmu')
    write_dataset(TINY_SPEC, str(root))
    return str(root)
