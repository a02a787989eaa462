import numpy as np
import pytest

from coronagan.phantom import Domain, PhantomDistribution, generate_dataset
from coronagan.training import TrainingConfig


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small 32x32 phantom dataset shared by loader/training/cli tests."""
    out = tmp_path_factory.mktemp("phantoms32")
    dist = PhantomDistribution(height=32, width=32)
    manifest = generate_dataset(6, 6, dist, str(out), seed=11)
    return manifest


def tiny_training_config(out_dir, **overrides) -> TrainingConfig:
    base = dict(
        epochs=2,
        out_dir=str(out_dir),
        batch_size=2,
        patch_size=32,
        base_width=4,
        n_resblocks=1,
        n_down=2,
        disc_base_width=4,
        disc_n_layers=1,
        checkpoint_every=1,
        seed=3,
    )
    base.update(overrides)
    return TrainingConfig(**base)
