import numpy as np
import pytest

from poseaug.data import generate_synthetic, split_by_identity


@pytest.fixture(scope="session")
def tiny_dataset():
    """4 identities x 2 emotions x 2 poses, 64-dim, 16px images."""
    return generate_synthetic(n_identities=4, n_emotions=2, n_poses=2,
                              embedding_dim=64, noise_sigma=0.05, seed=7,
                              image_size=16)


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    return split_by_identity(tiny_dataset, (2, 1, 1), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
