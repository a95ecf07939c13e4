import numpy as np
import pytest

from limfuse import build_anchor_basis


@pytest.fixture(scope="session")
def enc():
    """Default rank-20 basis shared across tests (immutable)."""
    return build_anchor_basis(seed=1)


@pytest.fixture(scope="session")
def enc_full():
    """Full-rank (256) basis for exactness checks."""
    return build_anchor_basis(seed=1, rank=256)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
