import numpy as np
import pytest

from gliomaseg.tensor import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double():
    """Run the test body in double precision."""
    with precision("double"):
        yield


def away_from_zero(rng, shape, margin=1e-3):
    """Uniform values in [-1, 1] with |x| >= margin (keeps relu kinks out of reach)."""
    x = rng.uniform(-1, 1, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def distinct_windows(rng, shape):
    """Values whose 2x2 pooling windows have a unique max by a wide margin."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n) * 2 - 1
