import numpy as np
import pytest

from crckit.dictionary import build_dictionary


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dictionary(rng, d=8, n_per_class=(4, 4, 4), norm_mode="unit-l2"):
    labels = np.repeat(np.arange(len(n_per_class)), n_per_class)
    rng.shuffle(labels)
    X = rng.standard_normal((d, labels.size))
    return build_dictionary(X, labels, norm_mode=norm_mode)
