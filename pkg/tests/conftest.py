import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gamakit import nn
from gamakit.data import LabeledBatch


def random_network(rng, dtype="float64"):
    """A random network with at most three parametric layers, dense or convolutional."""
    seed = int(rng.integers(1 << 31))
    n_classes = int(rng.integers(2, 5))
    if rng.random() < 0.3:
        c, h = int(rng.integers(1, 3)), int(rng.choice([5, 6]))
        layers = [nn.Conv2d(c, 2, 2), nn.ReLU()]
        s = (2, h - 1, h - 1)
        if rng.random() < 0.5:
            layers.append(nn.MaxPool2x2())
            s = (2, s[1] // 2, s[2] // 2)
        layers += [nn.Flatten(), nn.Affine(int(np.prod(s)), n_classes)]
        return nn.Network(layers, (c, h, h), n_classes, dtype=dtype, seed=seed)
    d = int(rng.integers(2, 7))
    hidden = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(0, 3)))]
    net = nn.mlp((d,), hidden, n_classes, dtype=dtype, seed=seed)
    # nonzero biases so ReLUs are not all aligned at the origin
    for layer in net.layers:
        if layer.kind == "affine":
            layer.params["b"] = rng.normal(0, 0.3, layer.params["b"].shape)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    return nn.mlp((4,), (5,), 3, dtype="float64", seed=3)


@pytest.fixture
def tiny_batch():
    r = np.random.default_rng(5)
    return LabeledBatch(r.uniform(0.1, 0.9, (12, 4)), r.integers(0, 3, 12))
