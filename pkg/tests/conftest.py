import sys
from pathlib import Path

import numpy as np
import pytest

from lrattack.net import (
    AvgPool2d,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    Network,
    ReLU,
    ResidualAdd,
)
from lrattack.oracle import DenseSystem

ASSETS = Path(__file__).parent / "assets"


def mlp(sizes, seed=0, dtype=np.float64, slope=0.0, bias_scale=0.5):
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i:
            layers.append(ReLU(slope))
        layers.append(Dense(rng.normal(size=(b, a)) / np.sqrt(a), rng.normal(size=b) * bias_scale))
    return Network(layers, (sizes[0],), dtype)


def tiny_2d(seed=0, dtype=np.float64):
    """2 inputs, 6+6 ReLUs, 3 classes; first-layer hyperplanes cross the unit square."""
    rng = np.random.default_rng(seed)
    w1 = rng.normal(size=(6, 2)) * 3
    b1 = -(w1 @ rng.uniform(0.2, 0.8, size=(2, 6))).diagonal()
    layers = [Dense(w1, b1), ReLU(), Dense(rng.normal(size=(6, 6)), rng.normal(size=6) * 0.5), ReLU(),
              Dense(rng.normal(size=(3, 6)), rng.normal(size=3) * 0.5)]
    return Network(layers, (2,), dtype)


def tiny_cnn(seed=0, dtype=np.float64, slope=0.0):
    """conv/BN/ReLU/avgpool/conv/residual/maxpool/dense on a 1x6x6 input (162 pattern units)."""
    rng = np.random.default_rng(seed)

    def conv(o, i):
        return Conv2d(rng.normal(size=(o, i, 3, 3)) / 3.0, rng.normal(size=o) * 0.1, 1, 1)

    def bn(c):
        return BatchNorm(rng.normal(size=c) * 0.1, rng.uniform(0.5, 2.0, c),
                         rng.uniform(0.5, 1.5, c), rng.normal(size=c) * 0.1)

    layers = [
        conv(2, 1),            # out 1: (2,6,6)
        bn(2),                 # 2
        ReLU(slope),           # 3: 72 units
        AvgPool2d(2),          # 4: (2,3,3)
        conv(3, 2),            # 5: (3,3,3)
        ReLU(),                # 6: 27 units
        conv(3, 3),            # 7
        ResidualAdd(6),        # 8
        ReLU(),                # 9: 27 units
        MaxPool2d(2, 1),       # 10: (3,2,2), 12 pools of 4
        Flatten(),
        Dense(rng.normal(size=(3, 12)) / 3.0, rng.normal(size=3) * 0.1),
    ]
    return Network(layers, (1, 6, 6), dtype)


def random_qp(rng, d=None, m=None):
    """Random feasible instance ``A z <= b`` in the unit box, ``x`` usually outside."""
    d = d or int(rng.integers(2, 21))
    m = m or int(rng.integers(1, 41))
    A = rng.normal(size=(m, d))
    z0 = rng.uniform(0.2, 0.8, size=d)
    b = A @ z0 + rng.uniform(0.0, 0.5, size=m)
    x = rng.uniform(0, 1, size=d)
    return DenseSystem(A, b), x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS, key=str):
        terminalreporter.write_line(mod.RESULTS[key])
