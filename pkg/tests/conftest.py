import numpy as np
import pytest

from qbsdej.lattice import LatticeModel, MarkSpace, TimeGrid


def make_model(T=1.0, N=3, d=1, marks=((1.0, 0.5),), layout="tree"):
    ms = MarkSpace([x for x, _ in marks], [lam for _, lam in marks])
    return LatticeModel(TimeGrid(T, N), ms, d=d, layout=layout)


@pytest.fixture
def model():
    return make_model()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
