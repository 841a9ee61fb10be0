import os

# keep BLAS single-threaded: the suite runs many small solves where thread
# pools only add spin overhead, and parallel test workers would oversubscribe
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from kmirror import Dictionary, DualFunction, Kernel, MirrorMap


@pytest.fixture
def gauss():
    return Kernel("gaussian", bandwidth=0.0065)


@pytest.fixture
def wide_gauss():
    # bandwidth large enough that nearby atoms stay well conditioned
    return Kernel("gaussian", bandwidth=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def make_dual(kernel, atoms, weights, map_kind="kl", fixed=None):
    atoms = np.atleast_2d(np.asarray(atoms, dtype=np.float64))
    if fixed is None:
        fixed = np.zeros(len(atoms), dtype=bool)
    return DualFunction(
        Dictionary(atoms, np.asarray(fixed, dtype=bool)),
        np.asarray(weights, dtype=np.float64),
        MirrorMap(map_kind),
        kernel,
    )
