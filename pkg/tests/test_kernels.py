import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_dataset
from aftgof import _pykernels, kernels
from aftgof.estimate import _event_weights, log_residuals, pair_inverse_scale

ckernels = pytest.importorskip("aftgof._ckernels")


@pytest.mark.parametrize("seed", range(10))
def test_compiled_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, 300 + seed, 1 + seed % 4, ties=seed % 2 == 0)
    beta = rng.normal(size=d.p)
    w = _event_weights(d, rng.exponential(size=d.n))
    args = (log_residuals(d, beta), d.covariates, pair_inverse_scale(d), w)
    s_c, j_c = ckernels.smoothed_score_jac(*args, True)
    s_p, j_p = _pykernels.smoothed_score_jac(*args, True)
    np.testing.assert_allclose(s_c, s_p, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(j_c, j_p, rtol=1e-10, atol=1e-12)


def test_backend_switch():
    assert kernels.BACKEND == "cython"
    env = dict(os.environ, AFTGOF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from aftgof import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
