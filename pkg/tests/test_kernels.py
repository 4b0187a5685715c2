import os
import subprocess
import sys

import numpy as np
import pytest

from loocite import kernels
from loocite._ext import pure

compiled = pytest.importorskip("loocite._ext._kernels")


def test_selected_backend():
    expected = "python" if os.environ.get("LOOCITE_PURE") == "1" else "cython"
    assert kernels.BACKEND == expected


def test_pure_override():
    out = subprocess.run([sys.executable, "-c", "from loocite import kernels; print(kernels.BACKEND)"],
                         env={**os.environ, "LOOCITE_PURE": "1"}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("seed", range(10))
def test_lasso_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 60)), int(rng.integers(1, 10))
    X = rng.normal(size=(n, d))
    X[:, 0] = 0.0 if seed % 3 == 0 else X[:, 0]
    y = rng.normal(size=n)
    X, y = X - X.mean(0), y - y.mean()
    lam = float(rng.uniform(0, 0.5))
    w1, s1, h1 = pure.cd_lasso(X, y, lam)
    w2, s2, h2 = compiled.cd_lasso(X, y, lam)
    assert s1 == s2
    assert np.allclose(w1, w2, atol=1e-10)
    assert np.allclose(h1, h2, rtol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_grubbs_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=int(rng.integers(0, 50)))
    if seed % 4 == 0 and len(x):
        x[: len(x) // 2] = 1.5
    for k in (0, 1, 5, 50):
        a, b = pure.grubbs_sequence(x, k), compiled.grubbs_sequence(x, k)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[2], b[2])
        assert np.allclose(a[1], b[1], rtol=1e-12)
