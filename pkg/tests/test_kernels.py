from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from conadv import _kernels_py, kernels

try:
    from conadv import _kernels
except ImportError:  # extension not built
    _kernels = None


def _cases(rng):
    x = rng.standard_normal((3, 6, 6, 4))
    cols = rng.standard_normal((3, 6, 6, 3, 3, 4))
    pool_in = rng.standard_normal((3, 6, 6, 4))
    out, arg = _kernels_py.maxpool2_forward(pool_in)
    bn_x = rng.standard_normal((20, 5))
    gamma, beta = rng.standard_normal(5), rng.standard_normal(5)
    _, xhat, _, _, invstd = _kernels_py.batchnorm_train_forward(bn_x, gamma, beta, 1e-5)
    return [
        ("im2col", (x, 3, 3, 1)),
        ("im2col", (x, 3, 3, 0)),
        ("col2im", (cols, 6, 6, 1)),
        ("maxpool2_forward", (pool_in,)),
        ("maxpool2_backward", (rng.standard_normal(out.shape), arg, 6, 6)),
        ("batchnorm_train_forward", (bn_x, gamma, beta, 1e-5)),
        ("batchnorm_eval_forward", (bn_x, gamma, beta, rng.standard_normal(5), rng.random(5) + 0.5, 1e-5)),
        ("batchnorm_backward", (rng.standard_normal(bn_x.shape), xhat, gamma, invstd, True)),
        ("batchnorm_backward", (rng.standard_normal(bn_x.shape), xhat, gamma, invstd, False)),
    ]


def _flat(v):
    return v if isinstance(v, tuple) else (v,)


@pytest.mark.skipif(_kernels is None, reason="compiled extension not built")
@pytest.mark.parametrize("seed", range(3))
def test_backends_bitwise_equal(seed):
    for name, args in _cases(np.random.default_rng(seed)):
        a, b = _flat(getattr(_kernels_py, name)(*args)), _flat(getattr(_kernels, name)(*args))
        assert len(a) == len(b)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(np.asarray(x), np.asarray(y), err_msg=name)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 5, 3))
    cols = _kernels_py.im2col(x, 3, 3, 1)
    c = rng.standard_normal(cols.shape)
    lhs = float(np.sum(cols * c))
    rhs = float(np.sum(x * _kernels_py.col2im(c, 5, 5, 1)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backend_selection():
    assert kernels.BACKEND == ("cython" if _kernels is not None else "python")
    env = dict(os.environ, CONADV_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from conadv import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
