"""The numba kernels and their numpy fallbacks must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_pruned_net
from patsparse import kernels as K
from patsparse.engine import _plan, specialize_patterns


@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_col2im(rng, stride):
    xp = rng.standard_normal((2, 3, 9, 8))
    ho, wo = (9 - 3) // stride + 1, (8 - 3) // stride + 1
    a, b = K.im2col_nb(xp, stride, ho, wo), K.im2col_np(xp, stride, ho, wo)
    np.testing.assert_array_equal(a, b)
    cols = rng.standard_normal(a.shape)
    np.testing.assert_allclose(K.col2im_nb(cols, 9, 8, stride, ho, wo),
                               K.col2im_np(cols, 9, 8, stride, ho, wo), atol=1e-12)


def test_col2im_is_adjoint(rng):
    xp = rng.standard_normal((1, 2, 7, 7))
    cols = K.im2col_np(xp, 1, 5, 5)
    g = rng.standard_normal(cols.shape)
    lhs = float(np.sum(cols * g))
    rhs = float(np.sum(xp * K.col2im_np(g, 7, 7, 1, 5, 5)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_dense_conv(rng, stride):
    xp = rng.standard_normal((2, 4, 10, 10)).astype(np.float32)
    w = rng.standard_normal((5, 4, 3, 3)).astype(np.float32)
    b = rng.standard_normal(5).astype(np.float32)
    ho = wo = (10 - 3) // stride + 1
    fs = np.array([4, 0, 2], dtype=np.int64)
    outs = []
    for fn in (K.dense_conv_nb, K.dense_conv_np):
        out = np.zeros((2, 5, ho, wo), np.float32)
        fn(xp, w, b, stride, ho, wo, fs, out)
        outs.append(out)
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-5, atol=1e-5)
    assert not outs[0][:, [1, 3]].any()  # untouched filters


@pytest.mark.parametrize("stride", [1, 2])
def test_pattern_conv_and_macs(rng, stride):
    *_, packed = random_pruned_net(rng, widths=(6,), pool=False)
    layer = packed.layers[0]
    p = _plan(layer)
    xp = rng.standard_normal((2, 3, 14, 14)).astype(np.float32)
    ho = wo = (14 - 3) // stride + 1
    table = specialize_patterns(layer.library, 14)
    fs = np.arange(layer.F, dtype=np.int64)
    outs, ctrs = [], []
    for fn in (K.pattern_conv_nb, K.pattern_conv_np):
        out = np.zeros((2, layer.F, ho, wo), np.float32)
        ctr = np.zeros(1, np.int64)
        fn(xp, p.group_ptr, p.group_pat, p.filter_group_ptr, p.chan, p.weights, table.offsets, p.bias,
           stride, ho, wo, fs, out, ctr)
        outs.append(out)
        ctrs.append(int(ctr[0]))
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-5, atol=1e-5)
    assert ctrs[0] == ctrs[1] == 4 * layer.n_records * ho * wo * 2


def test_simplex_rows(rng):
    d = rng.standard_normal((64, 126)) * 5
    a, na = K.simplex_project_rows_nb(d)
    b, nb = K.simplex_project_rows_np(d)
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(na, nb, atol=1e-12)


def _backend_in_subprocess(value):
    env = dict(os.environ)
    if value is None:
        env.pop("PATSPARSE_BACKEND", None)
    else:
        env["PATSPARSE_BACKEND"] = value
    return subprocess.run([sys.executable, "-c", "import patsparse; print(patsparse.BACKEND)"],
                          env=env, capture_output=True, text=True)


@pytest.mark.parametrize("value,expected", [(None, "numba"), ("numba", "numba"), ("numpy", "numpy"),
                                            ("NumPy", "numpy")])
def test_backend_flag(value, expected):
    res = _backend_in_subprocess(value)
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip() == expected


def test_backend_flag_rejects_unknown():
    res = _backend_in_subprocess("cuda")
    assert res.returncode != 0
    assert "PATSPARSE_BACKEND" in res.stderr


def test_numpy_backend_end_to_end(tmp_path):
    code = (
        "import numpy as np, sys; sys.path.insert(0, %r)\n"
        "from conftest import random_pruned_net\n"
        "from patsparse.engine import execute_sparse, relative_error\n"
        "r = np.random.default_rng(3)\n"
        "net, *_, packed = random_pruned_net(r)\n"
        "x = r.standard_normal((2, 3, 12, 12))\n"
        "print(relative_error(execute_sparse(packed, x.astype(np.float32)), net.forward(x)))\n"
    ) % os.path.dirname(__file__)
    env = dict(os.environ, PATSPARSE_BACKEND="numpy")
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert float(res.stdout) <= 1e-5
