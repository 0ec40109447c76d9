import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pruned_net
from oracles import conv_naive
from patsparse.admm import Assignment
from patsparse.engine import (
    BENCH_FIELDS, bench, execute_dense, execute_sparse, relative_error, specialize_patterns,
)
from patsparse.nn import Conv2d, Linear, Network, ReLU, conv2d_forward
from patsparse.pack import pack, unpack
from patsparse.patterns import PatternLibrary


def _reference(net, packed, x):
    """float64 forward of the masked net; head-less models stop at the last conv block."""
    if packed.head_weights is not None:
        return net.forward(x)
    out = x
    for layer in net.layers[:-1]:
        if isinstance(layer, Conv2d):
            out = conv2d_forward(out, layer)
        elif isinstance(layer, ReLU):
            out = np.maximum(out, 0)
        else:
            B, C, H, W = out.shape
            k = layer.size
            out = out[:, :, : H // k * k, : W // k * k].reshape(B, C, H // k, k, W // k, k).max(axis=(3, 5))
    return out


def test_identity_kernel(rng):
    lib = PatternLibrary.from_bits([27])  # bits 0, 1, 3, 4: the centre is the last tap
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    net = Network([Conv2d(w, np.zeros(1)), Linear(np.zeros((1, 30)), np.zeros(1))], (1, 6, 5))
    packed = pack(net, lib, Assignment(lib, [np.zeros((1, 1), int)]))
    packed.head_weights = packed.head_bias = None
    x = rng.standard_normal((2, 1, 6, 5)).astype(np.float32)
    np.testing.assert_array_equal(execute_sparse(packed, x), x)


def test_zero_input_gives_bias(rng):
    net, lib, a, conn, packed = random_pruned_net(rng, widths=(6,), pool=False, head=False)
    out = execute_sparse(packed, np.zeros((1, 3, 12, 12), np.float32))
    expected = np.maximum(net.convs[0].bias, 0).astype(np.float32)
    np.testing.assert_array_equal(out[0], np.broadcast_to(expected[:, None, None], (6, 12, 12)))


def test_single_layer_matches_naive(rng):
    net, lib, a, conn, packed = random_pruned_net(rng, widths=(5,), pool=False, head=False)
    x = rng.standard_normal((2, 3, 12, 12))
    ref = np.maximum(conv_naive(x, net.convs[0].weights, net.convs[0].bias), 0)
    assert relative_error(execute_sparse(packed, x.astype(np.float32)), ref) <= 1e-5


@pytest.mark.parametrize("threads", [1, 2, 4])
def test_threads_bit_identical(rng, threads):
    *_, packed = random_pruned_net(rng, widths=(7, 9))
    x = rng.standard_normal((3, 3, 12, 12)).astype(np.float32)
    np.testing.assert_array_equal(execute_sparse(packed, x, threads=threads), execute_sparse(packed, x))


def test_bad_threads(rng):
    *_, packed = random_pruned_net(rng)
    with pytest.raises(ValueError, match="threads"):
        execute_sparse(packed, np.zeros((1, 3, 12, 12), np.float32), threads=0)


def test_input_shape_checked(rng):
    *_, packed = random_pruned_net(rng)
    with pytest.raises(ValueError, match="input shape"):
        execute_sparse(packed, np.zeros((1, 2, 12, 12), np.float32))


def test_mac_count(rng):
    net, lib, a, conn, packed = random_pruned_net(rng, pool=True)
    x = rng.standard_normal((2, 3, 12, 12)).astype(np.float32)
    _, macs = execute_sparse(packed, x, count_macs=True)
    sizes = [(12, 12), (6, 6)]
    expected = sum(4 * l.n_records * h * w * 2 for l, (h, w) in zip(packed.layers, sizes))
    assert macs == expected


def test_specialize_patterns():
    lib = PatternLibrary.from_bits([27, 432])
    t = specialize_patterns(lib, 10)
    assert len(t) == 2
    np.testing.assert_array_equal(t.offsets[0], [[0, 0], [0, 1], [1, 0], [1, 1]])
    np.testing.assert_array_equal(t.flat[0], [0, 1, 10, 11])
    np.testing.assert_array_equal(t.offsets[1], [[1, 1], [1, 2], [2, 1], [2, 2]])
    np.testing.assert_array_equal(t.flat[1], [11, 12, 21, 22])


def test_relative_error():
    assert relative_error([1, 2], [1, 2]) == 0.0
    assert relative_error([1, 3], [1, 2]) == pytest.approx(0.5)
    assert relative_error([0.0], [0.0]) == 0.0
    assert relative_error([1.0], [0.0]) == float("inf")


def test_dense_path_matches_reference(rng):
    net, lib, a, conn, packed = random_pruned_net(rng)
    x = rng.standard_normal((2, 3, 12, 12))
    assert relative_error(execute_dense(unpack(packed), x.astype(np.float32)), net.forward(x)) <= 1e-5


@settings(max_examples=100)
@given(seed=st.integers(0, 10**6), K=st.integers(1, 16), pool=st.booleans(), head=st.booleans(),
       keep=st.sampled_from([1.0, 0.6, 0.3]))
def test_sparse_equals_float64_reference(seed, K, pool, head, keep):
    r = np.random.default_rng(seed)
    net, lib, a, conn, packed = random_pruned_net(r, K=K, pool=pool, head=head, keep=keep)
    x = r.standard_normal((2, 3, 12, 12))
    out = execute_sparse(packed, x.astype(np.float32))
    assert relative_error(out, _reference(net, packed, x)) <= 1e-5


def test_bench_single_iteration(rng):
    *_, packed = random_pruned_net(rng)
    x = rng.standard_normal((1, 3, 12, 12)).astype(np.float32)
    report = bench(packed, x, iters=1, threads=(1, 2), config="tiny")
    assert [(r.path, r.threads) for r in report.rows] == [("dense", 1), ("sparse", 1), ("dense", 2), ("sparse", 2)]
    assert report.row("dense", 1).checksum == pytest.approx(report.row("sparse", 1).checksum, rel=1e-4)
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert tuple(rows[0]) == BENCH_FIELDS
    assert len(rows) == 5
    assert "speedup" in report.table()
    with pytest.raises(ValueError):
        bench(packed, x, iters=0)
    with pytest.raises(KeyError):
        report.row("dense", 8)
