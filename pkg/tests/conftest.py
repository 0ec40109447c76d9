import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from patsparse.admm import Assignment  # noqa: E402
from patsparse.connectivity import combined_masks, connectivity_prune  # noqa: E402
from patsparse.nn import Conv2d, Linear, MaxPool2d, Network, ReLU, apply_hard_masks  # noqa: E402
from patsparse.pack import pack  # noqa: E402
from patsparse.patterns import PatternLibrary, derived_library, enumerate_candidate_masks  # noqa: E402


def random_library(rng, K):
    bits = enumerate_candidate_masks().bits
    return PatternLibrary.from_bits(sorted(rng.choice(bits, size=K, replace=False).tolist()))


def random_pruned_net(rng, input_shape=(3, 12, 12), widths=(6, 8), K=8, keep=0.6, pool=True,
                      head=True, classes=5, library=None):
    """Random pattern-pruned (and optionally connectivity-pruned) conv net."""
    lib = library or random_library(rng, K)
    c, h, w = input_shape
    layers = []
    for i, f in enumerate(widths):
        layers += [Conv2d(rng.standard_normal((f, c, 3, 3)), rng.standard_normal(f) * 0.1), ReLU()]
        c = f
        if pool and i < len(widths) - 1 and h >= 4:
            layers.append(MaxPool2d(2))
            h, w = h // 2, w // 2
    layers.append(Linear(rng.standard_normal((classes, c * h * w)) * 0.1, rng.standard_normal(classes)))
    net = Network(layers, input_shape)
    assignment = Assignment(lib, [rng.integers(0, lib.K, (l.F, l.C)) for l in net.convs])
    apply_hard_masks(net, assignment.masks())
    ratios = [max(keep, max(l.F, l.C) / (l.F * l.C)) for l in net.convs]
    conn = connectivity_prune(net, ratios)
    apply_hard_masks(net, combined_masks(net, assignment.masks(), conn))
    packed = pack(net, lib, assignment, conn)
    if not head:
        packed.head_weights = packed.head_bias = None
    return net, lib, assignment, conn, packed


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def derived():
    return derived_library()


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
