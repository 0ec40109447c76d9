"""Acceptance checks, one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py) and also to
stdout, so ``pytest -s`` shows them inline.
"""
import copy
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_pruned_net
from oracles import central_diff, rel_err, simplex_bisect_batch
from patsparse.admm import Assignment, ExtractionSchedule, extract_pattern_library, simplex_project_rows, top_share
from patsparse.cli import main, synthetic_packed
from patsparse.connectivity import connectivity_prune, overall_compression, prune_and_retrain
from patsparse.data import synthetic_blobs
from patsparse.engine import bench, execute_dense, execute_sparse, relative_error
from patsparse.nn import (
    Conv2d, Linear, Network, ReLU, conv2d_backward, conv2d_forward, evaluate, masked_effective_kernel,
    masked_effective_kernel_grad, toy_network, train_epoch,
)
from patsparse.pack import psp_bytes, psp_from_bytes, unpack
from patsparse.patterns import (
    derived_library, elog_filter, elog_pattern_set, enumerate_candidate_masks, gaussian_filter_3x3,
    gaussian_pattern_set, log_filter_approx, mask_mean, mask_sum,
)

PRETRAIN_EPOCHS = 60
PRETRAIN_WD = 5e-2
LR = 0.02
SEED = 42


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def test_criterion_1_pattern_identities():
    t0 = time.perf_counter()
    p = Fraction(3, 4)
    checks = {
        "gaussian": np.array_equal(gaussian_filter_3x3(), [[1, 2, 1], [2, 4, 2], [1, 2, 1]]),
        "log_first": np.array_equal(log_filter_approx("first"), [[1, -2, 1], [-2, 4, -2], [1, -2, 1]]),
        "log_second": np.array_equal(log_filter_approx("second"), [[0, 1, 0], [1, -4, 1], [0, 1, 0]]),
        "elog": np.array_equal(elog_filter(), [[0, 1, 0], [1, 8, 1], [0, 1, 0]]),
        "candidates_126": enumerate_candidate_masks().K == 126,
        "gaussian_sum": np.array_equal(mask_sum(gaussian_pattern_set()), gaussian_filter_3x3()),
        "elog_mean": mask_mean(elog_pattern_set()).tolist() == [[0, p, 0], [p, 1, p], [0, p, 0]],
        "derived_K8": derived_library().K == 8,
    }
    dt = time.perf_counter() - t0
    bad = [k for k, v in checks.items() if not v]
    record(1, not bad and dt < 1.0, f"{len(checks) - len(bad)}/{len(checks)} identities exact "
                                    f"in {dt:.3f}s" + (f"; failed: {bad}" if bad else ""))


def test_criterion_2_simplex_projection():
    rng = np.random.default_rng(2)
    sizes = rng.integers(2, 127, 10_000)
    t0 = time.perf_counter()
    worst_oracle = worst_sum = 0.0
    min_u = np.inf
    for K in np.unique(sizes):
        D = rng.standard_normal(((sizes == K).sum(), K)) * rng.uniform(0.1, 10)
        U = simplex_project_rows(D)
        worst_oracle = max(worst_oracle, float(np.max(np.abs(U - simplex_bisect_batch(D)))))
        worst_sum = max(worst_sum, float(np.max(np.abs(U.sum(axis=1) - 1))))
        min_u = min(min_u, float(U.min()))
    dt = time.perf_counter() - t0
    ok = worst_oracle <= 1e-9 and worst_sum <= 1e-9 and min_u >= 0 and dt < 10
    record(2, ok, f"10000 vectors: max |u - oracle| {worst_oracle:.1e}, max |sum - 1| {worst_sum:.1e}, "
                  f"min u {min_u:.1e}, {dt:.2f}s")


def test_criterion_3_gradients():
    lib = derived_library()
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
        x = r.standard_normal((2, int(r.integers(1, 4)), int(r.integers(4, 8)), int(r.integers(4, 8))))
        F = int(r.integers(1, 4))
        layer = Conv2d(r.standard_normal((F, x.shape[1], 3, 3)), r.standard_normal(F), stride, pad)
        probe = r.standard_normal(conv2d_forward(x, layer).shape)
        loss = lambda: float(np.sum(conv2d_forward(x, layer) * probe))
        dx, dw, db = conv2d_backward(x, layer, probe)
        worst = max(worst, rel_err(dx, central_diff(loss, x)), rel_err(dw, central_diff(loss, layer.weights)),
                    rel_err(db, central_diff(loss, layer.bias)))

        w, z = r.standard_normal((3, 3)), r.random(lib.K)
        kprobe = r.standard_normal((3, 3))
        kloss = lambda: float(np.sum(masked_effective_kernel(w, z, lib) * kprobe))
        gw, gz = masked_effective_kernel_grad(w, z, lib, kprobe)
        worst = max(worst, rel_err(gw, central_diff(kloss, w)), rel_err(gz, central_diff(kloss, z)))
    dt = time.perf_counter() - t0
    record(3, worst <= 1e-5 and dt < 60, f"100 cases, worst relative error {worst:.2e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# toy experiment shared by criteria 4 and 5
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_experiment():
    t0 = time.perf_counter()
    train, test = synthetic_blobs(seed=SEED)
    net = toy_network(input_shape=train.sample_shape, num_classes=train.num_classes, seed=SEED)
    for e in range(PRETRAIN_EPOCHS):
        train_epoch(net, train, LR, batch_size=32, seed=SEED * 1009 + e, weight_decay=PRETRAIN_WD)
    pretrained = copy.deepcopy(net)

    schedule = ExtractionSchedule()
    t1 = time.perf_counter()
    res = extract_pattern_library(net, train, schedule, seed=SEED)
    extract_s = time.perf_counter() - t1
    pattern_epochs = sum(1 for r in res.log if r["event"] in ("iter", "finetune"))
    pattern_acc = evaluate(res.net, test)

    pruned = copy.deepcopy(res.net)
    rounds, per_round = 3, 2
    conn = prune_and_retrain(pruned, train, [1.0, 0.46875, 0.5], res.assignment.masks(),
                             rounds=rounds, epochs_per_round=per_round, lr=LR, seed=SEED)
    conn_acc = evaluate(pruned, test)

    # dense baselines trained for the same number of epochs as each sparse model
    dense = copy.deepcopy(pretrained)
    dense_acc = {}
    for e in range(pattern_epochs + rounds * per_round):
        train_epoch(dense, train, LR, batch_size=32, seed=SEED * 7 + e, weight_decay=PRETRAIN_WD)
        if e + 1 == pattern_epochs:
            dense_acc["pattern"] = evaluate(dense, test)
    dense_acc["connectivity"] = evaluate(dense, test)
    return dict(result=res, extract_seconds=extract_s, pattern_acc=pattern_acc, conn=conn, conn_acc=conn_acc,
                dense_acc=dense_acc, compression=overall_compression(res.assignment, conn),
                total_seconds=time.perf_counter() - t0)


def test_criterion_4_admm_extraction(toy_experiment):
    res = toy_experiment["result"]
    k_path = [r["K"] for r in res.log if r["event"] == "shrink"] + [res.library.K]
    one_hot = all(a.shape == (c.F, c.C) and a.max() < res.library.K
                  for a, c in zip(res.assignment.indices, res.net.convs))
    one_hot &= all((np.count_nonzero(c.weights.reshape(-1, 9) != 0, axis=1) <= 4).all() for c in res.net.convs)
    tail = res.final_residuals[-5:]
    monotone = all(b <= 1.1 * a for a, b in zip(tail, tail[1:]))
    share = top_share(res.shrink_histograms[0][2], top=12, pool=32)
    minutes = toy_experiment["extract_seconds"] / 60
    ok = k_path == [126, 12, 8] and one_hot and monotone and share >= 0.80 and minutes <= 30
    record(4, ok, f"schedule {k_path}, one-hot {one_hot}, final residuals "
                  f"{[round(r, 4) for r in tail]} non-increasing within 10%: {monotone}, "
                  f"top-12 of top-32 share {share:.3f} (needs >= 0.80), extraction {minutes:.2f} min")


def test_criterion_5_accuracy_retention(toy_experiment):
    d = toy_experiment["dense_acc"]
    pa, ca = toy_experiment["pattern_acc"], toy_experiment["conn_acc"]
    comp = toy_experiment["compression"]
    ok = pa >= d["pattern"] - 0.03 and ca >= d["connectivity"] - 0.05 and comp == pytest.approx(4.5)
    record(5, ok, f"pattern-only {pa:.3f} vs dense {d['pattern']:.3f}; "
                  f"pattern+connectivity ({comp:.2f}x) {ca:.3f} vs dense {d['connectivity']:.3f}")


def test_criterion_6_compression_accounting():
    rng = np.random.default_rng(6)
    toy = toy_network(seed=SEED)
    lib = derived_library()
    full = Assignment(lib, [np.zeros((c.F, c.C), int) for c in toy.convs])
    pattern_only = overall_compression(full, connectivity_prune(toy, 1.0))

    # 8 -> 16 -> 16 stack: 384 kernels, keep 0.28125 leaves exactly 108
    layers, c = [], 8
    for f in (16, 16):
        layers += [Conv2d(rng.standard_normal((f, c, 3, 3)), np.zeros(f)), ReLU()]
        c = f
    net = Network(layers + [Linear(np.zeros((2, 16 * 16)), np.zeros(2))], (8, 4, 4))
    a = Assignment(lib, [np.zeros((l.F, l.C), int) for l in net.convs])
    overall = overall_compression(a, connectivity_prune(net, 0.28125))
    ok = pattern_only == 2.25 and overall == 8.0
    record(6, ok, f"pattern-only {pattern_only}x, keep 0.28125 overall {overall}x")


def test_criterion_7_pack_engine_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    roundtrip = grouping = True
    for seed in range(100):
        r = np.random.default_rng(10_000 + seed)
        K = int(r.integers(1, 17))
        _, lib, _, _, packed = random_pruned_net(r, K=K, pool=bool(r.integers(0, 2)),
                                                 keep=float(r.choice([1.0, 0.7, 0.4])))
        x = r.standard_normal((2, *packed.input_shape)).astype(np.float32)
        worst = max(worst, relative_error(execute_sparse(packed, x), execute_dense(unpack(packed), x)))
        data = psp_bytes(packed)
        roundtrip &= psp_from_bytes(data) == packed and psp_bytes(psp_from_bytes(data)) == data
        grouping &= all((l.pattern_transitions() <= K - 1).all() for l in packed.layers)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and roundtrip and grouping and dt < 120
    record(7, ok, f"100 models, max relative deviation {worst:.2e}, read/write identity {roundtrip}, "
                  f"grouping invariant {grouping}, {dt:.1f}s")


def test_criterion_8_performance():
    t0 = time.perf_counter()
    packed = synthetic_packed(channels=64, size=32, layers=2, keep=0.5, seed=SEED)
    x = np.random.default_rng(8).standard_normal((1, 64, 32, 32)).astype(np.float32)
    report = bench(packed, x, iters=15, threads=(1, 4), warmup=3, config="c64_s32_k0.5")
    speedup = report.row("sparse", 1).speedup
    out1, out4 = execute_sparse(packed, x, threads=1), execute_sparse(packed, x, threads=4)
    repro = relative_error(out4, out1)
    t1, t4 = report.row("sparse", 1).ms_median, report.row("sparse", 4).ms_median
    dt = time.perf_counter() - t0
    ok = speedup >= 1.5 and repro <= 1e-5 and t4 < t1 and dt < 300
    record(8, ok, f"1-thread sparse speedup {speedup:.2f}x (needs >= 1.5); 4-thread deviation {repro:.1e}; "
                  f"sparse median 1 thread {t1:.2f} ms vs 4 threads {t4:.2f} ms (needs strictly faster); "
                  f"{dt:.1f}s")


def test_criterion_9_determinism(tmp_path):
    d = tmp_path
    assert main(["synth", "--n-train", "400", "--n-test", "100", "--out", str(d / "data")]) == 0
    assert main(["train", "--data", str(d / "data"), "--epochs", "5", "--out", str(d / "dense.pnm")]) == 0
    files = {}
    for run in ("a", "b"):
        assert main(["extract", "--data", str(d / "data"), "--model", str(d / "dense.pnm"),
                     "--out", str(d / run / "ext")]) == 0
        assert main(["prune", "--data", str(d / "data"), "--model", str(d / run / "ext/model.pnm"),
                     "--assignment", str(d / run / "ext/assignment.pas"), "--keep-ratio", "1.0,0.5,0.5",
                     "--out", str(d / run / "pruned")]) == 0
        files[run] = {name: (d / run / name).read_bytes() for name in
                      ("ext/assignment.pas", "ext/model.pnm", "pruned/assignment.pas", "pruned/model.pnm")}
    same = [name for name in files["a"] if files["a"][name] == files["b"][name]]
    record(9, len(same) == 4, f"{len(same)}/4 extract/prune artifacts bit-identical across reruns")
