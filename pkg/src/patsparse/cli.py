"""Command-line entry point: ``patsparse <command> [options]``.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 numeric divergence during training.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import BACKEND
from .admm import ExtractionSchedule, extract_pattern_library, write_log_csv, top_share
from .connectivity import overall_compression, prune_and_retrain, ConnectivityMask
from .data import Dataset, load_idx_dataset, save_idx_dataset, synthetic_blobs
from .engine import _pool32, bench, execute_dense, execute_sparse, relative_error
from .modelio import load_assignment, load_model, save_assignment, save_model
from .nn import DivergenceError, apply_hard_masks, evaluate, toy_network, train_epoch
from .pack import pack, read_psp, unpack, write_psp
from .patterns import (derived_library, elog_filter, elog_pattern_set, gaussian_filter_3x3,
                       gaussian_pattern_set, log_filter_approx, mask_mean, mask_sum,
                       interpolation_report, save_library, SteerableSpec)

log = logging.getLogger("patsparse")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file():
                    out[str(f)] = sha256_file(f)
        elif p.exists():
            out[str(p)] = sha256_file(p)
    return out


def _write_sidecar(args, out: Path, inputs, extra=None) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    doc = {"command": args.command, "version": __version__, "backend": BACKEND,
           "config": cfg, "inputs": _input_hashes(inputs)}
    if extra:
        doc["results"] = extra
    side = out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    side.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _need(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} file {path} does not exist")
    return Path(path)


def _datasets(args) -> tuple[Dataset, Dataset]:
    if args.data:
        d = Path(args.data)
        if not d.is_dir():
            raise UsageError(f"data directory {d} does not exist")
        train = load_idx_dataset(d, "train", limit=args.limit)
        test = load_idx_dataset(d, "test", num_classes=train.num_classes)
        return train, test
    train, test = synthetic_blobs(seed=args.data_seed)
    return (train.subset(args.limit) if args.limit else train), test


def _ratios(text):
    parts = [float(t) for t in str(text).split(",") if t.strip()]
    return parts[0] if len(parts) == 1 else parts


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out or "data")
    train, test = synthetic_blobs(n_train=args.n_train, n_test=args.n_test, num_classes=args.classes,
                                  seed=args.seed)
    save_idx_dataset(out, train, test)
    _write_sidecar(args, out, [])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


def cmd_train(args):
    train, test = _datasets(args)
    net = toy_network(input_shape=train.sample_shape, num_classes=train.num_classes, seed=args.seed)
    for e in range(args.epochs):
        stats = train_epoch(net, train, args.lr, batch_size=args.batch_size, seed=args.seed * 1009 + e,
                            weight_decay=args.weight_decay)
        log.info("epoch %d loss %.5f acc %.4f", e, stats["loss"], stats["accuracy"])
    out = Path(args.out or "model.pnm")
    save_model(net, out)
    acc = evaluate(load_model(out), test)
    _write_sidecar(args, out, [args.data], {"test_accuracy": acc})
    print(f"test accuracy {acc:.4f}; wrote {out}")


def cmd_derive(args):
    out = Path(args.out or "libraries")
    out.mkdir(parents=True, exist_ok=True)
    g, e, d = gaussian_pattern_set(), elog_pattern_set(), derived_library()
    save_library(g, out / "gaussian.json")
    save_library(e, out / "elog.json")
    save_library(d, out / "derived.json")
    gsum = mask_sum(g)
    p = Fraction(3, 4)
    elog_mean = np.array([[0, p, 0], [p, 1, p], [0, p, 0]], dtype=object)
    checks = {
        "gaussian_set_sum_equals_binomial_filter": bool(np.array_equal(gsum, gaussian_filter_3x3())),
        "elog_set_mean_equals_cross_p_3_4": bool(np.all(mask_mean(e) == elog_mean)),
        "derived_library_has_8_patterns": d.K == 8,
    }
    spec = SteerableSpec()
    lines = ["gaussian 3x3:", str(gaussian_filter_3x3()),
             "LoG approximation (first):", str(log_filter_approx("first")),
             "LoG approximation (second):", str(log_filter_approx("second")),
             "ELoG:", str(elog_filter()),
             f"gaussian set masks: {g.bits}", "sum of gaussian set masks:", str(gsum),
             f"elog set masks: {e.bits}", "mean of elog set masks:", str(mask_mean(e)),
             f"derived library (K={d.K}): {d.bits}"]
    for name, lib in (("gaussian", g), ("elog", e)):
        rep = interpolation_report(spec, lib)
        lines.append(f"{name} set: {rep['interpretation']} (n={rep['n']}) vs {rep['target']}: "
                     f"cosine {rep['cosine']:.6f}")
    for k, v in checks.items():
        lines.append(f"check {k}: {v}")
    (out / "derivation_report.txt").write_text("\n".join(lines) + "\n")
    _write_sidecar(args, out, [], checks)
    print("\n".join(lines))
    if not all(bool(v) for v in checks.values()):
        raise VerificationFailed("derivation identity check failed")


def cmd_extract(args):
    net = load_model(_need(args.model, "model"))
    train, test = _datasets(args)
    schedule = ExtractionSchedule.parse(args.schedule, epochs_per_step=args.epochs_per_step,
                                        admm_iters_final=args.admm_iters,
                                        finetune_epochs=args.finetune_epochs)
    res = extract_pattern_library(net, train, schedule, rho=args.rho, lr=args.lr,
                                  batch_size=args.batch_size, seed=args.seed,
                                  selection_lr=args.selection_lr, rho_growth=args.rho_growth)
    out = Path(args.out or "extract_out")
    out.mkdir(parents=True, exist_ok=True)
    save_library(res.library, out / "library.json")
    save_assignment(out / "assignment.pas", res.assignment)
    save_model(res.net, out / "model.pnm")
    write_log_csv(res.log, out / "extract_log.csv")
    acc = evaluate(load_model(out / "model.pnm"), test)
    share = top_share(res.shrink_histograms[0][2]) if res.shrink_histograms else None
    _write_sidecar(args, out, [args.model, args.data],
                   {"library": res.library.bits, "test_accuracy": acc, "top12_of_top32_share": share})
    print(f"library K={res.library.K}: {res.library.bits}; test accuracy {acc:.4f}; wrote {out}")


def cmd_prune(args):
    net = load_model(_need(args.model, "model"))
    assignment, prior = load_assignment(_need(args.assignment, "assignment"))
    train, test = _datasets(args)
    masks = assignment.masks()
    apply_hard_masks(net, masks)
    conn = prune_and_retrain(net, train, _ratios(args.keep_ratio), masks, rounds=args.rounds,
                             epochs_per_round=args.epochs_per_round, lr=args.lr,
                             batch_size=args.batch_size, seed=args.seed)
    conn = ConnectivityMask([a & b for a, b in zip(conn.keep, prior.keep)])
    conn.check()
    ratio = overall_compression(assignment, conn)
    out = Path(args.out or "prune_out")
    out.mkdir(parents=True, exist_ok=True)
    save_model(net, out / "model.pnm")
    save_assignment(out / "assignment.pas", assignment, conn)
    acc = evaluate(load_model(out / "model.pnm"), test)
    _write_sidecar(args, out, [args.model, args.assignment, args.data],
                   {"compression": ratio, "kept_kernels": conn.kept, "test_accuracy": acc})
    print(f"compression {ratio:.4g}x ({conn.kept}/{conn.total} kernels kept); "
          f"test accuracy {acc:.4f}; wrote {out}")


def cmd_pack(args):
    model_path = _need(args.model, "model")
    net = load_model(model_path)
    assignment, conn = load_assignment(_need(args.assignment, "assignment"))
    packed = pack(net, assignment.library, assignment, conn,
                  source_hash=bytes.fromhex(sha256_file(model_path)))
    out = Path(args.out or "model.psp")
    write_psp(out, packed)
    _write_sidecar(args, out, [args.model, args.assignment], {"records": packed.records()})
    print(f"packed {len(packed.layers)} conv layers, {packed.records()} kernel records; wrote {out}")


def cmd_infer(args):
    packed = read_psp(_need(args.packed, "packed"))
    _, test = _datasets(args)
    x = test.inputs[: args.limit] if args.limit else test.inputs
    logits = execute_sparse(packed, x, threads=args.threads)
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == test.labels[: len(x)]))
    out = Path(args.out or "predictions.csv")
    with open(out, "w") as f:
        f.write("index,label,prediction\n")
        for i, (lab, p) in enumerate(zip(test.labels, pred)):
            f.write(f"{i},{lab},{p}\n")
    _write_sidecar(args, out, [args.packed, args.data], {"accuracy": acc})
    print(f"accuracy {acc:.4f} on {len(x)} samples; wrote {out}")


def _record_diffs(packed, reference):
    """Coordinates of records/weights/biases that differ from a re-packed reference."""
    diffs = []
    for li, (a, b) in enumerate(zip(packed.layers, reference.layers)):
        ptr = b.record_ptr
        same_layout = (a.n_records == b.n_records and np.array_equal(a.chan, b.chan)
                       and np.array_equal(a.pat, b.pat) and np.array_equal(a.filter_perm, b.filter_perm))
        if not same_layout:
            diffs.append(f"layer {li}: record layout differs from the reference")
            continue
        bad_rec = np.flatnonzero(np.any(a.weights.view(np.uint32) != b.weights.view(np.uint32), axis=1))
        for r in bad_rec:
            pf = int(np.searchsorted(ptr, r, side="right") - 1)
            diffs.append(f"layer {li}, filter {int(b.filter_perm[pf])} (packed position {pf}), "
                         f"input channel record {r - ptr[pf]}: weights differ")
        for pf in np.flatnonzero(a.bias.view(np.uint32) != b.bias.view(np.uint32)):
            diffs.append(f"layer {li}, filter {int(b.filter_perm[pf])}: bias differs")
    if (packed.head_weights is None) != (reference.head_weights is None):
        diffs.append("classifier head presence differs")
    elif packed.head_weights is not None:
        rows, cols = np.nonzero(packed.head_weights.view(np.uint32) != reference.head_weights.view(np.uint32))
        for r, c in list(zip(rows, cols))[:20]:
            diffs.append(f"classifier head: output {r}, packed feature {c} differs")
        for r in np.flatnonzero(packed.head_bias.view(np.uint32) != reference.head_bias.view(np.uint32)):
            diffs.append(f"classifier head: bias {r} differs")
    if packed.source_hash != reference.source_hash and any(reference.source_hash):
        diffs.append("source hash differs from the reference model")
    return diffs


def _layerwise(packed, reference, x, tol):
    """Per-layer dense reference vs sparse execution; returns failing (layer, filter, err)."""
    from .pack import PackedModel

    failures = []
    dense_layers = [c for c in reference.convs]
    act = np.asarray(x, dtype=np.float32)
    prev_perm = np.arange(packed.input_shape[0])
    for li, (layer, conv) in enumerate(zip(packed.layers, dense_layers)):
        single = PackedModel(act.shape[1:], [layer])
        sparse_out = execute_sparse(single, act[:, prev_perm])  # original filter order
        dense_out = execute_dense([(conv.weights, conv.bias, conv.stride, conv.pad, False, 0)], act)
        if layer.relu:
            dense_out = np.maximum(dense_out, 0)
        if layer.pool:
            dense_out = _pool32(dense_out, layer.pool)
        scale = max(float(np.max(np.abs(dense_out))), 1e-30)
        per_f = np.max(np.abs(sparse_out - dense_out), axis=(0, 2, 3)) / scale
        for f in np.flatnonzero(per_f > tol):
            failures.append((li, int(f), float(per_f[f])))
        act = dense_out
        prev_perm = layer.filter_perm
    return failures


def cmd_verify(args):
    path = _need(args.packed, "packed")
    problems = []
    try:
        packed = read_psp(path)
    except ValueError as e:
        if "CRC" not in str(e):
            raise VerificationFailed(str(e))
        problems.append(str(e))
        packed = read_psp(path, check_crc=False)
    reference = None
    if args.model:
        reference = load_model(_need(args.model, "model"))
        if args.assignment:
            assignment, conn = load_assignment(_need(args.assignment, "assignment"))
            ref_packed = pack(reference, assignment.library, assignment, conn,
                              source_hash=bytes.fromhex(sha256_file(args.model)))
            diffs = _record_diffs(packed, ref_packed)
            if problems and not diffs:
                diffs = ["no record, weight or head differences; the corruption is in header bytes"]
            problems += diffs
    if reference is None:
        reference = unpack(packed)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, *packed.input_shape)).astype(np.float32)
    dense = execute_dense(reference, x)
    sparse = execute_sparse(packed, x, threads=args.threads)
    err = relative_error(sparse, dense)
    if err > args.tol:
        problems.append(f"max relative deviation {err:.3e} exceeds tolerance {args.tol:.1e}")
        for li, f, e in _layerwise(packed, reference, x, args.tol)[:20]:
            problems.append(f"layer {li}, filter {f}: relative deviation {e:.3e}")
    result = {"max_relative_deviation": err, "tolerance": args.tol, "problems": problems}
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps(result, indent=2) + "\n")
        _write_sidecar(args, out, [args.packed, args.model, args.assignment])
    if problems:
        raise VerificationFailed("\n".join(problems))
    print(f"verify ok: max relative deviation {err:.3e} <= {args.tol:.1e}")


def synthetic_packed(channels=64, size=32, layers=2, keep=0.5, seed=0):
    """Headless packed model of ``layers`` C->C 3x3 convs with random patterns and connectivity."""
    from .admm import Assignment
    from .connectivity import combined_masks, connectivity_prune
    from .nn import Conv2d, Linear, Network, ReLU

    rng = np.random.default_rng(seed)
    lib = derived_library()
    convs = [Conv2d(rng.standard_normal((channels, channels, 3, 3)) / (3 * np.sqrt(channels)),
                    rng.standard_normal(channels) * 0.1) for _ in range(layers)]
    stack = [l for c in convs for l in (c, ReLU())]
    net = Network(stack + [Linear(np.zeros((1, channels * size * size)), np.zeros(1))],
                  (channels, size, size))
    assignment = Assignment(lib, [rng.integers(0, lib.K, (channels, channels)) for _ in convs])
    apply_hard_masks(net, assignment.masks())
    conn = connectivity_prune(net, keep)
    apply_hard_masks(net, combined_masks(net, assignment.masks(), conn))
    packed = pack(net, lib, assignment, conn)
    packed.head_weights = packed.head_bias = None
    return packed


def cmd_bench(args):
    threads = [int(t) for t in str(args.bench_threads or args.threads).split(",")]
    if args.packed:
        packed = read_psp(_need(args.packed, "packed"))
        config = Path(args.packed).stem
    else:
        packed = synthetic_packed(args.channels, args.size, args.layers, args.keep, args.seed)
        config = f"c{args.channels}_s{args.size}_k{args.keep:g}"
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, *packed.input_shape)).astype(np.float32)
    report = bench(packed, x, iters=args.iters, threads=threads, warmup=args.warmup, config=config)
    out = Path(args.out or "bench.csv")
    out.write_text(report.to_csv())
    _write_sidecar(args, out, [args.packed])
    print(report.table())
    for r in report.rows:
        if r.path == "sparse":
            dense = report.row("dense", r.threads)
            if relative_error(r.checksum, dense.checksum) > args.tol:
                raise VerificationFailed(f"threads={r.threads}: sparse checksum {r.checksum} "
                                         f"deviates from dense {dense.checksum}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int, default=42)
    shared.add_argument("--config", help="key=value file; flags given on the command line win")
    shared.add_argument("--out")
    shared.add_argument("--threads", type=int, default=1)
    shared.add_argument("--tol", type=float, default=1e-4)
    shared.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--data", help="directory with IDX files (default: synthetic blobs)")
    data.add_argument("--data-seed", type=int, default=42)
    data.add_argument("--limit", type=int)

    train = _Parser(add_help=False)
    train.add_argument("--lr", type=float, default=0.02)
    train.add_argument("--batch-size", type=int, default=32)

    p = _Parser(prog="patsparse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[shared], help="write the synthetic dataset as IDX files")
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--classes", type=int, default=4)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[shared, data, train], help="train the dense toy model")
    s.add_argument("--epochs", type=int, default=60)
    s.add_argument("--weight-decay", type=float, default=5e-2)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("derive", parents=[shared], help="write the theoretical pattern libraries")
    s.set_defaults(func=cmd_derive)

    s = sub.add_parser("extract", parents=[shared, data, train], help="ADMM pattern library extraction")
    s.add_argument("--model")
    s.add_argument("--schedule", default="126,12,8")
    s.add_argument("--rho", type=float, default=1e-2)
    s.add_argument("--rho-growth", type=float, default=1.5)
    s.add_argument("--selection-lr", type=float)
    s.add_argument("--epochs-per-step", type=int, default=3)
    s.add_argument("--admm-iters", type=int, default=10)
    s.add_argument("--finetune-epochs", type=int, default=3)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("prune", parents=[shared, data, train], help="pattern + connectivity pruning")
    s.add_argument("--model")
    s.add_argument("--assignment")
    s.add_argument("--keep-ratio", default="1.0", help="one ratio or one per conv layer, comma separated")
    s.add_argument("--rounds", type=int, default=3)
    s.add_argument("--epochs-per-round", type=int, default=2)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("pack", parents=[shared], help="write the packed .psp model")
    s.add_argument("--model")
    s.add_argument("--assignment")
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("infer", parents=[shared, data], help="classify the test split with a .psp model")
    s.add_argument("--packed")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("verify", parents=[shared], help="sparse vs dense equivalence check")
    s.add_argument("--packed")
    s.add_argument("--model", help="source .pnm to compare against")
    s.add_argument("--assignment", help="source .pas; with --model, locates corrupted records")
    s.add_argument("--batch", type=int, default=2)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", parents=[shared], help="dense vs sparse timing")
    s.add_argument("--packed", help="model to time (default: synthetic conv stack)")
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--bench-threads", help="comma-separated thread counts (default: --threads)")
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--keep", type=float, default=0.5)
    s.set_defaults(func=cmd_bench)
    return p


def read_config(path) -> dict:
    cfg = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (t.strip() for t in line.split("=", 1))
        cfg[k.replace("-", "_")] = v
    return cfg


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    cfg = read_config(_need(args.config, "config"))
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        if k not in actions or k in ("config", "help"):
            raise UsageError(f"config key {k!r} is not an option of '{args.command}'")
        a = actions[k]
        try:
            if isinstance(a, argparse._StoreTrueAction):
                defaults[k] = _bool(v)
            else:
                defaults[k] = a.type(v) if a.type else v
        except ValueError as e:
            raise UsageError(f"config key {k}: {e}") from None
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        try:
            args = parse_args(argv)
        except SystemExit as e:  # argparse usage errors, --help, --version
            return e.code if isinstance(e.code, int) else EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with np.errstate(over="ignore", invalid="ignore"):
            args.func(args)
        return EXIT_OK
    except UsageError as e:
        print(f"patsparse: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailed as e:
        print(f"patsparse: verification failed:\n{e}", file=sys.stderr)
        return EXIT_VERIFY
    except DivergenceError as e:
        print(f"patsparse: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as e:
        print(f"patsparse: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
