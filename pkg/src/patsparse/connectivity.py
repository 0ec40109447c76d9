"""Connectivity pruning: drop whole 3x3 kernels ranked by their L2 norm.

Ranking ties go to the smaller flat kernel index ``f * C + c``. After the
top-ranked kernels are kept, a repair pass guarantees every output filter and
every input channel keeps at least one kernel, without changing the count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import Conv2d, Network, apply_hard_masks, train_epoch


def connectivity_score(layer: Conv2d, f: int, c: int) -> float:
    if not (0 <= f < layer.F and 0 <= c < layer.C):
        raise IndexError(f"kernel ({f}, {c}) out of range for F={layer.F}, C={layer.C}")
    k = layer.weights[f, c]
    return float(np.sqrt(np.sum(k * k)))


def gamma(layer: Conv2d) -> np.ndarray:
    """[F, C] matrix of kernel L2 norms."""
    w = layer.weights
    return np.sqrt(np.einsum("fcij,fcij->fc", w, w))


@dataclass
class ConnectivityMask:
    keep: list                      # [F, C] bool per conv layer
    gammas: list = field(default_factory=list)

    def __post_init__(self):
        self.keep = [np.asarray(k, dtype=bool) for k in self.keep]

    @classmethod
    def full(cls, net: Network) -> "ConnectivityMask":
        return cls([np.ones((c.F, c.C), dtype=bool) for c in net.convs])

    @property
    def kept(self) -> int:
        return int(sum(k.sum() for k in self.keep))

    @property
    def total(self) -> int:
        return int(sum(k.size for k in self.keep))

    def keep_ratio(self) -> float:
        return self.kept / self.total

    def check(self) -> None:
        for i, k in enumerate(self.keep):
            if not k.any(axis=1).all():
                raise ValueError(f"layer {i}: filter {int(np.argmin(k.any(axis=1)))} has no kernels")
            if not k.any(axis=0).all():
                raise ValueError(f"layer {i}: input channel {int(np.argmin(k.any(axis=0)))} has no consumers")

    def kernel_masks(self) -> list:
        """[F, C, 3, 3] 0/1 arrays."""
        return [np.broadcast_to(k[:, :, None, None], (*k.shape, 3, 3)).astype(np.float64) for k in self.keep]


def _rank(g: np.ndarray) -> np.ndarray:
    """rank[i] = position of flat kernel i when sorted by descending gamma, ties by index."""
    flat = g.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    rank = np.empty(flat.size, dtype=np.int64)
    rank[order] = np.arange(flat.size)
    return rank


def n_keep_for(ratio: float, F: int, C: int) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {ratio}")
    # round before ceil so e.g. 0.28125 * 128 does not pick up float noise
    return int(math.ceil(round(ratio * F * C, 9)))


def prune_layer(g: np.ndarray, ratio: float, layer_index: int = 0) -> np.ndarray:
    """Keep mask for one layer's gamma matrix, repair included."""
    F, C = g.shape
    n_keep = n_keep_for(ratio, F, C)
    if n_keep < max(F, C):
        raise ValueError(
            f"layer {layer_index}: keep_ratio {ratio} keeps {n_keep} of {F}x{C} kernels, but at least "
            f"max(F, C) = {max(F, C)} are needed to leave every filter and input channel connected")
    rank = _rank(g).reshape(F, C)
    keep = rank < n_keep

    def evict(protect) -> bool:
        rows, cols = keep.sum(axis=1), keep.sum(axis=0)
        cand = keep & (rows[:, None] > 1) & (cols[None, :] > 1)
        cand[protect] = False
        if not cand.any():
            return False
        f, c = np.unravel_index(np.argmax(np.where(cand, rank, -1)), keep.shape)
        keep[f, c] = False
        return True

    # Restore the best kernel of an empty filter (channel) and evict the worst
    # kernel whose removal disconnects nothing. If every kept kernel is
    # load-bearing, move one instead: some other filter (channel) holds two or
    # more kernels once n_keep >= max(F, C), so shifting one of them along its
    # channel (filter) keeps all other counts intact.
    for f in range(F):
        if keep[f].any():
            continue
        c = int(np.argmin(rank[f]))
        keep[f, c] = True
        if evict((f, c)):
            continue
        keep[f, c] = False
        src = keep & (keep.sum(axis=1)[:, None] > 1)
        c = int(np.argmin(np.where(src.any(axis=0), rank[f], np.iinfo(np.int64).max)))
        fs = int(np.argmax(np.where(src[:, c], rank[:, c], -1)))
        keep[fs, c], keep[f, c] = False, True
    for c in range(C):
        if keep[:, c].any():
            continue
        f = int(np.argmin(rank[:, c]))
        keep[f, c] = True
        if evict((f, c)):
            continue
        keep[f, c] = False
        src = keep & (keep.sum(axis=0)[None, :] > 1)
        f = int(np.argmin(np.where(src.any(axis=1), rank[:, c], np.iinfo(np.int64).max)))
        cs = int(np.argmax(np.where(src[f], rank[f], -1)))
        keep[f, cs], keep[f, c] = False, True
    return keep


def _ratios(net: Network, keep_ratio) -> list:
    n = len(net.convs)
    if np.isscalar(keep_ratio):
        return [float(keep_ratio)] * n
    ratios = [float(r) for r in keep_ratio]
    if len(ratios) != n:
        raise ValueError(f"{len(ratios)} keep ratios for {n} conv layers")
    return ratios


def connectivity_prune(net: Network, keep_ratio: float | Sequence[float]) -> ConnectivityMask:
    """Per-layer top-gamma kernel selection; ``keep_ratio`` is a float or one per conv layer."""
    keeps, gammas = [], []
    for i, (layer, r) in enumerate(zip(net.convs, _ratios(net, keep_ratio))):
        g = gamma(layer)
        gammas.append(g)
        keeps.append(prune_layer(g, r, i))
    return ConnectivityMask(keeps, gammas)


def combined_masks(net: Network, pattern_masks: list | None, conn: ConnectivityMask) -> list:
    out = []
    for i, layer in enumerate(net.convs):
        m = conn.kernel_masks()[i]
        if pattern_masks is not None:
            m = m * pattern_masks[i]
        elif layer.mask is not None:
            m = m * layer.mask
        out.append(m)
    return out


def geometric_schedule(final, rounds: int) -> list:
    """Keep ratios for each round: ``final ** ((i + 1) / rounds)`` per layer."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    final = np.atleast_1d(np.asarray(final, dtype=np.float64))
    sched = [final ** ((i + 1) / rounds) for i in range(rounds)]
    sched[-1] = final  # exact target on the last round
    return [s.tolist() for s in sched]


def prune_and_retrain(net: Network, data, keep_ratio, pattern_masks: list | None = None, *,
                      rounds: int = 3, epochs_per_round: int = 2, lr: float = 0.02,
                      batch_size: int = 32, seed: int = 42) -> ConnectivityMask:
    """Interleave connectivity pruning with retraining, tightening geometrically.

    Every round ranks kernels by their current gamma, hard-masks the net with
    the pattern masks times the connectivity keep mask, then retrains.
    Pruned kernels stay at zero, so later rounds only ever remove more.
    """
    ratios = _ratios(net, keep_ratio)
    conn = ConnectivityMask.full(net)
    epoch = 0
    for round_ratios in geometric_schedule(ratios, rounds):
        if len(round_ratios) == 1:
            round_ratios = round_ratios * len(ratios)
        conn = connectivity_prune(net, round_ratios)
        apply_hard_masks(net, combined_masks(net, pattern_masks, conn))
        for _ in range(epochs_per_round):
            train_epoch(net, data, lr, batch_size=batch_size, seed=seed * 7919 + epoch)
            epoch += 1
    conn.check()
    return conn


def overall_compression(assignment, connectivity: ConnectivityMask) -> float:
    """Dense 3x3 weights over stored pattern weights: ``9 * N_kernels / (4 * kept)``."""
    if assignment is not None:
        shapes = [np.shape(a) for a in assignment.indices]
        if shapes != [k.shape for k in connectivity.keep]:
            raise ValueError(f"assignment shapes {shapes} do not match connectivity")
    if connectivity.kept == 0:
        raise ValueError("no kernels kept")
    return 9 * connectivity.total / (4 * connectivity.kept)
