"""Pattern-aware pruning by ADMM: pattern selection, library shrinking and binarization.

Every 3x3 kernel of every conv layer carries its own selection vector ``z``
over the current library, an auxiliary copy ``u`` kept on the probability
simplex and a dual vector ``mu``. One ADMM iteration is

* primal: SGD on ``W`` and ``z`` for ``loss(W * (z @ masks)) + rho/2 ||z - a||^2``
  with ``a = u - mu / rho``,
* proximal: ``u = simplex_project(z + mu / rho)``,
* dual: ``mu += rho * (z - u)``.

Between library-shrink steps the least used patterns are dropped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .nn import DivergenceError, KernelSelection, Network, apply_hard_masks, effective_kernels, train_epoch
from .patterns import PatternLibrary, enumerate_candidate_masks

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def simplex_project(d, return_nu: bool = False):
    """Euclidean projection of ``d`` onto ``{u >= 0, sum(u) = 1}`` by sort-and-threshold."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size < 1:
        raise ValueError("simplex_project expects a nonempty 1-D vector")
    if not np.all(np.isfinite(d)):
        raise ValueError("simplex_project input must be finite")
    u, nu = kernels.simplex_project_rows(d[None, :])
    return (u[0], float(nu[0])) if return_nu else u[0]


def simplex_project_rows(d):
    """Row-wise projection of a ``[N, K]`` array."""
    d = np.ascontiguousarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("simplex_project input must be finite")
    return kernels.simplex_project_rows(d)[0]


def binarize(z) -> np.ndarray:
    """One-hot at the argmax of ``z`` (ties go to the smallest index)."""
    z = np.asarray(z)
    out = np.zeros(z.shape, dtype=np.float64)
    np.put_along_axis(out, np.argmax(z, axis=-1)[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass
class AdmmState:
    z: list
    u: list
    mu: list
    rho: float
    t: int = 0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @classmethod
    def uniform(cls, net: Network, K: int, rho: float) -> "AdmmState":
        z = [np.full((c.F, c.C, K), 1.0 / K) for c in net.convs]
        return cls(z=z, u=[a.copy() for a in z], mu=[np.zeros_like(a) for a in z], rho=rho)

    @property
    def K(self) -> int:
        return self.z[0].shape[-1]

    def residual(self) -> float:
        """Sum over kernels of ``||z - u||_2``."""
        return float(sum(np.linalg.norm(z - u, axis=-1).sum() for z, u in zip(self.z, self.u)))

    def restrict(self, keep_idx) -> "AdmmState":
        keep_idx = np.asarray(keep_idx)
        take = lambda arrs: [np.ascontiguousarray(a[..., keep_idx]) for a in arrs]
        return AdmmState(take(self.z), take(self.u), take(self.mu), self.rho, self.t)

    def snapshot(self) -> "AdmmState":
        cp = lambda arrs: [a.copy() for a in arrs]
        return AdmmState(cp(self.z), cp(self.u), cp(self.mu), self.rho, self.t)


def proximal_step(state: AdmmState) -> AdmmState:
    for i, (z, mu) in enumerate(zip(state.z, state.mu)):
        d = z + mu / state.rho
        state.u[i] = simplex_project_rows(d.reshape(-1, d.shape[-1])).reshape(d.shape)
    return state


def dual_update(state: AdmmState) -> AdmmState:
    for mu, z, u in zip(state.mu, state.z, state.u):
        mu += state.rho * (z - u)
    state.t += 1
    return state


def proximal_penalty(state: AdmmState):
    """``extra_loss`` callback: ``rho/2 sum ||z - a||^2`` with ``a = u - mu/rho``."""
    targets = [u - mu / state.rho for u, mu in zip(state.u, state.mu)]

    def extra(selection: KernelSelection):
        value = 0.0
        grads = []
        for z, a in zip(selection.z, targets):
            diff = z - a
            value += 0.5 * state.rho * float(np.sum(diff * diff))
            grads.append(state.rho * diff)
        return value, grads

    return extra


def primal_step(net: Network, state: AdmmState, library: PatternLibrary, data, epochs: int,
                lr: float = 0.05, batch_size: int = 32, seed: int = 0, selection_lr: float | None = None,
                weight_decay: float = 0.0, zero_task_grad: bool = False) -> list:
    """Joint SGD on weights and selections; returns per-epoch loss statistics.

    Each library position is covered by ``4K/9`` masks on average, so a step of
    size ``s`` on every ``z_j`` moves a position's coverage by about ``4Ks/9``.
    The selection step is therefore ``selection_lr * 9 / (4K)`` (with
    ``selection_lr`` defaulting to ``lr``), which keeps the coverage step size
    independent of ``K``.
    """
    if [z.shape for z in state.z] != [(c.F, c.C, library.K) for c in net.convs]:
        raise ValueError("ADMM state does not match network kernels x library size")
    selection = KernelSelection(library, state.z)
    extra = proximal_penalty(state)
    zlr = (lr if selection_lr is None else selection_lr) * 9.0 / (4.0 * library.K)
    stats = []
    for e in range(epochs):
        try:
            stats.append(train_epoch(net, data, lr, extra, selection=selection, batch_size=batch_size,
                                     seed=seed + e, selection_lr=zlr, weight_decay=weight_decay,
                                     zero_task_grad=zero_task_grad))
        except DivergenceError as err:
            err.snapshot = state.snapshot()
            raise
    return stats


# ---------------------------------------------------------------------------
# Library bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    """Per-kernel pattern index into ``library``; one ``[F, C]`` int array per conv layer."""
    library: PatternLibrary
    indices: list

    def __post_init__(self):
        self.indices = [np.asarray(a, dtype=np.int64) for a in self.indices]
        for a in self.indices:
            if a.size and (a.min() < 0 or a.max() >= self.library.K):
                raise ValueError(f"pattern index out of range for K={self.library.K}")

    def histogram(self) -> np.ndarray:
        return pattern_histogram(self.indices, self.library.K)

    def masks(self) -> list:
        """Dense 0/1 masks ``[F, C, 3, 3]`` per layer."""
        m = self.library.mask_matrix()
        return [m[a].reshape(*a.shape, 3, 3) for a in self.indices]


def pattern_histogram(indices, K: int) -> np.ndarray:
    counts = np.zeros(K, dtype=np.int64)
    for a in indices:
        counts += np.bincount(np.asarray(a).ravel(), minlength=K)
    return counts


def shrink_library(library: PatternLibrary, assignments, new_k: int):
    """Keep the ``new_k`` most used patterns.

    ``assignments`` is an iterable of pattern indices (or arrays of them).
    Ties are resolved in favour of the smaller bitmap. Returns the new library
    in ascending bitmap order and the kept indices into the old library, in
    the same order.
    """
    if new_k < 1:
        raise ValueError(f"new_k must be >= 1, got {new_k}")
    if new_k >= library.K:
        raise ValueError(f"new_k={new_k} must be smaller than K={library.K}")
    counts = pattern_histogram([np.asarray(a).ravel() for a in assignments], library.K)
    bits = np.array(library.bits)
    order = np.lexsort((bits, -counts))
    kept = order[:new_k]
    kept = kept[np.argsort(bits[kept])]
    return PatternLibrary(tuple(library.masks[i] for i in kept)), kept


def assignment_from_state(state: AdmmState, library: PatternLibrary) -> Assignment:
    return Assignment(library, [np.argmax(z, axis=-1) for z in state.z])


# ---------------------------------------------------------------------------
# Extraction driver
# ---------------------------------------------------------------------------

@dataclass
class ExtractionSchedule:
    k_targets: tuple = (126, 12, 8)
    epochs_per_step: int = 3
    admm_iters_final: int = 10
    finetune_epochs: int = 3

    def __post_init__(self):
        self.k_targets = tuple(int(k) for k in self.k_targets)
        if len(self.k_targets) < 2:
            raise ValueError("schedule needs a start size and at least one target")
        if self.k_targets[0] != 126:
            raise ValueError("extraction starts from the full 126-mask candidate set")
        if any(a <= b for a, b in zip(self.k_targets, self.k_targets[1:])):
            raise ValueError(f"k_targets must be strictly decreasing, got {self.k_targets}")
        if self.k_targets[-1] not in (12, 8, 4):
            raise ValueError("final library size must be 12, 8 or 4")
        if self.epochs_per_step < 1 or self.admm_iters_final < 1 or self.finetune_epochs < 0:
            raise ValueError("epoch and iteration counts must be positive")

    @classmethod
    def parse(cls, text: str, **kw) -> "ExtractionSchedule":
        return cls(tuple(int(t) for t in text.split(",") if t.strip()), **kw)


@dataclass
class ExtractionResult:
    library: PatternLibrary
    assignment: Assignment
    net: Network
    log: list = field(default_factory=list)
    final_residuals: list = field(default_factory=list)
    shrink_histograms: list = field(default_factory=list)  # (K, library bits, counts) per shrink


LOG_FIELDS = ("step", "event", "K", "epoch", "loss", "residual", "histogram")


def _hist_text(library, counts):
    return " ".join(f"{b}:{int(c)}" for b, c in zip(library.bits, counts))


def top_share(counts, top: int = 12, pool: int = 32) -> float:
    """Share of the ``pool`` most used patterns that falls on the ``top`` most used ones."""
    c = np.sort(np.asarray(counts))[::-1]
    denom = c[:pool].sum()
    return float(c[:top].sum() / denom) if denom else 0.0


def start_step(net: Network, previous, library: PatternLibrary, rho: float) -> AdmmState:
    """Fresh uniform ADMM state over ``library`` with the net's function preserved.

    The current effective kernels (under ``previous = (state, old_library)``
    when given) are divided by the uniform-selection coverage of the new
    library, so ``W * coverage(z)`` is unchanged wherever the new library
    covers a position; uncovered positions are zeroed.
    """
    state = AdmmState.uniform(net, library.K, rho)
    coverage = state.z[0][0, 0] @ library.mask_matrix()  # same for every kernel
    inv = np.divide(1.0, coverage, out=np.zeros(9), where=coverage > 0).reshape(3, 3)
    for i, layer in enumerate(net.convs):
        w = layer.weights
        if previous is not None:
            prev, old_lib = previous
            w = effective_kernels(w, prev.z[i], old_lib.mask_matrix())
        layer.weights = w * inv
    return state


def extract_pattern_library(net: Network, data, schedule: ExtractionSchedule, rho: float = 1e-2,
                            lr: float = 0.02, batch_size: int = 32, seed: int = 42,
                            selection_lr: float | None = None, weight_decay: float = 0.0,
                            rho_growth: float = 1.5) -> ExtractionResult:
    """Shrink the library from all 126 candidates down ``schedule.k_targets``.

    ``net`` is modified in place and returned: after the final binarization
    every conv kernel is folded to ``W * coverage(z)`` restricted to its chosen
    mask, hard masks are attached and the net is fine-tuned.
    """
    library = enumerate_candidate_masks()
    state = start_step(net, None, library, rho)
    rows = []
    epoch = 0
    result = ExtractionResult(library, None, net)

    def admm_iter(step):
        nonlocal epoch
        stats = primal_step(net, state, library, data, 1, lr=lr, batch_size=batch_size,
                            seed=seed * 100003 + epoch, selection_lr=selection_lr,
                            weight_decay=weight_decay)
        proximal_step(state)
        dual_update(state)
        r = state.residual()
        state.rho *= rho_growth
        rows.append({"step": step, "event": "iter", "K": library.K, "epoch": epoch,
                     "loss": stats[-1]["loss"], "residual": r, "histogram": ""})
        log.info("step %d K=%d epoch %d loss %.5f residual %.5f", step, library.K, epoch,
                 stats[-1]["loss"], r)
        epoch += 1
        return r

    for step, new_k in enumerate(schedule.k_targets[1:]):
        for _ in range(schedule.epochs_per_step):
            admm_iter(step)
        assign = assignment_from_state(state, library)
        counts = assign.histogram()
        result.shrink_histograms.append((library.K, library.bits, counts))
        rows.append({"step": step, "event": "shrink", "K": library.K, "epoch": epoch,
                     "loss": rows[-1]["loss"], "residual": rows[-1]["residual"],
                     "histogram": _hist_text(library, counts)})
        old = library
        library, _ = shrink_library(library, assign.indices, new_k)
        state = start_step(net, (state, old), library, rho)

    step = len(schedule.k_targets) - 1
    for _ in range(schedule.admm_iters_final):
        result.final_residuals.append(admm_iter(step))

    assignment = assignment_from_state(state, library)
    masks = assignment.masks()
    mm = library.mask_matrix()
    for layer, z, m in zip(net.convs, state.z, masks):
        layer.weights = effective_kernels(layer.weights, z, mm) * m
    apply_hard_masks(net, masks)
    counts = assignment.histogram()
    rows.append({"step": step, "event": "final", "K": library.K, "epoch": epoch,
                 "loss": rows[-1]["loss"], "residual": rows[-1]["residual"],
                 "histogram": _hist_text(library, counts)})
    for _ in range(schedule.finetune_epochs):
        stats = train_epoch(net, data, lr, batch_size=batch_size, seed=seed * 100003 + epoch)
        rows.append({"step": step, "event": "finetune", "K": library.K, "epoch": epoch,
                     "loss": stats["loss"], "residual": 0.0, "histogram": ""})
        epoch += 1

    result.library = library
    result.assignment = assignment
    result.log = rows
    return result


def write_log_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "loss": repr(float(r["loss"])), "residual": repr(float(r["residual"]))})
