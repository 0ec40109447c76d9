"""3x3 pattern masks, pattern libraries and the steerable-filter integer approximations.

A mask is a 9-bit occupancy bitmap over the 3x3 grid, row-major: bit ``i`` is
position ``(i // 3, i % 3)``. Every pattern keeps exactly 4 positions.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

N_KEEP = 4
CENTER = 4
CORNERS = (0, 2, 6, 8)
EDGES = (1, 3, 5, 7)
LIBRARY_FORMAT_VERSION = 1


@dataclass(frozen=True, order=True)
class PatternMask:
    bits: int

    def __post_init__(self):
        if not 0 <= self.bits < 512:
            raise ValueError(f"pattern bitmap {self.bits} out of range [0, 512)")
        if bin(self.bits).count("1") != N_KEEP:
            raise ValueError(f"pattern bitmap {self.bits:#011b} must have exactly {N_KEEP} set bits")

    @classmethod
    def from_positions(cls, positions: Iterable[int]) -> "PatternMask":
        bits = 0
        for p in positions:
            bits |= 1 << int(p)
        return cls(bits)

    @property
    def positions(self) -> tuple[int, ...]:
        """Set positions in ascending bit order."""
        return tuple(i for i in range(9) if self.bits >> i & 1)

    def to_array(self, dtype=np.int64) -> np.ndarray:
        a = np.zeros(9, dtype=dtype)
        a[list(self.positions)] = 1
        return a.reshape(3, 3)

    def rotate90(self) -> "PatternMask":
        """Rotate the mask 90 degrees counter-clockwise."""
        return PatternMask.from_positions(
            int(p) for p in np.flatnonzero(np.rot90(self.to_array()).ravel())
        )

    def __repr__(self):
        return f"PatternMask({self.bits:#011b})"


@dataclass(frozen=True)
class PatternLibrary:
    masks: tuple[PatternMask, ...]

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        if not 1 <= len(self.masks) <= 126:
            raise ValueError(f"library size must be in [1, 126], got {len(self.masks)}")
        if len(set(self.masks)) != len(self.masks):
            raise ValueError("library masks must be distinct")

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "PatternLibrary":
        return cls(tuple(PatternMask(int(b)) for b in bits))

    @property
    def K(self) -> int:
        return len(self.masks)

    @property
    def bits(self) -> list[int]:
        return [m.bits for m in self.masks]

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    def canonical(self) -> "PatternLibrary":
        """Same masks in ascending bitmap order."""
        return PatternLibrary(tuple(sorted(self.masks)))

    def mask_matrix(self, dtype=np.float64) -> np.ndarray:
        """[K, 9] 0/1 matrix, row j is mask j flattened row-major."""
        return np.stack([m.to_array(dtype).ravel() for m in self.masks])

    def to_json(self) -> str:
        return json.dumps({"version": LIBRARY_FORMAT_VERSION, "masks": self.bits})

    @classmethod
    def from_json(cls, text: str) -> "PatternLibrary":
        doc = json.loads(text)
        if doc.get("version") != LIBRARY_FORMAT_VERSION:
            raise ValueError(f"unsupported library version {doc.get('version')!r}")
        return cls.from_bits(doc["masks"])


@dataclass(frozen=True)
class SteerableSpec:
    sigma_sq: float = 0.5
    p: float = 0.75
    n: int = 8

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")
        if self.n < 1:
            raise ValueError("n must be >= 1")


# ---------------------------------------------------------------------------
# Integer filter approximations
# ---------------------------------------------------------------------------

def binomial_1d() -> np.ndarray:
    """[1 2 1], the two-box-filter approximation of a 1-D Gaussian."""
    box = np.array([1, 1], dtype=np.int64)
    return np.convolve(box, box)


def gaussian_filter_3x3() -> np.ndarray:
    g = binomial_1d()
    return np.outer(g, g)


def log_filter_approx(which: str = "first") -> np.ndarray:
    """Integer 3x3 Laplacian-of-Gaussian approximations.

    ``first`` is the separable product of the central second difference with
    itself, ``second`` the cross-shaped sum of the horizontal and vertical
    second differences.
    """
    d2 = np.array([1, -2, 1], dtype=np.int64)
    if which == "first":
        return np.outer(d2, d2)
    if which == "second":
        out = np.zeros((3, 3), dtype=np.int64)
        out[1, :] += d2
        out[:, 1] += d2
        return out
    raise ValueError(f"which must be 'first' or 'second', got {which!r}")


def convolve2d_full(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact full 2-D convolution for small integer or float arrays."""
    ha, wa = a.shape
    hb, wb = b.shape
    dtype = np.result_type(a, b)
    out = np.zeros((ha + hb - 1, wa + wb - 1), dtype=dtype)
    for i in range(hb):
        for j in range(wb):
            out[i : i + ha, j : j + wa] += b[i, j] * a
    return out


def log_product() -> np.ndarray:
    """5x5 full convolution of the first and second LoG approximations."""
    return convolve2d_full(log_filter_approx("first"), log_filter_approx("second"))


def elog_filter() -> np.ndarray:
    """Enhanced LoG integer filter.

    Returned as a fixed matrix: normalizing :func:`log_product` does not
    reproduce these integers arithmetically, so the matrix is taken as given.
    It is the 90-degree symmetric cross with center/edge ratio 8.
    """
    return np.array([[0, 1, 0], [1, 8, 1], [0, 1, 0]], dtype=np.int64)


# ---------------------------------------------------------------------------
# Pattern sets
# ---------------------------------------------------------------------------

def enumerate_candidate_masks() -> PatternLibrary:
    """All C(9, 4) = 126 masks in ascending bitmap order."""
    return PatternLibrary.from_bits(
        sorted(sum(1 << p for p in combo) for combo in itertools.combinations(range(9), N_KEEP))
    )


def _adjacent_edges(corner: int) -> tuple[int, int]:
    r, c = divmod(corner, 3)
    return (r * 3 + 1, 3 + c)


def gaussian_pattern_set() -> PatternLibrary:
    """Four masks summing to the 3x3 binomial Gaussian.

    Each mask is center + one corner + the two edges adjacent to that corner,
    so the set is closed under 90 degree rotation.
    """
    masks = [PatternMask.from_positions((CENTER, c, *_adjacent_edges(c))) for c in CORNERS]
    return PatternLibrary(tuple(masks)).canonical()


def elog_pattern_set() -> PatternLibrary:
    """Four masks: center plus three of the four edges, each omitting a different edge."""
    masks = [PatternMask.from_positions((CENTER, *(e for e in EDGES if e != skip))) for skip in EDGES]
    return PatternLibrary(tuple(masks)).canonical()


def derived_library() -> PatternLibrary:
    merged = set(gaussian_pattern_set().masks) | set(elog_pattern_set().masks)
    return PatternLibrary(tuple(sorted(merged)))


def mask_sum(library: PatternLibrary) -> np.ndarray:
    return sum(m.to_array() for m in library.masks)


def mask_mean(library: PatternLibrary) -> np.ndarray:
    """Exact elementwise mean as a 3x3 object array of Fractions."""
    s = mask_sum(library)
    return np.array([[Fraction(int(v), library.K) for v in row] for row in s], dtype=object)


# ---------------------------------------------------------------------------
# Interpolation report
# ---------------------------------------------------------------------------

def _normalize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.linalg.norm(a)
    return a / n if n > 0 else a


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(_normalize(a).ravel(), _normalize(b).ravel()))


def self_convolve(kernel: np.ndarray, n: int) -> np.ndarray:
    out = np.asarray(kernel, dtype=np.float64)
    for _ in range(n - 1):
        out = convolve2d_full(out, np.asarray(kernel, dtype=np.float64))
    return out


def _same_masks(a: PatternLibrary, b: PatternLibrary) -> bool:
    return set(a.masks) == set(b.masks)


def interpolation_report(spec: SteerableSpec, library: PatternLibrary,
                         target: str | np.ndarray | None = None) -> dict:
    """Numeric comparison of an interpolated pattern set against a target filter.

    The composite is the mean mask convolved with itself ``spec.n`` times; it
    is compared (cosine of the L2-normalized arrays) with the target filter
    convolved with itself the same number of times. The target defaults to the
    Gaussian for the Gaussian set, ELoG for the ELoG set and the library's own
    mean mask otherwise; it can be given as ``"gaussian"``, ``"elog"`` or an
    explicit 3x3 array.

    The reported mean is the plain arithmetic mean of the masks. No threshold
    is enforced.
    """
    if library.K < 1:
        raise ValueError("library must be nonempty")
    mean = library.mask_matrix().mean(axis=0).reshape(3, 3)
    if target is None:
        if _same_masks(library, gaussian_pattern_set()):
            target = "gaussian"
        elif _same_masks(library, elog_pattern_set()):
            target = "elog"
        else:
            target = "self"
    if isinstance(target, str):
        name = target
        tgt = {"gaussian": gaussian_filter_3x3, "elog": elog_filter}.get(name, lambda: mean)()
    else:
        name = "explicit"
        tgt = np.asarray(target, dtype=np.float64)
    composite = self_convolve(mean, spec.n)
    target_n = self_convolve(tgt, spec.n)
    return {
        "target": name,
        "mean_mask": mean,
        "composite": _normalize(composite),
        "target_composite": _normalize(target_n),
        "cosine_single": _cosine(mean, tgt),
        "cosine": _cosine(composite, target_n),
        "n": spec.n,
        "p": spec.p,
        "interpretation": "n-fold self-convolution of the mean mask",
    }


def save_library(library: PatternLibrary, path) -> None:
    with open(path, "w") as f:
        f.write(library.to_json())
        f.write("\n")


def load_library(path) -> PatternLibrary:
    with open(path) as f:
        return PatternLibrary.from_json(f.read())


def positions_of(bits: int) -> Sequence[int]:
    return [i for i in range(9) if bits >> i & 1]
