"""Frequency-regularized attention masks.

Patch tokens are grouped by frequency row into clusters of ``r`` consecutive
rows. Two patch tokens see each other when their cluster indices differ by
less than the overlap factor ``v``; global tokens see and are seen by
everything. Time columns play no role.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .patches import PatchGrid, freq_row


@dataclass(frozen=True)
class FreqMaskSpec:
    h: int
    w: int
    k: int
    r: int = 1
    v: int = 1

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.h}x{self.w}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.v < 1:
            raise ValueError(f"v must be >= 1, got {self.v}")

    @classmethod
    def for_grid(cls, grid: PatchGrid, r: int, v: int) -> "FreqMaskSpec":
        return cls(grid.h, grid.w, grid.k, r, v)

    @property
    def t(self) -> int:
        return self.k + self.h * self.w

    @property
    def n_clusters(self) -> int:
        return -(-self.h // self.r)

    def block_ranges(self) -> list[tuple[int, int]]:
        """Sequence ranges ``[start, stop)`` of each row cluster's patch tokens."""
        out = []
        for c in range(self.n_clusters):
            lo = c * self.r
            hi = min(lo + self.r, self.h)
            out.append((self.k + lo * self.w, self.k + hi * self.w))
        return out


def _cluster_of(spec: FreqMaskSpec, idx: np.ndarray) -> np.ndarray:
    return np.floor_divide(freq_row(idx, spec.w, spec.k), spec.r)


def visible(spec: FreqMaskSpec, i: int, j: int) -> bool:
    t = spec.t
    if not (0 <= i < t and 0 <= j < t):
        raise IndexError(f"index pair ({i}, {j}) outside sequence of length {t}")
    if i < spec.k or j < spec.k:
        return True
    ci = int(_cluster_of(spec, i))
    cj = int(_cluster_of(spec, j))
    return abs(ci - cj) < spec.v


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Immutable t x t visibility pattern.

    ``visibility`` is the boolean form (True = may attend); ``additive()``
    renders the {0, -inf} form. ``blocks`` holds the disjoint patch ranges
    when the pattern is block diagonal (v = 1), else None.
    """

    t: int
    visibility: np.ndarray
    blocks: tuple[tuple[int, int], ...] | None = None
    k: int = 0

    def additive(self, dtype=np.float32, hidden: float = -np.inf) -> np.ndarray:
        out = np.zeros((self.t, self.t), dtype=dtype)
        out[~self.visibility] = hidden
        return out

    def ascii(self, shown: str = "#", hidden: str = ".") -> str:
        return "\n".join("".join(shown if x else hidden for x in row) for row in self.visibility)

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.t == other.t and np.array_equal(self.visibility, other.visibility)

    __hash__ = None


@functools.lru_cache(maxsize=64)
def build_mask(spec: FreqMaskSpec) -> AttentionMask:
    """Compile ``spec`` into its mask; cached per spec since it is input independent."""
    idx = np.arange(spec.t)
    cluster = _cluster_of(spec, idx)
    is_global = idx < spec.k
    vis = np.abs(cluster[:, None] - cluster[None, :]) < spec.v
    vis |= is_global[:, None] | is_global[None, :]
    vis.flags.writeable = False
    blocks = tuple(spec.block_ranges()) if spec.v == 1 else None
    return AttentionMask(spec.t, vis, blocks, spec.k)


def oracle_mask(spec: FreqMaskSpec) -> AttentionMask:
    """Reference mask built by opening each visibility window directly.

    Every cluster start row ``i`` in ``0, r, 2r, ...`` opens the square
    ``[i*w + k, (i + r*v)*w + k)`` of the sequence (clipped at the end), and
    the first ``k`` rows and columns are opened for the global tokens. Test
    use only.
    """
    t = spec.t
    if t > 4096:
        raise ValueError("oracle_mask is meant for test-scale sequences (t <= 4096)")
    vis = np.zeros((t, t), dtype=bool)
    for i in range(0, (spec.h - 1) // spec.r * spec.r + 1, spec.r):
        lo = i * spec.w + spec.k
        hi = min((i + spec.r * spec.v) * spec.w + spec.k, t)
        vis[lo:hi, lo:hi] = True
    vis[: spec.k, :] = True
    vis[:, : spec.k] = True
    return AttentionMask(t, vis, None, spec.k)
