"""Spectrogram patch grid, sequence indexing and patch embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import F32, Rng, ShapeError


@dataclass(frozen=True)
class PatchGrid:
    """h frequency rows by w time columns of (patch_f x patch_t) patches, k global tokens."""

    h: int
    w: int
    patch_f: int = 4
    patch_t: int = 4
    k: int = 1
    d: int = 32

    def __post_init__(self):
        for name in ("h", "w", "patch_f", "patch_t", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k < 0:
            raise ValueError("k must be >= 0")

    @property
    def t(self) -> int:
        return self.k + self.h * self.w

    @property
    def patch_dim(self) -> int:
        return self.patch_f * self.patch_t

    @property
    def mels(self) -> int:
        return self.h * self.patch_f

    @property
    def frames(self) -> int:
        return self.w * self.patch_t


@dataclass
class PositionalEncoding:
    freq_table: np.ndarray  # h x d
    time_table: np.ndarray  # w x d

    @classmethod
    def init(cls, grid: PatchGrid, rng: Rng, dtype=F32) -> "PositionalEncoding":
        return cls(rng.normal((grid.h, grid.d), 0.02, dtype), rng.normal((grid.w, grid.d), 0.02, dtype))

    def table(self) -> np.ndarray:
        """(h*w) x d encodings in sequence order."""
        h, d = self.freq_table.shape
        w = self.time_table.shape[0]
        return (self.freq_table[:, None, :] + self.time_table[None, :, :]).reshape(h * w, d)


def seq_index(grid: PatchGrid, a: int, b: int) -> int:
    """0-based sequence index of patch (a, b), with a and b 1-based."""
    if not (1 <= a <= grid.h and 1 <= b <= grid.w):
        raise IndexError(f"patch ({a}, {b}) outside {grid.h}x{grid.w} grid")
    return grid.k + (a - 1) * grid.w + (b - 1)


def freq_row(idx, w: int, k: int):
    """0-based frequency row of sequence index ``idx`` (negative for global tokens)."""
    return np.floor_divide(np.asarray(idx) - k, w)


def patchify(grid: PatchGrid, spec: np.ndarray) -> np.ndarray:
    """Split ``(..., mels, frames)`` into ``(..., h*w, patch_f*patch_t)``.

    Trailing mel bins and frames that do not fill a whole patch are dropped.
    """
    mels, frames = spec.shape[-2:]
    if mels < grid.mels or frames < grid.frames:
        raise ShapeError(
            f"spectrogram {mels}x{frames} too small for {grid.h}x{grid.w} grid of "
            f"{grid.patch_f}x{grid.patch_t} patches"
        )
    lead = spec.shape[:-2]
    x = spec[..., : grid.mels, : grid.frames]
    x = x.reshape(*lead, grid.h, grid.patch_f, grid.w, grid.patch_t)
    x = np.moveaxis(x, -3, -2)  # (..., h, w, patch_f, patch_t)
    return np.ascontiguousarray(x).reshape(*lead, grid.h * grid.w, grid.patch_dim)


def embed(
    grid: PatchGrid,
    spec: np.ndarray,
    proj: np.ndarray,
    pos: PositionalEncoding,
    globals_: np.ndarray,
    proj_bias: np.ndarray | None = None,
) -> np.ndarray:
    """Token sequence ``(..., t, d)``: global tokens, then projected patches plus positions."""
    if proj.shape != (grid.patch_dim, grid.d):
        raise ShapeError(f"projection {proj.shape}, expected {(grid.patch_dim, grid.d)}")
    if globals_.shape != (grid.k, grid.d):
        raise ShapeError(f"global tokens {globals_.shape}, expected {(grid.k, grid.d)}")
    patches = patchify(grid, spec.astype(proj.dtype, copy=False))
    tokens = patches @ proj + pos.table()
    if proj_bias is not None:
        tokens = tokens + proj_bias
    lead = tokens.shape[:-2]
    g = np.broadcast_to(globals_, (*lead, grid.k, grid.d))
    return np.concatenate([g, tokens], axis=-2)
