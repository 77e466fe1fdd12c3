"""Multi-head attention: masked full form with a hand-written backward pass,
and the block-sparse form that is exact for non-overlapping row clusters.

Inputs are ``(..., t, d)``; leading axes are treated as a batch. Projections
use the row-vector convention ``Q = X @ wq + bq``.
"""

from __future__ import annotations

import contextlib
import contextvars
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .masks import AttentionMask, FreqMaskSpec
from .tensor import F32, Rng, ShapeError, masked_softmax, softmax, visibility_of

PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class UnsupportedConfigurationError(ValueError):
    pass


@dataclass
class AttentionParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    heads: int = 1

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in PARAM_NAMES:
            want = (d, d) if name.startswith("w") else (d,)
            if getattr(self, name).shape != want:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {want}")
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"heads={self.heads} does not divide d={d}")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def dtype(self):
        return self.wq.dtype

    @classmethod
    def init(cls, d: int, heads: int, rng: Rng, dtype=F32, std: float = 0.02) -> "AttentionParams":
        arrays = {}
        for name in PARAM_NAMES:
            if name.startswith("w"):
                arrays[name] = rng.truncated_normal((d, d), std, dtype)
            else:
                arrays[name] = np.zeros(d, dtype=dtype)
        return cls(**arrays, heads=heads)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def astype(self, dtype) -> "AttentionParams":
        return AttentionParams(**{n: a.astype(dtype) for n, a in self.as_dict().items()}, heads=self.heads)


@dataclass
class AttentionGrads:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    dx: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# score-buffer accounting

_active_counter: contextvars.ContextVar["ScoreBufferCounter | None"] = contextvars.ContextVar(
    "score_buffer_counter", default=None
)


class ScoreBufferCounter:
    """Tallies scalars held in attention score matrices allocated while active."""

    def __init__(self):
        self.scalars = 0
        self.allocations = 0
        self._lock = threading.Lock()

    def record(self, arr: np.ndarray) -> None:
        with self._lock:
            self.scalars += int(arr.size)
            self.allocations += 1


@contextlib.contextmanager
def count_score_buffers():
    counter = ScoreBufferCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _record(scores: np.ndarray) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.record(scores)


class ScoreCost(NamedTuple):
    full: int
    sparse: int | None
    macs_full: int
    macs_sparse: int | None


def score_buffer_cost(spec: FreqMaskSpec, d_head: int = 1) -> ScoreCost:
    """Per-head score scalars and MACs (QK^T plus weights @ V) for both schemes.

    Sparse figures exist only for v = 1.
    """
    t = spec.t
    full = t * t
    if spec.v != 1:
        return ScoreCost(full, None, 2 * full * d_head, None)
    k = spec.k
    sparse = k * t + sum((b - a) * (k + b - a) for a, b in spec.block_ranges())
    return ScoreCost(full, sparse, 2 * full * d_head, 2 * sparse * d_head)


# ---------------------------------------------------------------------------
# helpers


def _split_heads(y: np.ndarray, heads: int) -> np.ndarray:
    *lead, t, d = y.shape
    return y.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(y: np.ndarray) -> np.ndarray:
    *lead, heads, t, dh = y.shape
    return np.ascontiguousarray(y.swapaxes(-2, -3)).reshape(*lead, t, heads * dh)


def _check_input(x: np.ndarray, params: AttentionParams) -> None:
    if x.ndim < 2 or x.shape[-1] != params.d:
        raise ShapeError(f"input {x.shape} does not match attention width {params.d}")


def _project(x: np.ndarray, params: AttentionParams):
    h = params.heads
    q = _split_heads(x @ params.wq + params.bq, h)
    k = _split_heads(x @ params.wk + params.bk, h)
    v = _split_heads(x @ params.wv + params.bv, h)
    return q, k, v


def _scale(params: AttentionParams):
    return params.dtype.type(1.0 / np.sqrt(params.d_head))


def _visibility(mask, t: int) -> np.ndarray:
    if isinstance(mask, AttentionMask):
        vis = mask.visibility
    else:
        vis = visibility_of(np.asarray(mask))
    if vis.shape[-2:] != (t, t):
        raise ShapeError(f"mask of shape {vis.shape} for sequence length {t}")
    return vis


# ---------------------------------------------------------------------------
# full attention


@dataclass
class AttentionCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    context: np.ndarray


def attn_forward(x: np.ndarray, params: AttentionParams, mask=None) -> tuple[np.ndarray, AttentionCache]:
    """Full attention returning the cache needed by :func:`attn_backward`.

    ``mask`` is an :class:`AttentionMask`, an additive/boolean array, or
    None for unmasked attention.
    """
    _check_input(x, params)
    t = x.shape[-2]
    q, k, v = _project(x, params)
    scores = (q @ k.swapaxes(-1, -2)) * _scale(params)
    _record(scores)
    if mask is None:
        probs = softmax(scores)
    else:
        probs = masked_softmax(scores, _visibility(mask, t))
    context = _merge_heads(probs @ v)
    out = context @ params.wo + params.bo
    return out, AttentionCache(x, q, k, v, probs, context)


def attn_full(x: np.ndarray, params: AttentionParams, mask=None) -> np.ndarray:
    return attn_forward(x, params, mask)[0]


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def attn_backward(cache: AttentionCache, params: AttentionParams, upstream: np.ndarray) -> AttentionGrads:
    if upstream.shape != cache.x.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match output {cache.x.shape}")
    s = _scale(params)
    x2, up2 = _flat(cache.x), _flat(upstream)

    d_wo = _flat(cache.context).T @ up2
    d_bo = up2.sum(axis=0)
    d_ctx = _split_heads(upstream @ params.wo.T, params.heads)

    p = cache.probs
    d_p = d_ctx @ cache.v.swapaxes(-1, -2)
    d_v = p.swapaxes(-1, -2) @ d_ctx
    # softmax Jacobian; hidden entries have p = 0 and drop out
    d_s = p * (d_p - (d_p * p).sum(axis=-1, keepdims=True))
    d_s *= s
    d_q = _merge_heads(d_s @ cache.k)
    d_k = _merge_heads(d_s.swapaxes(-1, -2) @ cache.q)
    d_v = _merge_heads(d_v)

    dq2, dk2, dv2 = _flat(d_q), _flat(d_k), _flat(d_v)
    dx = d_q @ params.wq.T + d_k @ params.wk.T + d_v @ params.wv.T
    return AttentionGrads(
        wq=x2.T @ dq2, bq=dq2.sum(axis=0),
        wk=x2.T @ dk2, bk=dk2.sum(axis=0),
        wv=x2.T @ dv2, bv=dv2.sum(axis=0),
        wo=d_wo, bo=d_bo,
        dx=dx,
    )


def attn_full_backward(x: np.ndarray, params: AttentionParams, mask, upstream: np.ndarray) -> AttentionGrads:
    """Gradients of ``sum(attn_full(x, params, mask) * upstream)``."""
    _, cache = attn_forward(x, params, mask)
    return attn_backward(cache, params, upstream)


# ---------------------------------------------------------------------------
# sparse attention


def _attend(q, k, v, s):
    scores = (q @ k.swapaxes(-1, -2)) * s
    _record(scores)
    return softmax(scores) @ v


def _map_ordered(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = contextvars.copy_context()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda it: ctx.copy().run(fn, it), items))


def _check_partition(blocks, t: int, start: int = 0) -> None:
    pos = start
    for a, b in blocks:
        if a != pos or b <= a:
            raise ValueError(f"blocks {list(blocks)} do not partition [{start}, {t})")
        pos = b
    if pos != t:
        raise ValueError(f"blocks {list(blocks)} do not partition [{start}, {t})")


def attn_sparse_local(
    x: np.ndarray,
    blocks,
    params: AttentionParams,
    scale: float | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Attention computed independently inside each ``[start, stop)`` block.

    ``blocks`` must partition the sequence axis in order. No score between
    two different blocks is ever formed.
    """
    _check_input(x, params)
    _check_partition(blocks, x.shape[-2])
    s = _scale(params) if scale is None else params.dtype.type(scale)
    q, k, v = _project(x, params)
    parts = _map_ordered(
        lambda ab: _attend(q[..., ab[0]:ab[1], :], k[..., ab[0]:ab[1], :], v[..., ab[0]:ab[1], :], s),
        list(blocks),
        workers,
    )
    return _merge_heads(np.concatenate(parts, axis=-2)) @ params.wo + params.bo


def attn_sparse_frito(x: np.ndarray, params: AttentionParams, spec: FreqMaskSpec, workers: int = 1) -> np.ndarray:
    """Block-sparse evaluation of frequency-masked attention for ``v == 1``.

    Global queries attend over the whole sequence. Queries in a row cluster
    attend over the global tokens followed by their own cluster, with values
    gathered from the same positions. Equal to ``attn_full`` under
    ``build_mask(spec)`` up to float rounding.
    """
    if spec.v != 1:
        raise UnsupportedConfigurationError(
            f"sparse attention needs v == 1 (got v={spec.v}); use attn_full with build_mask"
        )
    _check_input(x, params)
    if x.shape[-2] != spec.t:
        raise ShapeError(f"sequence length {x.shape[-2]} does not match mask spec t={spec.t}")
    s = _scale(params)
    q, k, v = _project(x, params)
    g = spec.k
    k_g, v_g = k[..., :g, :], v[..., :g, :]

    def block(ab):
        a, b = ab
        keys = np.concatenate([k_g, k[..., a:b, :]], axis=-2)
        vals = np.concatenate([v_g, v[..., a:b, :]], axis=-2)
        return _attend(q[..., a:b, :], keys, vals, s)

    parts = []
    if g:
        parts.append(_attend(q[..., :g, :], k, v, s))
    parts.extend(_map_ordered(block, spec.block_ranges(), workers))
    return _merge_heads(np.concatenate(parts, axis=-2)) @ params.wo + params.bo
