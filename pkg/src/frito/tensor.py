"""Dense tensor helpers, a seeded RNG and the FRT1 binary tensor format.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32 or
float64. The functions here add the shape checks and error types the rest of
the package relies on; arithmetic itself is delegated to numpy.
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
DTYPES = (F32, F64)

FRT1_MAGIC = b"FRT1"
_DTYPE_CODES = {F32: 0, F64: 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sBBH")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class FullyMaskedRowError(ValueError):
    """A softmax row has no visible entry."""


class TensorFormatError(ValueError):
    """Base class for FRT1 decoding failures."""


class BadMagicError(TensorFormatError):
    pass


class DtypeCodeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    def __init__(self, expected: int, actual: int, what: str = "payload"):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


# ---------------------------------------------------------------------------
# RNG


class Rng:
    """Deterministic generator: numpy's PCG64 seeded through ``SeedSequence``.

    ``Rng(seed, *keys)`` hashes ``[seed, *keys]`` with SeedSequence, so
    independent named substreams are derived with ``rng.child(key)`` or by
    constructing with extra integer keys. PCG64 output is identical on every
    platform numpy supports.
    """

    algorithm = "PCG64/SeedSequence"

    def __init__(self, seed: int, *keys: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, shape, std: float = 1.0, dtype=F32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def truncated_normal(self, shape, std: float = 0.02, dtype=F32) -> np.ndarray:
        # resample anything beyond two standard deviations
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return (out * std).astype(dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# arithmetic


def as_tensor(x, dtype=F32) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.dtype not in DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def visibility_of(mask: np.ndarray) -> np.ndarray:
    """Boolean visibility from an additive {0, -inf} mask (booleans pass through)."""
    if mask.dtype == np.bool_:
        return mask
    return mask == 0


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to entries where ``mask`` is 0.

    ``mask`` is an additive {0, -inf} tensor or a boolean visibility tensor,
    broadcastable against ``scores``. The row maximum is taken over visible
    entries only; hidden entries come out exactly 0.
    """
    visible = visibility_of(mask)
    if not np.all(visible.any(axis=-1)):
        raise FullyMaskedRowError("attention row has no visible entry")
    visible = np.broadcast_to(visible, scores.shape)
    m = np.where(visible, scores, -np.inf).max(axis=-1, keepdims=True)
    e = np.exp(np.where(visible, scores - m, -np.inf))
    return e / e.sum(axis=-1, keepdims=True)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}, {bias.shape} do not match width {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
    return a + b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * a.dtype.type(s)


def _check_axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def transpose(a: np.ndarray, axes: Sequence[int] | None = None) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(a, axes))


def slice_axis(a: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    axis = _check_axis(a.ndim, axis)
    if not 0 <= start <= stop <= a.shape[axis]:
        raise IndexError(f"slice [{start}:{stop}] out of range for axis of size {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return np.ascontiguousarray(a[tuple(idx)])


def concat(tensors: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0]
    axis = _check_axis(ref.ndim, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ShapeError(f"concat along axis {axis}: {ref.shape} vs {t.shape}")
    return np.concatenate(tensors, axis=axis)


def argmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.argmax(a, axis=_check_axis(a.ndim, axis))


# ---------------------------------------------------------------------------
# FRT1 serialization


def tensor_to_bytes(t: np.ndarray) -> bytes:
    dtype = np.dtype(t.dtype)
    if dtype not in _DTYPE_CODES:
        raise TypeError(f"FRT1 stores float32/float64 only, got {dtype}")
    if t.ndim > 255:
        raise ValueError("too many dimensions for FRT1")
    header = _HEADER.pack(FRT1_MAGIC, _DTYPE_CODES[dtype], t.ndim, 0)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=dtype.newbyteorder("<")).tobytes()
    return header + dims + payload


def tensor_from_bytes(buf: bytes, *, exact: bool = True) -> tuple[np.ndarray, int]:
    """Decode one FRT1 tensor from the front of ``buf``.

    Returns the tensor and the number of bytes consumed. With ``exact`` any
    trailing bytes are an error.
    """
    if len(buf) < _HEADER.size:
        if len(buf) >= 4 and buf[:4] != FRT1_MAGIC:
            raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
        raise TruncatedPayloadError(_HEADER.size, len(buf), "header")
    magic, code, ndim, reserved = _HEADER.unpack_from(buf, 0)
    if magic != FRT1_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {FRT1_MAGIC!r}")
    if code not in _CODE_DTYPES:
        raise DtypeCodeError(f"unknown dtype code {code}")
    if reserved != 0:
        raise TensorFormatError(f"reserved header bytes must be zero, got {reserved}")
    pos = _HEADER.size
    dims_end = pos + 8 * ndim
    if len(buf) < dims_end:
        raise TruncatedPayloadError(dims_end, len(buf), "dims")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    end = dims_end + nbytes
    if len(buf) < end:
        raise TruncatedPayloadError(nbytes, len(buf) - dims_end)
    if exact and len(buf) != end:
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize, offset=dims_end)
    return arr.astype(dtype).reshape(shape), end


def tensor_write(t: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def tensor_read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    return tensor_from_bytes(buf)[0]
