"""Small frequency-regularized ViT encoder with manual gradients and checkpoints.

Pipeline: patch embedding plus disentangled positions, ``depth`` pre-norm
blocks (layernorm, attention, residual, layernorm, GELU MLP, residual), mean
of the global tokens, linear head. Attention runs in one of three modes:

* ``full``    dense scores with the frequency mask applied
* ``sparse``  block-sparse evaluation (v = 1 only), inference only
* ``vanilla`` dense scores, no mask
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import attention as attn
from .kvfile import format_kv, parse_kv
from .masks import FreqMaskSpec, build_mask
from .patches import PatchGrid, PositionalEncoding, embed, patchify
from .tensor import F32, Rng, TensorFormatError, gelu, gelu_grad, tensor_from_bytes, tensor_to_bytes

MODES = ("full", "sparse", "vanilla")
FORMAT_VERSION = 1
LN_EPS = 1e-5
_MAGIC = b"FRCKPT"


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, name: str, got, expected):
        super().__init__(f"tensor {name!r} has shape {tuple(got)}, expected {tuple(expected)}")
        self.name = name


class CorruptContainerError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    grid: PatchGrid
    mask_spec: FreqMaskSpec
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 4
    classes: int = 4
    seed: int = 0

    def __post_init__(self):
        g, m = self.grid, self.mask_spec
        if (m.h, m.w, m.k) != (g.h, g.w, g.k):
            raise ValueError(f"mask spec grid {(m.h, m.w, m.k)} differs from patch grid {(g.h, g.w, g.k)}")
        if self.heads < 1 or g.d % self.heads:
            raise ValueError(f"heads={self.heads} does not divide d={g.d}")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.depth < 0 or self.mlp_ratio < 1:
            raise ValueError("depth must be >= 0 and mlp_ratio >= 1")

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.grid.d

    def with_mask(self, r: int, v: int) -> "EncoderConfig":
        return replace(self, mask_spec=FreqMaskSpec.for_grid(self.grid, r, v))

    @classmethod
    def build(cls, h, w, *, patch_f=4, patch_t=4, k=1, d=32, r=1, v=1, **kw) -> "EncoderConfig":
        grid = PatchGrid(h, w, patch_f, patch_t, k, d)
        return cls(grid, FreqMaskSpec.for_grid(grid, r, v), **kw)

    def to_kv(self) -> dict[str, int]:
        g, m = self.grid, self.mask_spec
        return {
            "h": g.h, "w": g.w, "patch_f": g.patch_f, "patch_t": g.patch_t, "k": g.k, "d": g.d,
            "r": m.r, "v": m.v, "depth": self.depth, "heads": self.heads,
            "mlp_ratio": self.mlp_ratio, "classes": self.classes, "seed": self.seed,
        }

    @classmethod
    def from_kv(cls, kv: dict) -> "EncoderConfig":
        vals = {k: int(kv[k]) for k in cls.build(1, 1).to_kv()}
        h, w = vals.pop("h"), vals.pop("w")
        return cls.build(h, w, **vals)


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    g, d = cfg.grid, cfg.d
    shapes = {
        "embed.proj_w": (g.patch_dim, d),
        "embed.proj_b": (d,),
        "pos.freq": (g.h, d),
        "pos.time": (g.w, d),
        "globals": (g.k, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for n in attn.PARAM_NAMES:
            shapes[p + "attn." + n] = (d, d) if n.startswith("w") else (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w1"] = (d, cfg.hidden)
        shapes[p + "mlp.b1"] = (cfg.hidden,)
        shapes[p + "mlp.w2"] = (cfg.hidden, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["head.w"] = (d, cfg.classes)
    shapes["head.b"] = (cfg.classes,)
    return shapes


def init_params(cfg: EncoderConfig, dtype=F32) -> dict[str, np.ndarray]:
    rng = Rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("pos.freq", "pos.time", "globals"):
            params[name] = rng.normal(shape, 0.02, dtype)
        elif leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 2:
            params[name] = rng.truncated_normal(shape, 0.02, dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION

    @classmethod
    def init(cls, cfg: EncoderConfig, dtype=F32) -> "Checkpoint":
        return cls(cfg, init_params(cfg, dtype))

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, self.format_version)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()}, self.format_version)

    def with_mask(self, spec: FreqMaskSpec) -> "Checkpoint":
        g = self.config.grid
        if (spec.h, spec.w, spec.k) != (g.h, g.w, g.k):
            raise ValueError(f"mask spec grid {(spec.h, spec.w, spec.k)} differs from {(g.h, g.w, g.k)}")
        return Checkpoint(replace(self.config, mask_spec=spec), self.params, self.format_version)

    @property
    def dtype(self):
        return self.params["embed.proj_w"].dtype


# ---------------------------------------------------------------------------
# forward / backward


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _attn_params(params, prefix, heads) -> attn.AttentionParams:
    return attn.AttentionParams(**{n: params[prefix + n] for n in attn.PARAM_NAMES}, heads=heads)


def _check_mode(cfg: EncoderConfig, mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "sparse" and cfg.mask_spec.v != 1:
        raise attn.UnsupportedConfigurationError(
            f"sparse mode needs v == 1, checkpoint mask has v={cfg.mask_spec.v}; use mode='full'"
        )


def _embed(ckpt: Checkpoint, spec: np.ndarray) -> np.ndarray:
    p, g = ckpt.params, ckpt.config.grid
    pos = PositionalEncoding(p["pos.freq"], p["pos.time"])
    return embed(g, spec, p["embed.proj_w"], pos, p["globals"], p["embed.proj_b"])


def encode(ckpt: Checkpoint, spec: np.ndarray, mode: str = "full", keep_cache: bool = False):
    """Token states after all blocks, ``(..., t, d)``; with ``keep_cache`` also the backward cache."""
    cfg = ckpt.config
    _check_mode(cfg, mode)
    if keep_cache and mode == "sparse":
        raise attn.UnsupportedConfigurationError("sparse mode is inference only")
    p = ckpt.params
    mask = build_mask(cfg.mask_spec) if mode == "full" else None
    x = _embed(ckpt, spec)
    caches = []
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        ap = _attn_params(p, pre + "attn.", cfg.heads)
        h1, ln1 = _ln_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        if mode == "sparse":
            a, acache = attn.attn_sparse_frito(h1, ap, cfg.mask_spec), None
        else:
            a, acache = attn.attn_forward(h1, ap, mask)
        x1 = x + a
        h2, ln2 = _ln_forward(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        z = h2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
        act = gelu(z)
        x = x1 + act @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        if keep_cache:
            caches.append((ln1, acache, ln2, h2, z, act))
    return (x, caches) if keep_cache else x


def _head(ckpt: Checkpoint, tokens: np.ndarray):
    k = ckpt.config.grid.k
    if k < 1:
        raise ValueError("classification head needs at least one global token")
    pooled = tokens[..., :k, :].mean(axis=-2)
    return pooled @ ckpt.params["head.w"] + ckpt.params["head.b"], pooled


def forward(ckpt: Checkpoint, spec: np.ndarray, mode: str = "full") -> np.ndarray:
    """Logits for one spectrogram ``(mels, frames)`` or a batch ``(B, mels, frames)``."""
    return _head(ckpt, encode(ckpt, spec, mode))[0]


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits2 = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits2.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels {labels.tolist()} invalid for {c} classes")
    shifted = logits2 - logits2.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.reshape(logits.shape).astype(logits.dtype)


def forward_backward(ckpt: Checkpoint, spec: np.ndarray, label) -> tuple[float, dict[str, np.ndarray]]:
    """Loss (mean over the batch) and gradients for every named tensor, full-masked mode."""
    cfg, p = ckpt.config, ckpt.params
    k = cfg.grid.k
    tokens, caches = encode(ckpt, spec, "full", keep_cache=True)
    logits, pooled = _head(ckpt, tokens)
    loss, dlogits = cross_entropy(logits, label)

    grads = {}
    grads["head.w"] = pooled.reshape(-1, cfg.d).T @ dlogits.reshape(-1, cfg.classes)
    grads["head.b"] = dlogits.reshape(-1, cfg.classes).sum(axis=0)
    dx = np.zeros_like(tokens)
    dx[..., :k, :] = (dlogits @ p["head.w"].T)[..., None, :] / k

    for i in reversed(range(cfg.depth)):
        pre = f"blocks.{i}."
        ln1, acache, ln2, h2, z, act = caches[i]
        grads[pre + "mlp.w2"] = act.reshape(-1, cfg.hidden).T @ dx.reshape(-1, cfg.d)
        grads[pre + "mlp.b2"] = dx.reshape(-1, cfg.d).sum(axis=0)
        dz = (dx @ p[pre + "mlp.w2"].T) * gelu_grad(z)
        grads[pre + "mlp.w1"] = h2.reshape(-1, cfg.d).T @ dz.reshape(-1, cfg.hidden)
        grads[pre + "mlp.b1"] = dz.reshape(-1, cfg.hidden).sum(axis=0)
        dh2 = dz @ p[pre + "mlp.w1"].T
        dx1, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _ln_backward(dh2, ln2, p[pre + "ln2.g"])
        dx1 = dx1 + dx

        ag = attn.attn_backward(acache, _attn_params(p, pre + "attn.", cfg.heads), dx1)
        for n in attn.PARAM_NAMES:
            grads[pre + "attn." + n] = getattr(ag, n)
        dx0, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _ln_backward(ag.dx, ln1, p[pre + "ln1.g"])
        dx = dx0 + dx1

    g = cfg.grid
    dpatch = dx[..., k:, :]
    patches = patchify(g, spec.astype(ckpt.dtype, copy=False))
    grads["embed.proj_w"] = patches.reshape(-1, g.patch_dim).T @ dpatch.reshape(-1, g.d)
    grads["embed.proj_b"] = dpatch.reshape(-1, g.d).sum(axis=0)
    grid4 = dpatch.reshape(-1, g.h, g.w, g.d)
    grads["pos.freq"] = grid4.sum(axis=(0, 2))
    grads["pos.time"] = grid4.sum(axis=(0, 1))
    grads["globals"] = dx[..., :k, :].reshape(-1, k, g.d).sum(axis=0)
    return loss, {name: grads[name].astype(ckpt.dtype, copy=False) for name in p}


# ---------------------------------------------------------------------------
# checkpoint container
#
# header line  b"FRCKPT <format_version> <manifest_bytes>\n"
# manifest     key=value text: config.<field>=<int>, and per tensor
#              tensor.<name>=<dtype> <dims comma separated> <offset> <nbytes>
# payload      concatenated FRT1 blobs; offsets are relative to payload start


def _dims(shape) -> str:
    return ",".join(str(s) for s in shape)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    manifest = {f"config.{k}": v for k, v in ckpt.config.to_kv().items()}
    blobs, offset = [], 0
    for name, arr in ckpt.params.items():
        blob = tensor_to_bytes(arr)
        manifest[f"tensor.{name}"] = f"{arr.dtype.name} {_dims(arr.shape)} {offset} {len(blob)}"
        blobs.append(blob)
        offset += len(blob)
    text = format_kv(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC + f" {ckpt.format_version} {len(text)}\n".encode("ascii"))
        f.write(text)
        for blob in blobs:
            f.write(blob)


def _parse_dims(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",")) if s else ()


def load_checkpoint(path: str | os.PathLike, mask_spec: FreqMaskSpec | None = None) -> Checkpoint:
    """Read a checkpoint, validating every tensor against the embedded config.

    ``mask_spec`` replaces the stored mask parameters; it must keep the
    same (h, w, k).
    """
    with open(path, "rb") as f:
        buf = f.read()
    nl = buf.find(b"\n")
    if not buf.startswith(_MAGIC + b" ") or nl < 0:
        raise CorruptContainerError("not a checkpoint container (bad header)")
    try:
        _, version, mlen = buf[:nl].decode("ascii").split()
        version, mlen = int(version), int(mlen)
    except ValueError:
        raise CorruptContainerError("malformed checkpoint header") from None
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format_version {version}, this build reads {FORMAT_VERSION}")
    start = nl + 1
    if len(buf) < start + mlen:
        raise CorruptContainerError(f"manifest truncated: expected {mlen} bytes, got {len(buf) - start}")
    try:
        manifest = parse_kv(buf[start : start + mlen].decode("utf-8"))
        cfg = EncoderConfig.from_kv({k[7:]: v for k, v in manifest.items() if k.startswith("config.")})
    except (ValueError, KeyError) as e:
        raise CorruptContainerError(f"bad manifest: {e}") from None
    payload = memoryview(buf)[start + mlen :]

    expected = param_shapes(cfg)
    entries = {k[7:]: v for k, v in manifest.items() if k.startswith("tensor.")}
    unknown = set(entries) - set(expected)
    if unknown:
        raise CorruptContainerError(f"unexpected tensors {sorted(unknown)}")
    params = {}
    for name, want in expected.items():
        if name not in entries:
            raise CorruptContainerError(f"missing tensor {name!r}")
        try:
            _, dims, off, nbytes = entries[name].split()
            shape, off, nbytes = _parse_dims(dims), int(off), int(nbytes)
        except ValueError:
            raise CorruptContainerError(f"bad manifest entry for {name!r}") from None
        if shape != want:
            raise CheckpointShapeError(name, shape, want)
        if off < 0 or off + nbytes > len(payload):
            raise CorruptContainerError(f"tensor {name!r} payload out of bounds")
        try:
            arr, _ = tensor_from_bytes(bytes(payload[off : off + nbytes]))
        except TensorFormatError as e:
            raise CorruptContainerError(f"tensor {name!r}: {e}") from e
        if arr.shape != want:
            raise CheckpointShapeError(name, arr.shape, want)
        params[name] = arr
    ckpt = Checkpoint(cfg, params, version)
    return ckpt.with_mask(mask_spec) if mask_spec is not None else ckpt
