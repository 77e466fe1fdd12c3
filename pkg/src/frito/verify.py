"""Oracle suites behind ``frito verify``: mask equivalence, sparse/full
equivalence and finite-difference gradient checks."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, attn_full, attn_full_backward, attn_sparse_frito
from .masks import FreqMaskSpec, build_mask, oracle_mask
from .model import Checkpoint, EncoderConfig, forward, forward_backward
from .tensor import F32, F64, Rng

FD_STEP = 1e-5
GRAD_RTOL = 1e-4
# relative-error denominators are floored here, so entries below the floor are
# held to an absolute error of GRAD_RTOL * GRAD_FLOOR; gradients that vanish
# identically (the key bias) would otherwise divide rounding noise by ~0
GRAD_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def central_difference(f, arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr``, perturbing in place."""
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        out[idx] = (fp - fm) / (2 * step)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def mask_grid(max_hw: int = 8, max_k: int = 3, max_v: int = 4):
    for h, w in itertools.product(range(1, max_hw + 1), repeat=2):
        for k, r, v in itertools.product(range(max_k + 1), range(1, h + 1), range(1, max_v + 1)):
            yield FreqMaskSpec(h, w, k, r, v)


def check_mask_grid(max_hw: int = 8) -> CheckResult:
    n = 0
    for spec in mask_grid(max_hw):
        n += 1
        if build_mask(spec) != oracle_mask(spec):
            return CheckResult("mask-oracle-grid", False, f"mismatch at {spec}")
    return CheckResult("mask-oracle-grid", True, f"{n} specs agree")


EQUIV_SPECS = (
    FreqMaskSpec(5, 2, 1, 3, 1),
    FreqMaskSpec(5, 2, 0, 1, 1),
    FreqMaskSpec(6, 3, 2, 2, 1),
    FreqMaskSpec(4, 4, 1, 4, 1),
    FreqMaskSpec(7, 2, 3, 3, 1),
    FreqMaskSpec(8, 8, 1, 2, 1),
)


def sparse_full_gap(spec: FreqMaskSpec, seed: int, dtype, d: int = 8, heads: int = 2) -> float:
    rng = Rng(seed, spec.h, spec.w, spec.k, spec.r)
    x = rng.normal((spec.t, d), 1.0, dtype)
    params = AttentionParams.init(d, heads, rng, dtype, std=0.5)
    params = AttentionParams(**{n: a + rng.normal(a.shape, 0.1, dtype) for n, a in params.as_dict().items()}, heads=heads)
    full = attn_full(x, params, build_mask(spec))
    sparse = attn_sparse_frito(x, params, spec)
    return float(np.abs(full - sparse).max())


def check_sparse_equivalence(seeds: int = 20, specs=EQUIV_SPECS) -> list[CheckResult]:
    out = []
    for dtype, tol in ((F32, 1e-5), (F64, 1e-10)):
        worst = max(sparse_full_gap(s, seed, dtype) for s in specs for seed in range(seeds))
        out.append(CheckResult(f"sparse-equivalence-{dtype.name}", worst <= tol, f"max gap {worst:.3g} (tol {tol:g})"))
    return out


def tiny_model_config(r: int = 1, v: int = 1, k: int = 1) -> EncoderConfig:
    return EncoderConfig.build(3, 2, patch_f=2, patch_t=2, k=k, d=8, r=r, v=v, depth=1, heads=2, classes=3, seed=3)


def check_model_equivalence(seeds: int = 5) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        cfg = EncoderConfig.build(6, 4, patch_f=2, patch_t=2, k=1, d=16, r=2, v=1, depth=2, heads=2, classes=5, seed=seed)
        ckpt = Checkpoint.init(cfg)
        rng = Rng(seed, 99)
        ckpt = Checkpoint(cfg, {n: a + rng.normal(a.shape, 0.2) for n, a in ckpt.params.items()})
        x = rng.normal((4, 12, 8), 1.0)
        worst = max(worst, float(np.abs(forward(ckpt, x, "full") - forward(ckpt, x, "sparse")).max()))
    return CheckResult("model-logit-equivalence", worst <= 1e-4, f"max logit gap {worst:.3g} (tol 1e-4)")


def attention_grad_error(seed: int = 0, d: int = 8, heads: int = 2, spec: FreqMaskSpec | None = None) -> float:
    rng = Rng(seed, 7)
    spec = spec or FreqMaskSpec(3, 2, 1, 1, 2)
    t = spec.t
    x = rng.normal((t, d), 1.0, F64)
    params = AttentionParams.init(d, heads, rng, F64, std=0.5)
    for a in params.as_dict().values():
        a += rng.normal(a.shape, 0.1, F64)
    up = rng.normal((t, d), 1.0, F64)
    mask = build_mask(spec)
    grads = attn_full_backward(x, params, mask, up)

    def loss():
        return float((attn_full(x, params, mask) * up).sum())

    worst = rel_error(grads.dx, central_difference(loss, x))
    for name, arr in params.as_dict().items():
        worst = max(worst, rel_error(getattr(grads, name), central_difference(loss, arr)))
    return worst


def model_grad_error(seed: int = 0) -> float:
    cfg = tiny_model_config(r=1, v=2)
    ckpt = Checkpoint.init(cfg, F64)
    rng = Rng(seed, 11)
    for a in ckpt.params.values():
        a += rng.normal(a.shape, 0.3, F64)
    x = rng.normal((2, 6, 4), 1.0, F64)
    labels = np.array([0, 2])
    _, grads = forward_backward(ckpt, x, labels)
    worst = 0.0
    for name, arr in ckpt.params.items():
        num = central_difference(lambda: forward_backward(ckpt, x, labels)[0], arr)
        worst = max(worst, rel_error(grads[name], num))
    return worst


def check_gradients(seeds: int = 1) -> list[CheckResult]:
    a = max(attention_grad_error(s) for s in range(seeds))
    m = max(model_grad_error(s) for s in range(seeds))
    return [
        CheckResult("attention-gradients", a <= GRAD_RTOL, f"max rel error {a:.3g} (tol {GRAD_RTOL:g})"),
        CheckResult("model-gradients", m <= GRAD_RTOL, f"max rel error {m:.3g} (tol {GRAD_RTOL:g})"),
    ]


def run_verify(quick: bool = True) -> list[CheckResult]:
    results = [check_mask_grid(8)]
    results += check_sparse_equivalence(seeds=5 if quick else 20)
    results.append(check_model_equivalence(seeds=2 if quick else 5))
    results += check_gradients(seeds=1 if quick else 3)
    return results
