"""Wall-time and score-memory comparison of vanilla, masked and sparse attention."""

from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import (
    AttentionParams,
    attn_full,
    attn_sparse_frito,
    count_score_buffers,
    score_buffer_cost,
)
from .masks import FreqMaskSpec, build_mask
from .tensor import F32, Rng

VARIANTS = ("vanilla", "frito-masked", "sparse-frito")


@dataclass
class VariantResult:
    name: str
    median_s: float | None = None
    p10_s: float | None = None
    p90_s: float | None = None
    score_scalars: int | None = None  # analytic, all heads
    score_scalars_counted: int | None = None  # allocation counter, all heads
    macs: int | None = None
    speed_delta: float | None = None  # vanilla_median / median - 1; positive is faster
    mem_delta: float | None = None  # score_scalars / vanilla score_scalars - 1
    skipped: str | None = None


@dataclass
class BenchCase:
    h: int
    w: int
    k: int
    r: int
    v: int
    d: int
    heads: int
    t: int
    variants: list[VariantResult] = field(default_factory=list)

    def variant(self, name: str) -> VariantResult:
        return next(v for v in self.variants if v.name == name)


@dataclass
class BenchReport:
    repeats: int
    warmup: int
    threads: str
    dtype: str
    seed: int
    cases: list[BenchCase] = field(default_factory=list)

    def protocol(self) -> str:
        return (
            f"protocol: single attention layer forward on one seeded random input; "
            f"{self.warmup} warmup + {self.repeats} timed calls per variant, interleaved round-robin; "
            f"medians with p10/p90; threads={self.threads}; dtype={self.dtype}; seed={self.seed}; "
            f"numpy {np.__version__}; {platform.machine()}"
        )


def _variant_fns(x, params, spec, workers):
    mask = build_mask(spec)
    return {
        "vanilla": lambda: attn_full(x, params, None),
        "frito-masked": lambda: attn_full(x, params, mask),
        "sparse-frito": lambda: attn_sparse_frito(x, params, spec, workers=workers),
    }


def bench_case(spec: FreqMaskSpec, d: int, heads: int, repeats: int = 7, warmup: int = 2, seed: int = 0,
               workers: int = 1, dtype=F32) -> BenchCase:
    rng = Rng(seed)
    x = rng.normal((spec.t, d), 1.0, dtype)
    params = AttentionParams.init(d, heads, rng, dtype)
    case = BenchCase(spec.h, spec.w, spec.k, spec.r, spec.v, d, heads, spec.t)
    cost = score_buffer_cost(spec, d // heads)
    fns = _variant_fns(x, params, spec, workers)
    results = {name: VariantResult(name) for name in VARIANTS}
    analytic = {
        "vanilla": (cost.full, cost.macs_full),
        "frito-masked": (cost.full, cost.macs_full),
        "sparse-frito": (cost.sparse, cost.macs_sparse),
    }

    live = []
    for name in VARIANTS:
        res = results[name]
        try:
            with count_score_buffers() as counter:
                fns[name]()
        except Exception as e:  # noqa: BLE001 - reported, not raised
            res.skipped = f"{type(e).__name__}: {e}"
            continue
        res.score_scalars_counted = counter.scalars
        scalars, macs = analytic[name]
        res.score_scalars = scalars * heads
        res.macs = macs * heads
        live.append(name)

    times = {name: [] for name in live}
    for i in range(warmup + repeats):
        for name in live:
            t0 = time.perf_counter()
            fns[name]()
            dt = time.perf_counter() - t0
            if i >= warmup:
                times[name].append(dt)

    for name in live:
        res = results[name]
        res.median_s = float(np.median(times[name]))
        res.p10_s = float(np.percentile(times[name], 10))
        res.p90_s = float(np.percentile(times[name], 90))

    base = results["vanilla"]
    for res in results.values():
        if res.skipped or base.skipped:
            continue
        res.speed_delta = base.median_s / res.median_s - 1.0
        res.mem_delta = res.score_scalars / base.score_scalars - 1.0
    case.variants = [results[n] for n in VARIANTS]
    return case


def run_bench(shapes, specs, repeats: int = 7, warmup: int = 2, seed: int = 0, parallel: bool = False,
              dtype=F32) -> BenchReport:
    """Benchmark every (d, heads) shape against every mask spec.

    Kernels are limited to one BLAS thread unless ``parallel`` is set, in
    which case sparse blocks also run on a thread pool.
    """
    if repeats < 5 or warmup < 2:
        raise ValueError("need at least 5 repeats after 2 warmups")
    report = BenchReport(repeats, warmup, "parallel" if parallel else "1", np.dtype(dtype).name, seed)
    workers = 4 if parallel else 1
    for d, heads in shapes:
        for spec in specs:
            if parallel:
                report.cases.append(bench_case(spec, d, heads, repeats, warmup, seed, workers, dtype))
            else:
                with threadpool_limits(limits=1):
                    report.cases.append(bench_case(spec, d, heads, repeats, warmup, seed, workers, dtype))
    return report


def _pct(x):
    return "n/a" if x is None else f"{x * 100:+.1f}%"


def _ms(x):
    return "n/a" if x is None else f"{x * 1e3:.3f}"


_COLUMNS = ("method", "speed", "mem", "median_ms", "p10_ms", "p90_ms", "score_scalars", "counted", "macs")


def emit_report(report: BenchReport, fmt: str = "text") -> str:
    if fmt == "text":
        lines = [report.protocol()]
        for case in report.cases:
            lines.append(
                f"\ncase t={case.t} h={case.h} w={case.w} k={case.k} r={case.r} v={case.v} "
                f"d={case.d} heads={case.heads}"
            )
            lines.append("  ".join(f"{c:>14}" for c in _COLUMNS))
            for v in case.variants:
                if v.skipped:
                    lines.append(f"{v.name:>14}  skipped ({v.skipped})")
                    continue
                cells = (v.name, _pct(v.speed_delta), _pct(v.mem_delta), _ms(v.median_s), _ms(v.p10_s),
                         _ms(v.p90_s), v.score_scalars, v.score_scalars_counted, v.macs)
                lines.append("  ".join(f"{c!s:>14}" for c in cells))
        return "\n".join(lines) + "\n"
    if fmt == "jsonl":
        header = {"record": "header", **{k: v for k, v in asdict(report).items() if k != "cases"},
                  "protocol": report.protocol()}
        out = [json.dumps(header)]
        for case in report.cases:
            cfg = {k: v for k, v in asdict(case).items() if k != "variants"}
            for v in case.variants:
                out.append(json.dumps({"record": "variant", **cfg, **asdict(v)}))
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")
