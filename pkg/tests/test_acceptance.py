"""Acceptance criteria, each at its stated tolerance and time budget.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary at the
end prints one PASS/FAIL line per criterion plus the reported figures.
"""

import time

import numpy as np
import pytest

from frito.attention import AttentionParams, attn_full, attn_sparse_frito, count_score_buffers, score_buffer_cost
from frito.bench import run_bench
from frito.masks import FreqMaskSpec, build_mask, oracle_mask
from frito.model import (
    Checkpoint,
    CheckpointShapeError,
    CorruptContainerError,
    EncoderConfig,
    VersionMismatchError,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from frito.kvfile import parse_record
from frito.tensor import (
    BadMagicError,
    DtypeCodeError,
    Rng,
    TruncatedPayloadError,
    tensor_from_bytes,
    tensor_read,
    tensor_to_bytes,
    tensor_write,
)
from frito.trainer import SynthTaskSpec, TrainConfig, eval_set, evaluate, train
from frito.verify import (
    EQUIV_SPECS,
    GRAD_RTOL,
    attention_grad_error,
    mask_grid,
    model_grad_error,
    sparse_full_gap,
)


def note(request, text):
    request.node.user_properties.append(("note", text))


# hand transcriptions of the two 5x2 examples (one global token)
GOLDEN_A = """
###########
#####......
#####......
#######....
#######....
#..######..
#..######..
#....######
#....######
#......####
#......####
"""
GOLDEN_B = """
###########
#######....
#######....
#######....
#######....
#######....
#######....
#......####
#......####
#......####
#......####
"""


def parse(pattern):
    return np.array([[c == "#" for c in line] for line in pattern.split()])


@pytest.mark.acceptance(1, "mask goldens for the two 5x2 examples, bit-exact, < 1 s")
def test_mask_goldens(request):
    start = time.perf_counter()
    build_mask.cache_clear()
    a = build_mask(FreqMaskSpec(5, 2, 1, 1, 2))
    b = build_mask(FreqMaskSpec(5, 2, 1, 3, 1))
    elapsed = time.perf_counter() - start
    assert np.array_equal(a.visibility, parse(GOLDEN_A))
    assert np.array_equal(b.visibility, parse(GOLDEN_B))
    assert np.array_equal(a.additive() == 0, parse(GOLDEN_A))
    note(request, f"runtime {elapsed * 1e3:.2f} ms")
    assert elapsed < 1.0


@pytest.mark.acceptance(2, "build_mask == oracle_mask on the exhaustive grid, < 30 s")
def test_mask_oracle_grid(request):
    start = time.perf_counter()
    n = 0
    for spec in mask_grid(8, 3, 4):
        n += 1
        assert build_mask(spec) == oracle_mask(spec), spec
    elapsed = time.perf_counter() - start
    note(request, f"{n} specs agree in {elapsed:.1f} s")
    assert n == 4608
    assert elapsed < 30


@pytest.mark.acceptance(3, "sparse == masked full (f32 1e-5, f64 1e-10), logits 1e-4, argmax 100%, < 2 min")
def test_sparse_full_equivalence(request):
    start = time.perf_counter()
    seeds = 20
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-10)):
        worst = max(sparse_full_gap(s, seed, dtype) for s in EQUIV_SPECS for seed in range(seeds))
        note(request, f"{np.dtype(dtype).name}: max gap {worst:.3g} over {len(EQUIV_SPECS)} specs x {seeds} seeds")
        assert worst <= tol

    task = SynthTaskSpec()
    worst_logit, agree, total = 0.0, 0, 0
    for seed in range(3):
        cfg = EncoderConfig.build(8, 8, k=1, d=32, r=2, v=1, depth=2, heads=2, classes=4, seed=seed)
        ckpt = Checkpoint.init(cfg)
        rng = Rng(seed, 77)
        for a in ckpt.params.values():
            a += rng.normal(a.shape, 0.1)
        for dom in range(task.n_domains):
            specs, _ = eval_set(task, dom, 64)
            full, sparse = forward(ckpt, specs, "full"), forward(ckpt, specs, "sparse")
            worst_logit = max(worst_logit, float(np.abs(full - sparse).max()))
            agree += int((full.argmax(-1) == sparse.argmax(-1)).sum())
            total += len(specs)
    elapsed = time.perf_counter() - start
    note(request, f"model: max logit gap {worst_logit:.3g}, argmax agreement {agree}/{total}; {elapsed:.1f} s")
    assert worst_logit <= 1e-4
    assert agree == total
    assert elapsed < 120


@pytest.mark.acceptance(4, "analytic gradients match central differences (f64, step 1e-5, rel 1e-4), < 2 min")
def test_gradient_fidelity(request):
    start = time.perf_counter()
    specs = (FreqMaskSpec(3, 2, 1, 1, 2), FreqMaskSpec(4, 2, 1, 2, 1), FreqMaskSpec(2, 2, 0, 1, 1))
    attn = max(attention_grad_error(seed, spec=s) for seed in range(2) for s in specs)
    model = max(model_grad_error(seed) for seed in range(2))
    elapsed = time.perf_counter() - start
    note(request, f"attention max rel error {attn:.3g}, model {model:.3g}; {elapsed:.1f} s")
    assert attn <= GRAD_RTOL and model <= GRAD_RTOL
    assert elapsed < 120


@pytest.mark.acceptance(5, "score buffers: analytic == counted, 181201/361201 sparse/full, reduction sign")
def test_memory_claim(request):
    spec = FreqMaskSpec(12, 50, 1, 6, 1)
    d, heads = 64, 8
    rng = Rng(0)
    params = AttentionParams.init(d, heads, rng)
    x = rng.normal((spec.t, d), 1.0)
    cost = score_buffer_cost(spec)
    with count_score_buffers() as sparse_count:
        attn_sparse_frito(x, params, spec)
    with count_score_buffers() as full_count:
        attn_full(x, params, build_mask(spec))
    assert sparse_count.scalars == heads * cost.sparse
    assert full_count.scalars == heads * cost.full
    assert (cost.sparse, cost.full) == (181201, 361201)
    ratio = cost.sparse / cost.full
    note(request, f"sparse/full score scalars {cost.sparse}/{cost.full} = {ratio:.4f} ({(ratio - 1) * 100:+.1f}%)")
    assert abs(ratio - 0.502) < 1e-3
    assert ratio < 1


@pytest.mark.acceptance(6, "t >= 512, 4 blocks: sparse median < masked median, masked >= vanilla, < 3 min")
def test_speed_claim(request):
    start = time.perf_counter()
    spec = FreqMaskSpec(16, 32, 1, 4, 1)
    assert spec.t >= 512 and len(spec.block_ranges()) >= 4
    report = run_bench([(64, 4)], [spec], repeats=15, warmup=3, seed=0)
    case = report.cases[0]
    van, masked, sparse = (case.variant(n) for n in ("vanilla", "frito-masked", "sparse-frito"))
    elapsed = time.perf_counter() - start
    note(request, f"t={spec.t} d=64 heads=4, medians ms: vanilla {van.median_s * 1e3:.2f}, "
                  f"masked {masked.median_s * 1e3:.2f}, sparse {sparse.median_s * 1e3:.2f}")
    note(request, f"speed vs vanilla: masked {masked.speed_delta * 100:+.1f}%, sparse {sparse.speed_delta * 100:+.1f}%")
    assert sparse.median_s < masked.median_s
    assert masked.median_s >= van.median_s
    assert elapsed < 180


ACC7_CFG = TrainConfig(steps=300, batch_size=16, lr=1e-3, seed=0, eval_every=50, eval_samples=64)


def acc7_model(r):
    return Checkpoint.init(EncoderConfig.build(8, 8, k=1, d=32, r=r, v=1, depth=2, heads=2, classes=4, seed=0))


@pytest.mark.slow
@pytest.mark.acceptance(7, "synthetic training: train-domain acc >= 0.9, finite loss, bitwise-repeatable log, < 5 min")
def test_training_demo(request):
    start = time.perf_counter()
    task = SynthTaskSpec()
    assert (task.classes, task.n_domains) == (4, 3)
    best, log_a = train(acc7_model(2), task, ACC7_CFG)
    _, log_b = train(acc7_model(2), task, ACC7_CFG)
    baseline, _ = train(acc7_model(8), task, ACC7_CFG)
    elapsed = time.perf_counter() - start

    losses = [float(parse_record(line)["loss"]) for line in log_a if line.startswith("kind=step")]
    assert len(losses) == 300 and all(np.isfinite(losses))
    assert log_a == log_b
    acc, _ = evaluate(best, task, task.train_domain)
    frito = [evaluate(best, task, d)[0] for d in task.heldout_domains]
    base = [evaluate(baseline, task, d)[0] for d in task.heldout_domains]
    note(request, f"train-domain acc {acc:.3f}; final loss {losses[-1]:.4f}; {elapsed:.0f} s for three runs")
    note(request, "held-out acc (domains 1, 2): FRITO r=2 " + ", ".join(f"{a:.3f}" for a in frito)
         + "; full-attention r=8 " + ", ".join(f"{a:.3f}" for a in base) + " (reported, not gated)")
    assert acc >= 0.9
    assert elapsed < 300


@pytest.mark.acceptance(8, "FRT1 and checkpoint round trips bitwise; corrupt inputs raise the specific errors")
def test_serialization(request, tmp_path):
    rng = Rng(5)
    for dtype in (np.float32, np.float64):
        x = rng.normal((3, 4, 5), 1.0, dtype)
        tensor_write(x, tmp_path / "x.frt")
        assert tensor_read(tmp_path / "x.frt").tobytes() == x.tobytes()

    buf = tensor_to_bytes(np.zeros((2, 3), np.float64))
    for damaged, err in (
        (b"NOPE" + buf[4:], BadMagicError),
        (buf[:4] + b"\x09" + buf[5:], DtypeCodeError),
        (buf[:-5], TruncatedPayloadError),
    ):
        with pytest.raises(err):
            tensor_from_bytes(damaged)

    cfg = EncoderConfig.build(4, 4, patch_f=2, patch_t=2, k=1, d=8, r=2, depth=1, classes=3)
    ckpt = Checkpoint.init(cfg)
    for a in ckpt.params.values():
        a += rng.normal(a.shape, 0.1)
    path = tmp_path / "c.frck"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.config == cfg
    assert all(back.params[n].tobytes() == a.tobytes() for n, a in ckpt.params.items())

    raw = path.read_bytes()
    nl = raw.index(b"\n")
    head, body = raw[:nl].split(), raw[nl + 1 :]
    mlen = int(head[2])
    manifest = body[:mlen].decode()

    def write(header_version, text, rest):
        path.write_bytes(b"FRCKPT %s %d\n" % (header_version, len(text)) + text.encode() + rest)

    write(b"99", manifest, body[mlen:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)
    write(b"1", manifest.replace("tensor.head.w=float32 8,3", "tensor.head.w=float32 3,8"), body[mlen:])
    with pytest.raises(CheckpointShapeError, match="head.w"):
        load_checkpoint(path)
    path.write_bytes(raw[:-9])
    with pytest.raises(CorruptContainerError):
        load_checkpoint(path)
    note(request, "FRT1 f32/f64 and checkpoint round trips bitwise; 6 corruption variants rejected")
