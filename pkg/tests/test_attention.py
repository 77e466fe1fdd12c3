import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frito.attention import (
    AttentionParams,
    UnsupportedConfigurationError,
    attn_full,
    attn_full_backward,
    attn_sparse_frito,
    attn_sparse_local,
    count_score_buffers,
    score_buffer_cost,
)
from frito.masks import FreqMaskSpec, build_mask
from frito.tensor import F32, F64, Rng, ShapeError
from frito.verify import central_difference, rel_error


def random_params(d, heads, seed, dtype=F64, std=0.5):
    rng = Rng(seed, 100)
    p = AttentionParams.init(d, heads, rng, dtype, std)
    for a in p.as_dict().values():
        a += rng.normal(a.shape, 0.1, dtype)
    return p


def scalar_attention(x, p, vis):
    """Single-head masked attention with plain Python loops."""
    t, d = x.shape
    lin = lambda w, b: [[float(b[c]) + sum(float(x[i, e]) * float(w[e, c]) for e in range(d)) for c in range(d)] for i in range(t)]
    q, k, v = lin(p.wq, p.bq), lin(p.wk, p.bk), lin(p.wv, p.bv)
    out = np.zeros((t, d))
    for i in range(t):
        s = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(t)]
        m = max(s[j] for j in range(t) if vis[i][j])
        e = [math.exp(s[j] - m) if vis[i][j] else 0.0 for j in range(t)]
        z = sum(e)
        ctx = [sum(e[j] / z * v[j][c] for j in range(t)) for c in range(d)]
        for c in range(d):
            out[i, c] = float(p.bo[c]) + sum(ctx[e_] * float(p.wo[e_, c]) for e_ in range(d))
    return out


class TestFull:
    def test_single_token_is_value_path(self):
        p = random_params(4, 2, 0)
        x = Rng(1).normal((1, 4), 1.0, F64)
        want = (x @ p.wv + p.bv) @ p.wo + p.bo
        np.testing.assert_allclose(attn_full(x, p), want, atol=1e-12)

    def test_diagonal_mask_isolates_tokens(self):
        p = random_params(4, 2, 1)
        x = Rng(2).normal((5, 4), 1.0, F64)
        out = attn_full(x, p, np.eye(5, dtype=bool))
        np.testing.assert_allclose(out, (x @ p.wv + p.bv) @ p.wo + p.bo, atol=1e-12)

    def test_against_scalar_oracle(self):
        p = random_params(2, 1, 2)
        x = Rng(3).normal((3, 2), 1.0, F64)
        vis = [[True, False, True], [True, True, True], [False, True, True]]
        np.testing.assert_allclose(attn_full(x, p, np.array(vis)), scalar_attention(x, p, vis), atol=1e-12)

    def test_per_head_scale(self):
        # two heads of width 1 equal two independent single-head calls with scale 1
        p = random_params(2, 2, 3)
        x = Rng(4).normal((4, 2), 1.0, F64)
        q, k, v = x @ p.wq + p.bq, x @ p.wk + p.bk, x @ p.wv + p.bv
        ctx = np.zeros((4, 2))
        for h in range(2):
            s = np.outer(q[:, h], k[:, h])
            w = np.exp(s - s.max(axis=1, keepdims=True))
            ctx[:, h] = (w / w.sum(axis=1, keepdims=True)) @ v[:, h]
        np.testing.assert_allclose(attn_full(x, p), ctx @ p.wo + p.bo, atol=1e-12)

    def test_batched_matches_loop(self):
        p = random_params(8, 2, 4)
        x = Rng(5).normal((3, 7, 8), 1.0, F64)
        mask = build_mask(FreqMaskSpec(3, 2, 1, 1, 2))
        batch = attn_full(x, p, mask)
        for i in range(3):
            np.testing.assert_allclose(batch[i], attn_full(x[i], p, mask), atol=1e-13)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            attn_full(np.zeros((3, 5)), random_params(4, 1, 0))

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            AttentionParams.init(6, 4, Rng(0))


class TestBackward:
    def test_zero_upstream(self):
        p = random_params(4, 2, 5)
        x = Rng(6).normal((5, 4), 1.0, F64)
        grads = attn_full_backward(x, p, None, np.zeros((5, 4)))
        for name, g in grads.as_dict().items():
            assert np.all(g == 0), name

    @pytest.mark.parametrize("spec", [FreqMaskSpec(3, 2, 1, 1, 2), FreqMaskSpec(4, 2, 0, 2, 1), FreqMaskSpec(2, 3, 2, 1, 1)])
    def test_finite_differences(self, spec):
        p = random_params(4, 2, 6)
        rng = Rng(7)
        x = rng.normal((spec.t, 4), 1.0, F64)
        up = rng.normal((spec.t, 4), 1.0, F64)
        mask = build_mask(spec)
        grads = attn_full_backward(x, p, mask, up)
        loss = lambda: float((attn_full(x, p, mask) * up).sum())
        assert rel_error(grads.dx, central_difference(loss, x)) < 1e-4
        for name, arr in p.as_dict().items():
            assert rel_error(getattr(grads, name), central_difference(loss, arr)) < 1e-4, name

    def test_key_bias_gradient_vanishes(self):
        # adding a constant to every key shifts each score row uniformly
        p = random_params(4, 2, 8)
        x = Rng(9).normal((6, 4), 1.0, F64)
        grads = attn_full_backward(x, p, None, Rng(10).normal((6, 4), 1.0, F64))
        np.testing.assert_allclose(grads.bk, 0.0, atol=1e-12)

    def test_hidden_tokens_get_no_gradient_through_scores(self):
        # token 2 is seen by nobody but itself and sees only itself
        vis = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=bool)
        p = random_params(4, 1, 11)
        x = Rng(12).normal((3, 4), 1.0, F64)
        up = np.zeros((3, 4))
        up[:2] = Rng(13).normal((2, 4), 1.0, F64)
        grads = attn_full_backward(x, p, vis, up)
        assert np.all(grads.dx[2] == 0)

    def test_upstream_shape_checked(self):
        with pytest.raises(ShapeError):
            attn_full_backward(np.zeros((3, 4)), random_params(4, 1, 0), None, np.zeros((2, 4)))


class TestSparseLocal:
    def test_single_block_equals_full(self):
        p = random_params(4, 2, 14)
        x = Rng(15).normal((6, 4), 1.0, F64)
        np.testing.assert_allclose(attn_sparse_local(x, [(0, 6)], p), attn_full(x, p), atol=1e-12)

    def test_singleton_blocks_are_value_path(self):
        p = random_params(4, 2, 16)
        x = Rng(17).normal((4, 4), 1.0, F64)
        out = attn_sparse_local(x, [(i, i + 1) for i in range(4)], p)
        np.testing.assert_allclose(out, (x @ p.wv + p.bv) @ p.wo + p.bo, atol=1e-12)

    def test_block_diagonal_mask(self):
        p = random_params(4, 2, 18)
        x = Rng(19).normal((7, 4), 1.0, F64)
        blocks = [(0, 3), (3, 4), (4, 7)]
        vis = np.zeros((7, 7), dtype=bool)
        for a, b in blocks:
            vis[a:b, a:b] = True
        np.testing.assert_allclose(attn_sparse_local(x, blocks, p), attn_full(x, p, vis), atol=1e-12)

    def test_no_cross_block_scores(self):
        p = random_params(4, 1, 20)
        x = Rng(21).normal((6, 4), 1.0, F64)
        with count_score_buffers() as c:
            attn_sparse_local(x, [(0, 2), (2, 6)], p)
        assert c.scalars == 4 + 16 and c.allocations == 2

    @pytest.mark.parametrize("blocks", [[(0, 3), (4, 6)], [(0, 3), (2, 6)], [(0, 3)], [(3, 6), (0, 3)]])
    def test_partition_required(self, blocks):
        with pytest.raises(ValueError):
            attn_sparse_local(np.zeros((6, 4)), blocks, random_params(4, 1, 0))


class TestSparseFrito:
    def test_small_grid_matches_masked_full(self):
        spec = FreqMaskSpec(5, 2, 1, 3, 1)
        p = random_params(8, 2, 22)
        x = Rng(23).normal((spec.t, 8), 1.0, F64)
        np.testing.assert_allclose(attn_sparse_frito(x, p, spec), attn_full(x, p, build_mask(spec)), atol=1e-12)

    @pytest.mark.parametrize("spec", [FreqMaskSpec(4, 3, 0, 4, 1), FreqMaskSpec(4, 3, 2, 6, 1)])
    def test_single_cluster_equals_unmasked(self, spec):
        p = random_params(8, 2, 24)
        x = Rng(25).normal((spec.t, 8), 1.0, F64)
        np.testing.assert_allclose(attn_sparse_frito(x, p, spec), attn_full(x, p), atol=1e-12)

    def test_overlapping_windows_rejected(self):
        spec = FreqMaskSpec(5, 2, 1, 1, 2)
        with pytest.raises(UnsupportedConfigurationError, match="v == 1"):
            attn_sparse_frito(np.zeros((spec.t, 4)), random_params(4, 1, 0), spec)

    def test_length_checked(self):
        with pytest.raises(ShapeError):
            attn_sparse_frito(np.zeros((5, 4)), random_params(4, 1, 0), FreqMaskSpec(5, 2, 1, 3, 1))

    def test_counter_matches_analytic_at_scale(self):
        spec = FreqMaskSpec(12, 50, 1, 6, 1)
        p = random_params(8, 1, 26, F32)
        x = Rng(27).normal((spec.t, 8), 1.0, F32)
        with count_score_buffers() as c:
            attn_sparse_frito(x, p, spec)
        cost = score_buffer_cost(spec)
        assert c.scalars == cost.sparse == 181201
        assert cost.full == 601 ** 2 == 361201

    def test_counter_counts_per_head(self):
        spec = FreqMaskSpec(4, 2, 1, 2, 1)
        p = random_params(8, 4, 28)
        x = Rng(29).normal((spec.t, 8), 1.0, F64)
        with count_score_buffers() as c:
            attn_sparse_frito(x, p, spec)
        assert c.scalars == 4 * score_buffer_cost(spec).sparse

    def test_workers_bit_identical(self):
        spec = FreqMaskSpec(8, 4, 1, 2, 1)
        p = random_params(8, 2, 30, F32)
        x = Rng(31).normal((spec.t, 8), 1.0, F32)
        with count_score_buffers() as c1:
            a = attn_sparse_frito(x, p, spec, workers=1)
        with count_score_buffers() as c4:
            b = attn_sparse_frito(x, p, spec, workers=4)
        assert np.array_equal(a, b)
        assert c1.scalars == c4.scalars

    def test_batched(self):
        spec = FreqMaskSpec(3, 2, 1, 2, 1)
        p = random_params(4, 2, 32)
        x = Rng(33).normal((2, spec.t, 4), 1.0, F64)
        out = attn_sparse_frito(x, p, spec)
        for i in range(2):
            np.testing.assert_allclose(out[i], attn_sparse_frito(x[i], p, spec), atol=1e-13)

    def test_rows_are_distributions(self):
        # identity output projection and values = inputs: each output row is a convex mix of inputs
        spec = FreqMaskSpec(4, 2, 1, 2, 1)
        d = 4
        rng = Rng(34)
        eye, zero = np.eye(d), np.zeros(d)
        p = AttentionParams(rng.normal((d, d), 1.0, F64), zero, rng.normal((d, d), 1.0, F64), zero, eye, zero, eye, zero, heads=1)
        x = np.zeros((spec.t, d))
        x[:, 0] = 1.0
        np.testing.assert_allclose(attn_sparse_frito(x, p, spec)[:, 0], 1.0, atol=1e-12)

    def test_permutation_within_block(self):
        # attention is equivariant to reordering tokens that share a block
        spec = FreqMaskSpec(4, 3, 1, 2, 1)
        p = random_params(4, 2, 35)
        x = Rng(36).normal((spec.t, 4), 1.0, F64)
        perm = np.arange(spec.t)
        perm[1:7] = perm[1:7][::-1]
        out = attn_sparse_frito(x, p, spec)
        np.testing.assert_allclose(attn_sparse_frito(x[perm], p, spec), out[perm], atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2), st.integers(1, 6), st.integers(0, 1000))
    def test_equivalence_property(self, h, w, k, r, seed):
        spec = FreqMaskSpec(h, w, k, min(r, h), 1)
        p = random_params(4, 2, seed)
        x = Rng(seed, 1).normal((spec.t, 4), 1.0, F64)
        np.testing.assert_allclose(attn_sparse_frito(x, p, spec), attn_full(x, p, build_mask(spec)), atol=1e-10)


class TestScoreBufferCost:
    def test_small_grid(self):
        cost = score_buffer_cost(FreqMaskSpec(5, 2, 1, 3, 1), d_head=4)
        # globals: 1*11; blocks of 6 and 4 patches each see one extra global key
        assert cost.sparse == 11 + 6 * 7 + 4 * 5 == 73
        assert cost.full == 121
        assert cost.macs_full == 2 * 121 * 4 and cost.macs_sparse == 2 * 73 * 4

    def test_overlap_has_no_sparse_figure(self):
        cost = score_buffer_cost(FreqMaskSpec(5, 2, 1, 1, 2))
        assert cost.sparse is None and cost.macs_sparse is None

    def test_single_cluster_equals_full(self):
        cost = score_buffer_cost(FreqMaskSpec(4, 3, 2, 4, 1))
        assert cost.sparse == cost.full

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 3), st.integers(1, 12))
    def test_never_exceeds_full(self, h, w, k, r):
        cost = score_buffer_cost(FreqMaskSpec(h, w, k, min(r, h), 1))
        assert cost.sparse <= cost.full

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 12), st.integers(0, 3), st.integers(1, 6))
    def test_halving_cluster_size_never_costs_more(self, h, w, k, half):
        r = 2 * min(half, h // 2)
        coarse = score_buffer_cost(FreqMaskSpec(h, w, k, r, 1)).sparse
        fine = score_buffer_cost(FreqMaskSpec(h, w, k, r // 2, 1)).sparse
        assert fine <= coarse
