import io
import json

import numpy as np
import pytest

from swiftdec.kvcache import (
    BudgetTooSmall,
    FullCache,
    GroupMismatch,
    SinkViolation,
    dump_cache_jsonl,
    evict_to_budget,
    importance_scores,
    mirror_partial,
    needs_refresh,
    prefill_partial,
    refresh,
)


def replicate_oracle(queries, keys, g):
    """Replicate each KV head g times, dot per query head, sum everything."""
    n = keys.shape[0]
    out = np.zeros(n)
    for i in range(n):
        rep = np.repeat(keys[i], g, axis=0)  # (H, dh)
        out[i] = sum(float(q @ k) for q, k in zip(queries, rep))
    return out


def fill_cache(n, num_layers=2, kv_heads=1, head_dim=2, seed=0):
    """FullCache with n rows; values encode (position, layer) for checks."""
    rng = np.random.default_rng(seed)
    cache = FullCache(num_layers, kv_heads, head_dim)
    cache.reserve(n)
    for pos in range(n):
        for layer in range(num_layers):
            k = rng.normal(size=(kv_heads, head_dim))
            v = np.full((kv_heads, head_dim), float(pos * 10 + layer))
            cache.stage(layer, pos - len(cache), k, k, v)
        cache.commit_rows([pos])
    return cache


class TestImportanceScores:
    def test_unit_dot(self):
        q = np.array([[1.0, 0.0]])
        k = np.array([[1.0, 0.0]])
        assert importance_scores(q, k, 1) == pytest.approx(1.0)

    def test_hand_expanded_group(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        k = np.array([[2.0, 3.0]])
        assert importance_scores(q, k, 2) == pytest.approx(5.0)

    @pytest.mark.parametrize("g", [1, 2, 4, 8])
    def test_matches_replication_oracle(self, g):
        rng = np.random.default_rng(g)
        for _ in range(25):
            kv, dh, n = 3, 5, 7
            q = rng.normal(size=(g * kv, dh))
            keys = rng.normal(size=(n, kv, dh))
            got = importance_scores(q, keys, g)
            ref = replicate_oracle(q, keys, g)
            assert np.allclose(got, ref, rtol=1e-6)

    def test_group_mismatch(self):
        with pytest.raises(GroupMismatch):
            importance_scores(np.ones((3, 2)), np.ones((1, 2, 2)), 2)


class TestPrefillPartial:
    def test_degenerate_budget_keeps_everything(self):
        cache = fill_cache(4, num_layers=1)
        scores = np.zeros((1, 2))
        partial = prefill_partial(cache, 2, 4, scores)
        assert len(partial) == 4
        assert sorted(partial.positions[0]) == [0, 1, 2, 3]
        assert partial.mark == 4

    def test_top_k_order_by_score(self):
        cache = fill_cache(6, num_layers=1)
        scores = np.array([[0.1, 0.9, 0.5, 0.3]])  # positions 2..5
        partial = prefill_partial(cache, 2, 4, scores)
        assert partial.positions[0] == [0, 1, 3, 4]  # sink, then 0.9 then 0.5
        assert partial.scores[0][2:] == [0.9, 0.5]

    def test_tie_breaks_to_lower_position(self):
        cache = fill_cache(4, num_layers=1)
        scores = np.array([[0.5, 0.5]])  # positions 2, 3 compete for one slot
        partial = prefill_partial(cache, 2, 3, scores)
        assert partial.positions[0] == [0, 1, 2]

    def test_per_layer_selection_differs(self):
        cache = fill_cache(5, num_layers=2)
        scores = np.array([[3.0, 2.0, 1.0], [1.0, 2.0, 3.0]])
        partial = prefill_partial(cache, 2, 4, scores)
        assert partial.positions[0] == [0, 1, 2, 3]
        assert partial.positions[1] == [0, 1, 4, 3]

    def test_sink_copied_verbatim(self):
        cache = fill_cache(6, num_layers=2)
        partial = prefill_partial(cache, 2, 4, np.zeros((2, 4)))
        for layer in range(2):
            assert np.array_equal(partial.k[layer][:2], cache.raw_keys(layer, 2))
            assert np.array_equal(partial.v[layer][:2], cache.values(layer, 2))

    def test_budget_too_small(self):
        cache = fill_cache(6, num_layers=1)
        with pytest.raises(BudgetTooSmall):
            prefill_partial(cache, 3, 3, np.zeros((1, 3)))

    def test_too_few_entries(self):
        cache = fill_cache(3, num_layers=1)
        with pytest.raises(ValueError):
            prefill_partial(cache, 1, 4, np.zeros((1, 2)))


class TestRefreshTrigger:
    def test_no_growth_no_refresh(self):
        cache = fill_cache(8, num_layers=1)
        partial = prefill_partial(cache, 2, 6, np.zeros((1, 6)))
        assert not needs_refresh(8, partial)

    def test_strict_inequality_boundary(self):
        cache = fill_cache(8, num_layers=1)
        partial = prefill_partial(cache, 2, 6, np.zeros((1, 6)))  # capacity 4
        assert not needs_refresh(partial.mark + 4, partial)
        assert needs_refresh(partial.mark + 5, partial)

    def test_mark_resets_after_refresh(self):
        cache = fill_cache(16, num_layers=1)
        partial = prefill_partial(cache, 2, 6, np.zeros((1, 14)), upto=8)
        assert needs_refresh(16, partial)
        partial = refresh(cache, partial, np.zeros((1, 14)))
        assert partial.mark == 16
        assert not needs_refresh(16, partial)


class TestEvictAndAdmit:
    def make(self, total, sink=2, budget=5):
        cache = fill_cache(total, num_layers=1)
        return cache, mirror_partial(cache, sink, budget, upto=min(total, budget))

    def test_at_budget_unchanged(self):
        _, partial = self.make(5)
        before = list(partial.positions[0])
        evict_to_budget(partial)
        assert partial.positions[0] == before

    def test_admit_then_evict(self):
        cache = fill_cache(8, num_layers=1)
        partial = mirror_partial(cache, 2, 5, upto=5)  # holds 0..4, body 4,3,2
        partial.admit([5, 6], cache)
        assert len(partial) == 7
        assert partial.positions[0][:4] == [0, 1, 5, 6]  # new entries at body head
        evict_to_budget(partial, protected=2)
        assert len(partial) == 5
        assert partial.positions[0] == [0, 1, 5, 6, 4]  # oldest body evicted

    def test_admitted_values_copied_from_full(self):
        cache = fill_cache(8, num_layers=2)
        partial = mirror_partial(cache, 2, 6, upto=5)
        partial.admit([5], cache)
        for layer in range(2):
            idx = partial.positions[layer].index(5)
            assert np.array_equal(partial.v[layer][idx], cache.values(layer, 6)[5])

    def test_burst_beyond_capacity_is_sink_violation(self):
        cache = fill_cache(10, num_layers=1)
        partial = mirror_partial(cache, 2, 5, upto=5)  # capacity 3
        partial.admit([5, 6, 7, 8], cache)
        with pytest.raises(SinkViolation):
            evict_to_budget(partial, protected=4)

    def test_sink_never_evicted(self):
        cache = fill_cache(9, num_layers=1)
        partial = mirror_partial(cache, 2, 5, upto=5)
        partial.admit([5, 6, 7], cache)
        evict_to_budget(partial, protected=3)
        assert partial.positions[0][:2] == [0, 1]
        assert len(partial) == 5


class TestFullCache:
    def test_truncate_and_reconcile(self):
        cache = fill_cache(6, num_layers=1)
        cache.truncate(4)
        assert len(cache) == 4
        cache.reserve(3)
        for off, pos in enumerate([4, 5, 5]):  # staged tree rows may share positions
            k = np.full((1, 2), float(100 + off))
            cache.stage(0, off, k, k, k)
        cache.commit_rows([4, 5, 5])
        cache.reconcile(4, [0, 2])
        assert cache.positions == [0, 1, 2, 3, 4, 5]
        assert cache.values(0, 6)[5][0][0] == 102.0

    def test_gather_by_position(self):
        cache = fill_cache(5, num_layers=2)
        k, v = cache.gather(1, [2, 4])
        assert v[0][0][0] == 21.0 and v[1][0][0] == 41.0


def test_dump_cache_jsonl_schema():
    cache = fill_cache(6, num_layers=2)
    partial = prefill_partial(cache, 2, 4, np.arange(8, dtype=float).reshape(2, 4))
    buf = io.StringIO()
    dump_cache_jsonl(partial, buf)
    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(lines) == 2 * 4
    assert all(set(rec) == {"pos", "layer", "score"} for rec in lines)
    assert any(rec["score"] is None for rec in lines)  # sink rows unscored
