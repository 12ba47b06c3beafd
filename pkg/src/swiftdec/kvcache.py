"""Key/value caches: the full cache used for verification and the budgeted
partial cache used for drafting.

The full cache stores one entry per committed position per layer. Keys are
kept pre-rotation so attention-time positions can be reassigned after
eviction; a rotated copy is memoised alongside (the rotation angle of a full
cache entry equals its storage index, which is its absolute position).

The partial cache keeps a fixed sink of the earliest ``sink_size`` entries
plus a body of at most ``budget - sink_size`` entries ordered by decreasing
importance. Importance is the grouped query-key dot product

    score_i = sum_{j = i*g .. (i+1)*g - 1}  Q_j . K_i

computed per layer (queries are partitioned over the KV head they share
rather than replicating K). Newly committed entries are copied in from the
full cache at the head of the body, unscored until the next refresh; eviction
removes entries from the tail. A refresh re-scores every non-sink entry and
fires once the full cache has grown by more than the body capacity since the
last refresh mark.
"""

from __future__ import annotations

import json
from typing import IO, Callable

import numpy as np

RopeFn = Callable[[np.ndarray, np.ndarray], np.ndarray]  # (rows, positions) -> rotated


class GroupMismatch(ValueError):
    """Query head count is not group_size times the KV head count."""


class BudgetTooSmall(ValueError):
    """Cache budget does not exceed the sink size."""


class SinkViolation(RuntimeError):
    """Eviction would reach the sink or a just-admitted entry.

    Signals that ``budget - sink_size`` is smaller than one iteration's
    acceptance, which is a configuration error.
    """


class _LayerArrays:
    """Capacity-doubling (n, kv_heads, head_dim) triple for one layer."""

    def __init__(self, kv_heads: int, head_dim: int, cap: int = 64):
        shape = (cap, kv_heads, head_dim)
        self.k_raw = np.empty(shape)
        self.k_rot = np.empty(shape)
        self.v = np.empty(shape)

    def ensure(self, need: int, keep: int) -> None:
        cap = self.k_raw.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("k_raw", "k_rot", "v"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:])
            new[:keep] = old[:keep]
            setattr(self, name, new)


class FullCache:
    """Append-only per-layer K/V store covering the committed sequence."""

    def __init__(self, num_layers: int, num_kv_heads: int, head_dim: int):
        self.num_layers = num_layers
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.positions: list[int] = []
        self._layers = [_LayerArrays(num_kv_heads, head_dim) for _ in range(num_layers)]

    def __len__(self) -> int:
        return len(self.positions)

    # -- staging: rows become visible to attention before they are committed,
    #    letting a token attend to itself through the same contiguous view.

    def reserve(self, extra: int) -> None:
        for la in self._layers:
            la.ensure(len(self) + extra, len(self))

    def stage(self, layer: int, offset: int, k_raw, k_rot, v) -> None:
        i = len(self) + offset
        la = self._layers[layer]
        la.k_raw[i] = k_raw
        la.k_rot[i] = k_rot
        la.v[i] = v

    def commit_rows(self, positions: list[int]) -> None:
        self.positions.extend(positions)

    def ensure_rotated(self, rope: RopeFn | None) -> None:
        pass  # the memo is maintained at stage time

    def raw_keys(self, layer: int, upto: int) -> np.ndarray:
        return self._layers[layer].k_raw[:upto]

    def rotated_keys(self, layer: int, upto: int) -> np.ndarray:
        return self._layers[layer].k_rot[:upto]

    def values(self, layer: int, upto: int) -> np.ndarray:
        return self._layers[layer].v[:upto]

    def truncate(self, n: int) -> None:
        del self.positions[n:]

    def reconcile(self, base_len: int, keep_offsets: list[int]) -> None:
        """Keep the first ``base_len`` committed rows plus selected ones.

        Drops entries of rejected tree branches (their tokens were never
        committed; keeping them would corrupt positions).
        """
        keep = [base_len + off for off in keep_offsets]
        n = base_len + len(keep)
        for la in self._layers:
            for arr in (la.k_raw, la.k_rot, la.v):
                arr[base_len:n] = arr[keep]
        self.positions = self.positions[:base_len] + [self.positions[i] for i in keep]

    def gather(self, layer: int, positions: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """(k_raw, v) row copies for absolute positions (index == position)."""
        idx = np.asarray(positions, dtype=np.intp)
        la = self._layers[layer]
        return la.k_raw[idx].copy(), la.v[idx].copy()


class CacheBuffer:
    """Ephemeral drafting view: entries re-sorted by origin position with
    attention positions reassigned to 0..len-1. Discarded after one forward."""

    def __init__(self, num_layers: int, num_kv_heads: int, head_dim: int,
                 k_raw: list[np.ndarray], v: list[np.ndarray]):
        self.num_layers = num_layers
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self._base = int(k_raw[0].shape[0]) if num_layers else 0
        self._len = self._base
        self._layers = []
        for layer in range(num_layers):
            la = _LayerArrays(num_kv_heads, head_dim, cap=max(self._base + 8, 8))
            la.k_raw[: self._base] = k_raw[layer]
            la.v[: self._base] = v[layer]
            self._layers.append(la)
        self._rotated = False

    def __len__(self) -> int:
        return self._len

    def ensure_rotated(self, rope: RopeFn | None) -> None:
        if self._rotated:
            return
        ranks = np.arange(self._base)
        for la in self._layers:
            base = la.k_raw[: self._base]
            la.k_rot[: self._base] = base if rope is None else rope(base, ranks)
        self._rotated = True

    def reserve(self, extra: int) -> None:
        for la in self._layers:
            la.ensure(self._len + extra, self._len)

    def stage(self, layer: int, offset: int, k_raw, k_rot, v) -> None:
        i = self._len + offset
        la = self._layers[layer]
        la.k_raw[i] = k_raw
        la.k_rot[i] = k_rot
        la.v[i] = v

    def commit_rows(self, positions: list[int]) -> None:
        self._len += len(positions)

    def raw_keys(self, layer: int, upto: int) -> np.ndarray:
        return self._layers[layer].k_raw[:upto]

    def rotated_keys(self, layer: int, upto: int) -> np.ndarray:
        return self._layers[layer].k_rot[:upto]

    def values(self, layer: int, upto: int) -> np.ndarray:
        return self._layers[layer].v[:upto]


class PartialCache:
    """Budgeted drafting cache: fixed sink plus importance-ordered body."""

    def __init__(self, sink_size: int, budget: int, num_layers: int,
                 positions: list[list[int]], k_raw: list[np.ndarray],
                 v: list[np.ndarray], scores: list[list[float | None]], mark: int):
        if budget <= sink_size:
            raise BudgetTooSmall(f"budget {budget} must exceed sink size {sink_size}")
        self.sink_size = sink_size
        self.budget = budget
        self.num_layers = num_layers
        self.positions = positions      # per layer: sink first, then body by importance
        self.k = k_raw                  # per layer (n, kv_heads, head_dim), pre-rotation
        self.v = v
        self.scores = scores            # per layer; None for sink/unscored entries
        self.mark = mark                # full-cache length at the last refresh

    def __len__(self) -> int:
        return len(self.positions[0]) if self.num_layers else 0

    @property
    def capacity(self) -> int:
        return self.budget - self.sink_size

    def admit(self, positions: list[int], full: FullCache) -> None:
        """Copy newly committed entries from the full cache to the body head."""
        if not positions:
            return
        s = self.sink_size
        for layer in range(self.num_layers):
            k_new, v_new = full.gather(layer, positions)
            self.k[layer] = np.concatenate([self.k[layer][:s], k_new, self.k[layer][s:]])
            self.v[layer] = np.concatenate([self.v[layer][:s], v_new, self.v[layer][s:]])
            self.positions[layer][s:s] = positions
            self.scores[layer][s:s] = [None] * len(positions)

    def draft_view(self, before_pos: int) -> CacheBuffer:
        """View of all entries with origin position < ``before_pos``,
        re-sorted by position per layer."""
        k_list, v_list = [], []
        for layer in range(self.num_layers):
            order = sorted(
                (p, i) for i, p in enumerate(self.positions[layer]) if p < before_pos
            )
            idx = np.asarray([i for _, i in order], dtype=np.intp)
            k_list.append(self.k[layer][idx])
            v_list.append(self.v[layer][idx])
        kv_heads = self.k[0].shape[1] if self.num_layers else 0
        head_dim = self.k[0].shape[2] if self.num_layers else 0
        return CacheBuffer(self.num_layers, kv_heads, head_dim, k_list, v_list)


def importance_scores(queries: np.ndarray, keys: np.ndarray, group_size: int) -> np.ndarray:
    """Grouped query-key relevance, one score per cache position.

    ``queries``: (num_heads, head_dim). ``keys``: (n, num_kv_heads, head_dim)
    or (num_kv_heads, head_dim) for a single position. Query head j is dotted
    with KV head j // group_size and group results are summed; with
    group_size 1 this reduces to a plain dot product.
    """
    queries = np.asarray(queries, dtype=float)
    keys = np.asarray(keys, dtype=float)
    single = keys.ndim == 2
    if single:
        keys = keys[None]
    num_heads, head_dim = queries.shape
    num_kv = keys.shape[1]
    if num_heads != group_size * num_kv:
        raise GroupMismatch(
            f"{num_heads} query heads cannot be partitioned into groups of "
            f"{group_size} over {num_kv} KV heads"
        )
    q = queries.reshape(num_kv, group_size, head_dim)
    scores = np.einsum("kgd,nkd->n", q, keys)
    return scores[0] if single else scores


def prefill_partial(full: FullCache, sink_size: int, budget: int,
                    scores: np.ndarray, upto: int | None = None) -> PartialCache:
    """Build a partial cache: sink plus the top-scoring body entries.

    Candidates are the first ``upto`` entries (defaulting to all of them).
    ``scores`` has shape (num_layers, upto - sink_size) covering positions
    [sink_size, upto); each layer selects its own body, ordered by decreasing
    score with ties won by the lower position.
    """
    n = len(full) if upto is None else upto
    if budget <= sink_size:
        raise BudgetTooSmall(f"budget {budget} must exceed sink size {sink_size}")
    if n < budget:
        raise ValueError(f"prefill_partial needs at least {budget} entries, have {n}")
    scores = np.asarray(scores, dtype=float)
    take = budget - sink_size
    positions, k_list, v_list, score_list = [], [], [], []
    for layer in range(full.num_layers):
        order = sorted(range(sink_size, n), key=lambda i: (-scores[layer][i - sink_size], i))
        body = order[:take]
        pos = list(range(sink_size)) + body
        k, v = full.gather(layer, pos)
        positions.append(pos)
        k_list.append(k)
        v_list.append(v)
        score_list.append(
            [None] * sink_size + [float(scores[layer][i - sink_size]) for i in body]
        )
    return PartialCache(sink_size, budget, full.num_layers,
                        positions, k_list, v_list, score_list, mark=n)


def mirror_partial(full: FullCache, sink_size: int, budget: int,
                   upto: int | None = None) -> PartialCache:
    """Short-prompt relaxation: the partial cache mirrors the full cache.

    Used while the sequence has not outgrown the budget; the body is ordered
    newest first so that later evictions drop the oldest entries.
    """
    n = len(full) if upto is None else upto
    if budget <= sink_size:
        raise BudgetTooSmall(f"budget {budget} must exceed sink size {sink_size}")
    positions, k_list, v_list, score_list = [], [], [], []
    for layer in range(full.num_layers):
        pos = list(range(sink_size)) + list(range(n - 1, sink_size - 1, -1))
        k, v = full.gather(layer, pos)
        positions.append(pos)
        k_list.append(k)
        v_list.append(v)
        score_list.append([None] * len(pos))
    return PartialCache(sink_size, budget, full.num_layers,
                        positions, k_list, v_list, score_list, mark=n)


def needs_refresh(full_len: int, partial: PartialCache) -> bool:
    """True once the full cache outgrew the body capacity since the last mark."""
    return (full_len - partial.mark) > partial.capacity


def refresh(full: FullCache, partial: PartialCache, scores: np.ndarray) -> PartialCache:
    """Rebuild the partial cache mid-generation; same contract as prefill."""
    return prefill_partial(full, partial.sink_size, partial.budget, scores)


def evict_to_budget(partial: PartialCache, protected: int = 0) -> PartialCache:
    """Drop least-important body entries until the cache fits its budget.

    ``protected`` counts just-admitted entries at the body head that must
    survive; having to evict one of them (or a sink entry) raises
    :class:`SinkViolation`.
    """
    overflow = len(partial) - partial.budget
    if overflow <= 0:
        return partial
    body_len = len(partial) - partial.sink_size
    if body_len - overflow < protected:
        raise SinkViolation(
            "eviction would reach protected entries; body capacity "
            f"{partial.capacity} is smaller than one iteration's acceptance"
        )
    keep = len(partial) - overflow
    for layer in range(partial.num_layers):
        partial.k[layer] = partial.k[layer][:keep]
        partial.v[layer] = partial.v[layer][:keep]
        del partial.positions[layer][keep:]
        del partial.scores[layer][keep:]
    return partial


def dump_cache_jsonl(partial: PartialCache, fh: IO[str]) -> None:
    """One JSON object per entry: {pos, layer, score} (score null if unscored)."""
    for layer in range(partial.num_layers):
        for pos, score in zip(partial.positions[layer], partial.scores[layer]):
            fh.write(json.dumps({"pos": pos, "layer": layer, "score": score}) + "\n")
