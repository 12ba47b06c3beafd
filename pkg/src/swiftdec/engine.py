"""Generation engine: prefill, draft with the partial cache, verify a
candidate tree with the full cache, commit by exact match.

Each iteration runs exactly two model forwards. The drafting forward
processes the newest committed token over the budgeted partial cache and
produces gamma+1 penalised head distributions; their per-head top-s_k
candidates plus retrieved n-grams form the candidate tree. The verification
forward processes that token again as the tree root, this time over the full
cache with the ancestor mask, yielding the target distribution at every node.
Target tokens are sampled with position-keyed deviates, draft paths are valid
up to their longest exact-match prefix, one of the longest valid paths is
chosen uniformly at random, and the matched tokens plus the bonus target
token at the first mismatch are committed.

Because verification distributions depend only on the committed prefix and
deviates only on (seed, position), the emitted sequence is byte-identical to
plain autoregressive decoding under the same sampler; speculation changes
only how many forwards it takes.

The full cache always holds every committed token except the newest, whose
entry is produced when the next verification (or AR step) processes it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kvcache
from .kvcache import FullCache, PartialCache, importance_scores
from .metrics import IterationRecord, RunMetrics, collect_metrics
from .model import ForwardRequest, ModelBackend
from .ngram import NGramTable
from .rng import derive_seed, uniform_at
from .sampling import (
    PenaltyWindow,
    SamplerConfig,
    penalized_probs_masked,
    sample_at,
    truncate,
)
from .tree import CandidateTree, TreeConfig, build_tree


class ConfigError(ValueError):
    """Engine configuration violates an invariant."""


class PromptTooShort(ConfigError):
    """Prompt shorter than the cache sink."""


class SessionExhausted(RuntimeError):
    """step() called after the target length was reached."""


@dataclass(frozen=True)
class EngineConfig:
    target_length: int
    sink_size: int = 32
    budget: int = 1024
    tree: TreeConfig = field(default_factory=TreeConfig)
    k: int = 20
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    bonus: bool = True  # emit the target token at the first mismatch

    def validate(self, gamma: int) -> None:
        if self.target_length < 1:
            raise ConfigError("target_length must be >= 1")
        if self.budget <= self.sink_size:
            raise ConfigError("budget must exceed sink_size")
        if self.budget - self.sink_size < gamma + 2:
            raise ConfigError(
                "budget - sink_size must be at least gamma + 2 to fit one "
                "iteration's acceptance"
            )
        if self.tree.depth != gamma + 1:
            raise ConfigError(
                f"tree depth {self.tree.depth} must equal gamma + 1 = {gamma + 1}"
            )
        if self.k < 0:
            raise ConfigError("k must be >= 0")


class Session:
    """One speculative generation run; owns its caches and tables."""

    def __init__(self, model: ModelBackend, prompt: list[int], config: EngineConfig):
        gamma = model.config.gamma
        config.validate(gamma)
        if len(prompt) <= config.sink_size:
            raise PromptTooShort(
                f"prompt length {len(prompt)} must exceed the sink size "
                f"{config.sink_size} (sink entries plus the decoding root)"
            )
        self.model = model
        self.config = config
        self.gamma = gamma
        self.depth = gamma + 1
        self.tokens = list(prompt)
        self.prompt_len = len(prompt)
        self.emitted: list[int] = []
        self.records: list[IterationRecord] = []
        self.window = PenaltyWindow(config.sampler.window, model.config.vocab_size)
        self.ngrams = NGramTable(n=self.depth, k_max=max(64, config.k))
        self.select_seed = derive_seed(config.seed, "branch-select")
        self.wall_times = {"prefill": 0.0, "draft": 0.0, "verify": 0.0}
        self.forward_counts = {"prefill": 0, "draft": 0, "verify": 0}

        t0 = time.perf_counter()
        self.full: FullCache = model.new_cache()
        result = model.forward(ForwardRequest(
            tokens=list(prompt), positions=list(range(len(prompt))),
            cache=self.full, heads_needed=1,
        ))
        self.last_queries = result.queries.sum(axis=0)
        # the newest prompt token is the first decoding root; the partial
        # cache covers only the entries before it
        self.partial: PartialCache = self._build_partial(len(prompt) - 1)
        self.wall_times["prefill"] = time.perf_counter() - t0
        self.forward_counts["prefill"] = 1

    # -- cache plumbing -----------------------------------------------------

    def _body_scores(self, upto: int) -> np.ndarray:
        """Importance of every non-sink full-cache entry, per layer."""
        s = self.config.sink_size
        group = self.model.config.num_heads // self.model.config.num_kv_heads
        return np.stack([
            importance_scores(self.last_queries[layer],
                              self.full.raw_keys(layer, upto)[s:], group)
            for layer in range(self.full.num_layers)
        ])

    def _build_partial(self, upto: int) -> PartialCache:
        """Partial cache over the entries before the pending token.

        Short prompts relax the top-K selection: the partial cache simply
        mirrors the full cache until the sequence outgrows the budget.
        """
        cfg = self.config
        if upto < cfg.budget:
            return kvcache.mirror_partial(self.full, cfg.sink_size, cfg.budget, upto=upto)
        return kvcache.prefill_partial(self.full, cfg.sink_size, cfg.budget,
                                       self._body_scores(upto), upto=upto)

    def _refresh_partial(self) -> None:
        self.partial = self._build_partial(len(self.full))

    # -- penalty windows ------------------------------------------------------

    def _node_masks(self, tree: CandidateTree) -> np.ndarray:
        """Per-row penalty membership for [root] + tree nodes.

        A node at depth d extends the emitted window with its branch prefix
        (ancestors and itself), sliding out the same number of oldest window
        entries that committing those tokens would.
        """
        W = self.config.sampler.window
        vocab = self.model.config.vocab_size
        rows = 1 + len(tree)
        masks = np.zeros((rows, vocab), dtype=bool)
        if W == 0:
            return masks
        ring = len(self.window)
        shrunk = self.window.shrunk_masks(min(self.depth, ring))
        masks[0] = shrunk[0]
        branch: list[list[int]] = [[] for _ in range(len(tree))]
        for i in range(len(tree)):
            par = tree.parent[i]
            branch[i] = (branch[par] if par != -1 else []) + [tree.tokens[i]]
            b = len(branch[i])
            drop = max(0, ring + b - W)
            mask = shrunk[min(drop, len(shrunk) - 1)].copy()
            for tok in branch[i][-min(b, W):]:
                mask[tok] = True
            masks[1 + i] = mask
        return masks

    # -- one iteration --------------------------------------------------------

    def step(self) -> IterationRecord:
        if len(self.emitted) >= self.config.target_length:
            raise SessionExhausted(
                f"{len(self.emitted)} tokens already emitted of {self.config.target_length}"
            )
        cfg = self.config
        sampler = cfg.sampler
        n = len(self.tokens)
        pending = self.tokens[-1]

        refreshed = kvcache.needs_refresh(len(self.full), self.partial)
        if refreshed:
            self._refresh_partial()

        # drafting forward: gamma+1 penalised head distributions from the
        # newest committed token over the partial cache
        t0 = time.perf_counter()
        view = self.partial.draft_view(before_pos=n - 1)
        draft_ctx = len(view)
        draft = self.model.forward(ForwardRequest(
            tokens=[pending], positions=[draft_ctx], cache=view,
        ))
        head_logits = draft.bundles[0]  # (gamma + 1, vocab)
        head_probs = penalized_probs_masked(
            head_logits, np.broadcast_to(self.window.member_mask(), head_logits.shape),
            sampler,
        )
        per_head = [
            [int(t) for t in np.argsort(-head_probs[k], kind="stable")[: cfg.tree.widths[k]]]
            for k in range(self.depth)
        ]
        branches = self.ngrams.retrieve(per_head[0][0], cfg.k)
        tree = build_tree(per_head, branches, cfg.tree)
        self.wall_times["draft"] += time.perf_counter() - t0
        self.forward_counts["draft"] += 1

        # verification forward: the same token as tree root over the full cache
        t0 = time.perf_counter()
        base_len = n - 1
        if len(self.full) > base_len:
            self.full.truncate(base_len)  # first step re-derives the prefill tail row
        rows = 1 + len(tree)
        mask = np.zeros((rows, base_len + rows), dtype=bool)
        mask[:, :base_len] = True
        mask[:, base_len] = True           # every node descends from the root
        for i in range(len(tree)):
            mask[1 + i, base_len + 1 : base_len + 1 + len(tree)] = tree.mask[i]
        positions = [n - 1] + [n + d for d in tree.depth]
        result = self.model.forward(ForwardRequest(
            tokens=[pending] + tree.tokens, positions=positions,
            cache=self.full, attention_mask=mask, heads_needed=1,
        ))
        target_logits = result.bundles[:, 0, :]
        dists = penalized_probs_masked(target_logits, self._node_masks(tree), sampler)

        # position-keyed target tokens: row 0 predicts position n, a node at
        # depth d predicts position n + d + 1
        y = np.empty(rows, dtype=int)
        for r in range(rows):
            pos = n if r == 0 else n + tree.depth[r - 1] + 1
            y[r] = sample_at(truncate(dists[r], sampler.truncation), pos, sampler.seed)

        # exact-match validity per path, then a uniform pick among the longest
        best_v = -1
        best: list[int] = []
        valid_len: list[int] = []
        for idx, path in enumerate(tree.paths):
            expected = int(y[0])
            v = 0
            for j, node in enumerate(path.nodes):
                if path.tokens[j] != expected:
                    break
                v += 1
                expected = int(y[1 + node])
            valid_len.append(v)
            if v > best_v:
                best_v, best = v, [idx]
            elif v == best_v:
                best.append(idx)
        pick = best[int(uniform_at(self.select_seed, n) * len(best))]
        chosen = tree.paths[pick]

        if cfg.bonus:
            accepted = min(best_v + 1, self.depth)
        else:
            accepted = max(best_v, 1)
        ys = [int(y[0])]
        for node in chosen.nodes[: accepted - 1]:
            ys.append(int(y[1 + node]))
        ys = ys[:accepted]

        # keep the root entry plus entries of committed path tokens; the
        # newest committed token is processed as the next step's root
        keep = [0] + [1 + node for node in chosen.nodes[: accepted - 1]]
        self.full.reconcile(base_len, keep)
        self.last_queries = result.queries[keep].sum(axis=0)
        admitted = list(range(n - 1, n - 1 + accepted))
        self.partial.admit(admitted, self.full)
        kvcache.evict_to_budget(self.partial, protected=len(admitted))

        tail = self.emitted[max(0, len(self.emitted) - (self.depth - 1)):]
        self.tokens.extend(ys)
        self.emitted.extend(ys)
        for tok in ys:
            self.window.push(tok)
        self.ngrams.update(ys, tail)
        self.wall_times["verify"] += time.perf_counter() - t0
        self.forward_counts["verify"] += 1

        ngram_credit = accepted if (chosen.origin == "ngram" and best_v == self.depth) else 0
        record = IterationRecord(
            step=len(self.records), accepted=accepted, ngram_accepted=ngram_credit,
            origin=chosen.origin, matched=best_v, tokens=ys, forwards=2,
            refreshed=refreshed, draft_ctx=draft_ctx, verify_ctx=base_len,
            verify_rows=rows, path_index=pick,
        )
        self.records.append(record)
        return record

    @property
    def done(self) -> bool:
        return len(self.emitted) >= self.config.target_length

    def metrics(self) -> RunMetrics:
        return collect_metrics(self.records, self.gamma, self.emitted,
                               dict(self.forward_counts), dict(self.wall_times))


def prefill(model: ModelBackend, prompt: list[int], config: EngineConfig) -> Session:
    """Build a session: full cache over the prompt, partial cache from it."""
    return Session(model, prompt, config)


def generate(model: ModelBackend, prompt: list[int],
             config: EngineConfig) -> tuple[list[int], RunMetrics]:
    """Run the speculative loop to the target length (it may overshoot by up
    to gamma tokens). Returns the emitted tokens and run metrics."""
    session = prefill(model, prompt, config)
    while not session.done:
        session.step()
    return session.emitted, session.metrics()


def generate_ar(model: ModelBackend, prompt: list[int], config: EngineConfig) -> list[int]:
    """Plain decoding with the full cache: the losslessness oracle.

    Uses the same sampler and position-keyed deviates as :func:`generate`;
    its output is the byte-level reference the speculative path must equal.
    """
    config.validate(model.config.gamma)
    if len(prompt) <= config.sink_size:
        raise PromptTooShort(
            f"prompt length {len(prompt)} must exceed the sink size {config.sink_size}"
        )
    sampler = config.sampler
    cache = model.new_cache()
    result = model.forward(ForwardRequest(
        tokens=list(prompt), positions=list(range(len(prompt))),
        cache=cache, heads_needed=1,
    ))
    logits = result.bundles[-1, 0]
    window = PenaltyWindow(sampler.window, model.config.vocab_size)
    tokens = list(prompt)
    emitted: list[int] = []
    while True:
        dist = penalized_probs_masked(logits, window.member_mask(), sampler)
        tok = sample_at(truncate(dist, sampler.truncation), len(tokens), sampler.seed)
        emitted.append(tok)
        window.push(tok)
        tokens.append(tok)
        if len(emitted) >= config.target_length:
            return emitted
        result = model.forward(ForwardRequest(
            tokens=[tok], positions=[len(tokens) - 1], cache=cache, heads_needed=1,
        ))
        logits = result.bundles[-1, 0]
