"""Lossless speculative decoding for long sequence generation.

A draft-then-verify engine over toy-scale model backends: the target model
drafts several tokens per forward through residual prediction heads, reuses
frequent n-grams from its own output as extra draft branches, drafts against
a budgeted dynamically-refreshed KV cache, verifies all branches in one
masked tree forward against the full cache, and commits the longest
exact-match prefix plus a bonus token. Position-keyed sampling makes the
output byte-identical to plain autoregressive decoding.
"""

from .engine import EngineConfig, Session, generate, generate_ar, prefill
from .kvcache import (
    FullCache,
    PartialCache,
    evict_to_budget,
    importance_scores,
    needs_refresh,
    prefill_partial,
    refresh,
)
from .metrics import (
    CostParams,
    IterationRecord,
    RunMetrics,
    acceptance_rate,
    distinct_n,
    ngram_acceptance_rate,
    simulated_speedup,
    speedup,
)
from .model import (
    ForwardRequest,
    LogitBundle,
    ModelConfig,
    TableLM,
    TinyTransformer,
    chained_draft_logits,
)
from .ngram import NGramTable
from .sampling import PenaltyWindow, SamplerConfig, Truncation, penalized_probs, sample_at, truncate
from .tree import CandidateTree, TreeConfig, build_tree, mask_check

__all__ = [
    "EngineConfig", "Session", "generate", "generate_ar", "prefill",
    "FullCache", "PartialCache", "evict_to_budget", "importance_scores",
    "needs_refresh", "prefill_partial", "refresh",
    "CostParams", "IterationRecord", "RunMetrics", "acceptance_rate",
    "distinct_n", "ngram_acceptance_rate", "simulated_speedup", "speedup",
    "ForwardRequest", "LogitBundle", "ModelConfig", "TableLM",
    "TinyTransformer", "chained_draft_logits",
    "NGramTable",
    "PenaltyWindow", "SamplerConfig", "Truncation", "penalized_probs",
    "sample_at", "truncate",
    "CandidateTree", "TreeConfig", "build_tree", "mask_check",
]
