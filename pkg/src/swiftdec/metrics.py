"""Run metrics and the memory-bandwidth cost model.

Acceptance rate alpha = sum(a_i) / ((gamma + 1) * T) over T iterations, where
a_i counts the tokens committed at step i. The n-gram acceptance rate beta
credits an iteration only when the chosen branch was an n-gram branch whose
full candidate length was accepted. Distinct-n is unique n-gram windows over
total windows, computed on token ids. Speedup is the ratio of average
per-token latencies, either measured or simulated.

The cost model treats each forward pass as
max(bytes_loaded / bandwidth, flops / peak_flops): an autoregressive run
loads the weights plus a growing KV cache once per token, a speculative run
loads one budget-capped drafting forward plus one full-cache verification
forward per iteration and amortises them over every accepted token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable


class SequenceTooShort(ValueError):
    """Fewer tokens than the n-gram size."""


@dataclass
class IterationRecord:
    """One engine step: what was drafted, verified and committed."""

    step: int
    accepted: int                # a_i, bonus included
    ngram_accepted: int          # b_i, full credit or zero
    origin: str                  # "head" or "ngram"
    matched: int                 # draft tokens that matched before the bonus
    tokens: list[int]            # committed this step
    forwards: int = 2
    refreshed: bool = False
    draft_ctx: int = 0           # partial-cache entries read while drafting
    verify_ctx: int = 0          # full-cache entries read while verifying
    verify_rows: int = 0         # rows in the verification forward
    path_index: int = 0          # which candidate path won the random pick

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "IterationRecord":
        return cls(**json.loads(line))


@dataclass
class RunMetrics:
    iterations: int
    gamma: int
    accepted: list[int]
    ngram_accepted: list[int]
    alpha: float
    beta: float
    emitted: int
    distinct: dict[int, float]
    forward_counts: dict[str, int] = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distinct"] = {str(k): v for k, v in self.distinct.items()}
        return d


def acceptance_rate(records: Iterable[IterationRecord], gamma: int) -> float:
    recs = list(records)
    if not recs:
        raise ValueError("acceptance rate needs at least one iteration")
    return sum(r.accepted for r in recs) / ((gamma + 1) * len(recs))


def ngram_acceptance_rate(records: Iterable[IterationRecord], gamma: int) -> float:
    recs = list(records)
    if not recs:
        raise ValueError("acceptance rate needs at least one iteration")
    return sum(r.ngram_accepted for r in recs) / ((gamma + 1) * len(recs))


def speedup(ar_cost: float, swift_cost: float) -> float:
    """Ratio of average per-token latencies (> 1 means faster)."""
    if ar_cost <= 0 or swift_cost <= 0:
        raise ValueError("latencies must be positive")
    return ar_cost / swift_cost


def distinct_n(tokens: list[int], n: int) -> float:
    if len(tokens) < n:
        raise SequenceTooShort(f"{len(tokens)} tokens cannot form an {n}-gram")
    windows = len(tokens) - n + 1
    unique = len({tuple(tokens[i : i + n]) for i in range(windows)})
    return unique / windows


def distinct_average(tokens: list[int], ns: tuple[int, ...] = (1, 2, 3, 4)) -> dict[int, float]:
    return {n: distinct_n(tokens, n) for n in ns if len(tokens) >= n}


def collect_metrics(
    records: list[IterationRecord],
    gamma: int,
    emitted_tokens: list[int],
    forward_counts: dict[str, int] | None = None,
    wall_times: dict[str, float] | None = None,
) -> RunMetrics:
    return RunMetrics(
        iterations=len(records),
        gamma=gamma,
        accepted=[r.accepted for r in records],
        ngram_accepted=[r.ngram_accepted for r in records],
        alpha=acceptance_rate(records, gamma),
        beta=ngram_acceptance_rate(records, gamma),
        emitted=len(emitted_tokens),
        distinct=distinct_average(emitted_tokens),
        forward_counts=forward_counts or {},
        wall_times=wall_times or {},
    )


# -- trace i/o ---------------------------------------------------------------

def write_trace(records: Iterable[IterationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_trace(path: str | Path) -> list[IterationRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(IterationRecord.from_json(line))
    return records


# -- cost model --------------------------------------------------------------

@dataclass(frozen=True)
class CostParams:
    """Hardware and model byte/flop counts for the latency simulation.

    Defaults follow an A100-80G running an 8B model in BF16: 2.04e12 B/s of
    memory bandwidth, 312e12 FLOPS, 15 GB of weights. ``ops_per_row`` is the
    per-token flop count of one forward; the default of one flop per weight
    byte (two per BF16 parameter) keeps single-row decoding firmly in the
    memory-bound regime, which is the point the simulation illustrates.
    """

    bandwidth: float = 2.04e12
    flops: float = 312e12
    weight_bytes: float = 15.0e9
    kv_bytes_per_token: float = 131072.0  # 2 * 32 layers * 8 KV heads * 128 dim * 2 B
    ops_per_row: float | None = None

    def __post_init__(self) -> None:
        if min(self.bandwidth, self.flops, self.weight_bytes) <= 0:
            raise ValueError("hardware parameters must be positive")

    @property
    def row_ops(self) -> float:
        return self.weight_bytes if self.ops_per_row is None else self.ops_per_row


def load_time(num_bytes: float, bandwidth: float) -> float:
    return num_bytes / bandwidth


def compute_time(ops: float, flops: float) -> float:
    return ops / flops


def forward_time(params: CostParams, kv_tokens: int, rows: int = 1) -> float:
    """One forward pass: weights plus active KV against compute, whichever
    dominates."""
    loaded = params.weight_bytes + params.kv_bytes_per_token * kv_tokens
    return max(load_time(loaded, params.bandwidth),
               compute_time(rows * params.row_ops, params.flops))


def ar_generation_cost(params: CostParams, prefix_len: int, gen_len: int) -> float:
    """Total seconds for autoregressive decoding: one forward per token with a
    KV cache growing from the prompt."""
    total = 0.0
    for i in range(gen_len):
        total += forward_time(params, prefix_len + i, rows=1)
    return total


def swift_generation_cost(params: CostParams, records: Iterable[IterationRecord]) -> float:
    """Total seconds for a speculative run replayed from its trace."""
    total = 0.0
    for rec in records:
        total += forward_time(params, rec.draft_ctx, rows=1)
        total += forward_time(params, rec.verify_ctx, rows=max(rec.verify_rows, 1))
    return total


def simulated_speedup(params: CostParams, records: list[IterationRecord],
                      prefix_len: int) -> float:
    """Cost-model speedup of a traced run against its autoregressive twin."""
    emitted = sum(r.accepted for r in records)
    if emitted == 0:
        raise ValueError("trace committed no tokens")
    swift = swift_generation_cost(params, records) / emitted
    ar = ar_generation_cost(params, prefix_len, emitted) / emitted
    return speedup(ar, swift)
