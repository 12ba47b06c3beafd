"""Sampling pipeline: windowed repetition penalty, truncation rules, drawing.

The probability of token i is

    p_i = exp(l_i / (t * I_i)) / sum_j exp(l_j / (t * I_j))

where I_i = theta when token i appeared among the most recent `window`
generated tokens and 1.0 otherwise. The divisor form is applied literally,
including its counterintuitive effect on negative logits (penalising a
negative logit raises its probability). Set ``ctrl_style=True`` for the
multiply-if-negative variant; it is off by default.

Truncation supports top-p (smallest prefix of the sorted distribution with
cumulative mass >= p), min-p (keep tokens with prob >= p_base * p_max) and
eta (keep tokens with prob >= min(eps, alpha * exp(-entropy)), alpha
defaulting to sqrt(eps)).

Draws are inverse-CDF over a counter-based deviate keyed by
(seed, absolute position), see :mod:`swiftdec.rng`.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .rng import uniform_at


@dataclass(frozen=True)
class Truncation:
    """One truncation rule: kind in {"top_p", "min_p", "eta"}."""

    kind: str
    value: float
    eta_alpha: float | None = None  # eta only; None means sqrt(eps)

    def __post_init__(self) -> None:
        if self.kind not in ("top_p", "min_p", "eta"):
            raise ValueError(f"unknown truncation kind: {self.kind}")
        if not (0.0 < self.value <= 1.0):
            raise ValueError(f"truncation parameter must be in (0, 1], got {self.value}")

    @classmethod
    def top_p(cls, p: float) -> "Truncation":
        return cls("top_p", p)

    @classmethod
    def min_p(cls, p_base: float) -> "Truncation":
        return cls("min_p", p_base)

    @classmethod
    def eta(cls, eps: float, alpha: float | None = None) -> "Truncation":
        return cls("eta", eps, alpha)


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler knobs. Defaults follow the LLaMA3.1-style profile."""

    temperature: float = 1.0
    theta: float = 1.2          # 1.0 disables the penalty
    window: int = 1024
    truncation: Truncation = field(default_factory=lambda: Truncation.min_p(0.1))
    seed: int = 0
    ctrl_style: bool = False    # multiply-if-negative penalty variant

    def __post_init__(self) -> None:
        if self.temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if self.theta < 1.0:
            raise ValueError("theta must be >= 1.0")
        if self.window < 0:
            raise ValueError("window must be >= 0")


class PenaltyWindow:
    """Ring of the most recent `capacity` generated token ids.

    Tracks multiplicity so membership stays exact as tokens slide out.
    """

    def __init__(self, capacity: int, vocab_size: int):
        self.capacity = capacity
        self.vocab_size = vocab_size
        self._ring: deque[int] = deque()
        self._counts: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._ring)

    def __contains__(self, token: int) -> bool:
        return self._counts.get(token, 0) > 0

    def push(self, token: int) -> None:
        if self.capacity == 0:
            return
        if len(self._ring) == self.capacity:
            old = self._ring.popleft()
            c = self._counts[old] - 1
            if c:
                self._counts[old] = c
            else:
                del self._counts[old]
        self._ring.append(token)
        self._counts[token] = self._counts.get(token, 0) + 1

    def members(self) -> set[int]:
        return set(self._counts)

    def member_mask(self) -> np.ndarray:
        mask = np.zeros(self.vocab_size, dtype=bool)
        if self._counts:
            mask[list(self._counts)] = True
        return mask

    def shrunk_masks(self, max_drop: int) -> list[np.ndarray]:
        """``masks[j]`` = membership of the ring with its j oldest entries gone.

        Used to splice a draft branch onto the window without copying the
        ring: a branch of length b slides out ``max(0, len(ring) + b -
        capacity)`` of the oldest entries.
        """
        masks = [self.member_mask()]
        counts = dict(self._counts)
        it = iter(self._ring)
        for _ in range(min(max_drop, len(self._ring))):
            mask = masks[-1].copy()
            old = next(it)
            counts[old] -= 1
            if counts[old] == 0:
                mask[old] = False
            masks.append(mask)
        while len(masks) <= max_drop:
            masks.append(masks[-1])
        return masks


def penalized_logit_scale(
    logits: np.ndarray, member_mask: np.ndarray, temperature: float, theta: float,
    ctrl_style: bool = False,
) -> np.ndarray:
    """Scaled logits l_i / (t * I_i); inputs may be batched (..., vocab)."""
    if theta == 1.0 or not member_mask.any():
        return logits / temperature
    if ctrl_style:
        penalised = np.where(logits < 0, logits * theta, logits / theta)
        return np.where(member_mask, penalised, logits) / temperature
    divisor = np.where(member_mask, temperature * theta, temperature)
    return logits / divisor


def softmax(scaled: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; tolerates -inf entries."""
    m = np.max(scaled, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(scaled - m)
    e = np.nan_to_num(e, nan=0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def penalized_probs(
    logits: np.ndarray, window: PenaltyWindow, config: SamplerConfig,
) -> np.ndarray:
    """Probability distribution after penalty and temperature (no truncation)."""
    scaled = penalized_logit_scale(
        logits, window.member_mask(), config.temperature, config.theta, config.ctrl_style,
    )
    return softmax(scaled)


def penalized_probs_masked(
    logits: np.ndarray, member_mask: np.ndarray, config: SamplerConfig,
) -> np.ndarray:
    """Like :func:`penalized_probs` with an explicit membership mask.

    Both arguments may carry a leading batch axis; masks are per row.
    """
    scaled = penalized_logit_scale(
        logits, member_mask, config.temperature, config.theta, config.ctrl_style,
    )
    return softmax(scaled)


def entropy(dist: np.ndarray) -> float:
    p = dist[dist > 0.0]
    return float(-np.sum(p * np.log(p)))


def truncate(dist: np.ndarray, rule: Truncation) -> np.ndarray:
    """Zero out tokens outside the rule's support and renormalise.

    The argmax always survives, so the support is never empty.
    """
    if rule.kind == "top_p":
        order = np.argsort(-dist, kind="stable")
        csum = np.cumsum(dist[order])
        cut = int(np.searchsorted(csum, rule.value, side="left"))
        cut = min(cut, len(dist) - 1)
        keep = order[: cut + 1]
        out = np.zeros_like(dist)
        out[keep] = dist[keep]
    elif rule.kind == "min_p":
        thresh = rule.value * float(np.max(dist))
        out = np.where(dist >= thresh, dist, 0.0)
    else:  # eta
        alpha = rule.eta_alpha if rule.eta_alpha is not None else math.sqrt(rule.value)
        eta = min(rule.value, alpha * math.exp(-entropy(dist)))
        out = np.where(dist >= eta, dist, 0.0)
        if not out.any():  # eta above p_max: keep the argmax
            out = np.zeros_like(dist)
            out[int(np.argmax(dist))] = dist[int(np.argmax(dist))]
    return out / out.sum()


def sample_at(dist: np.ndarray, position: int, seed: int) -> int:
    """Inverse-CDF draw with the deviate keyed by (seed, position)."""
    u = uniform_at(seed, position)
    csum = np.cumsum(dist)
    idx = int(np.searchsorted(csum, u, side="right"))
    return min(idx, len(dist) - 1)
