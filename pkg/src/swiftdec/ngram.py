"""Token reutilization: exact frequency counts of n-grams over the generated
sequence, retrievable by first token.

Only generated tokens are counted; prompt text never enters the table (it was
not produced by the model, so its phrase statistics are the wrong ones to
reuse). Retrieval returns the most frequent n-grams starting with a given
token, frequency ties going to the gram whose latest occurrence is most
recent. Counts are exact hash-map counts; at the scale this engine targets
(about 100K tokens of 4-grams) a sketch would only cost auditability.
"""

from __future__ import annotations

import json
from typing import IO


class NGramTable:
    def __init__(self, n: int = 4, k_max: int = 64):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self.k_max = k_max
        self._freq: dict[tuple[int, ...], int] = {}
        self._last: dict[tuple[int, ...], int] = {}
        self._by_first: dict[int, set[tuple[int, ...]]] = {}
        self._clock = 0

    def __len__(self) -> int:
        return len(self._freq)

    def frequency(self, gram: tuple[int, ...]) -> int:
        return self._freq.get(gram, 0)

    def update(self, newly_committed: list[int], history_tail: list[int]) -> None:
        """Count every n-gram window that ends inside the new span.

        ``history_tail`` supplies up to n-1 generated tokens preceding the
        span; at the start of generation it may be shorter, in which case the
        windows that would reach before the sequence simply do not exist.
        """
        seq = list(history_tail) + list(newly_committed)
        start = len(history_tail)
        for end in range(start, len(seq)):
            if end + 1 < self.n:
                continue
            gram = tuple(seq[end + 1 - self.n : end + 1])
            self._clock += 1
            self._freq[gram] = self._freq.get(gram, 0) + 1
            self._last[gram] = self._clock
            self._by_first.setdefault(gram[0], set()).add(gram)

    def retrieve(self, first_token: int, k: int) -> list[tuple[int, ...]]:
        """Up to k most frequent n-grams starting with ``first_token``.

        k = 0 disables reutilization and returns nothing.
        """
        if k > self.k_max:
            raise ValueError(f"k {k} exceeds k_max {self.k_max}")
        if k <= 0:
            return []
        grams = self._by_first.get(first_token)
        if not grams:
            return []
        ranked = sorted(grams, key=lambda g: (-self._freq[g], -self._last[g]))
        return ranked[:k]

    def dump_jsonl(self, fh: IO[str]) -> None:
        """One JSON object per gram: {gram, freq}."""
        for gram in sorted(self._freq, key=lambda g: (-self._freq[g], g)):
            fh.write(json.dumps({"gram": list(gram), "freq": self._freq[gram]}) + "\n")
