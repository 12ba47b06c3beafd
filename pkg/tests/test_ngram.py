import io
import json

import numpy as np
import pytest

from swiftdec.ngram import NGramTable


def brute_force_counts(sequence, n):
    """Sliding-window recount over the whole generated sequence."""
    counts = {}
    for i in range(len(sequence) - n + 1):
        gram = tuple(sequence[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


class TestUpdate:
    def test_single_commit_with_full_tail(self):
        table = NGramTable(n=4)
        table.update([9], history_tail=[1, 2, 3])
        assert len(table) == 1
        assert table.frequency((1, 2, 3, 9)) == 1

    def test_ababab_frequencies(self):
        table = NGramTable(n=2)
        seq = [0, 1, 0, 1, 0, 1]  # A B A B A B
        table.update(seq, history_tail=[])
        assert table.frequency((0, 1)) == 3
        assert table.frequency((1, 0)) == 2

    def test_short_commit_without_tail(self):
        table = NGramTable(n=4)
        table.update([1, 2], history_tail=[])
        assert len(table) == 0

    def test_incremental_equals_brute_force(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            n = int(rng.integers(2, 5))
            table = NGramTable(n=n)
            seq: list[int] = []
            length = 10000 if trial == 0 else int(rng.integers(50, 500))
            while len(seq) < length:
                chunk = rng.integers(0, 6, size=int(rng.integers(1, 5))).tolist()
                table.update(chunk, history_tail=seq[-(n - 1):] if n > 1 else [])
                seq.extend(chunk)
            expect = brute_force_counts(seq, n)
            assert len(table) == len(expect)
            for gram, freq in expect.items():
                assert table.frequency(gram) == freq


class TestRetrieve:
    def make_table(self):
        table = NGramTable(n=4)
        table.update([0, 1, 2, 3] * 5, history_tail=[])     # (0,1,2,3) x5 and rotations x4
        table.update([0, 7, 8, 9] * 3, history_tail=[])
        table.update([4, 5, 6, 7] * 9, history_tail=[])
        return table

    def test_empty_table(self):
        assert NGramTable(n=4).retrieve(0, 5) == []

    def test_filtered_sort(self):
        table = self.make_table()
        got = table.retrieve(0, 2)
        assert got[0] == (0, 1, 2, 3)
        assert got[1] == (0, 7, 8, 9)
        assert all(g[0] == 0 for g in got)

    def test_frequencies_non_increasing(self):
        table = self.make_table()
        got = table.retrieve(0, 10)
        freqs = [table.frequency(g) for g in got]
        assert freqs == sorted(freqs, reverse=True)

    def test_k_zero_disables(self):
        assert self.make_table().retrieve(0, 0) == []

    def test_k_above_cap_rejected(self):
        table = NGramTable(n=4, k_max=8)
        with pytest.raises(ValueError):
            table.retrieve(0, 9)

    def test_fewer_than_k_returned(self):
        table = NGramTable(n=2)
        table.update([1, 2], history_tail=[])
        assert table.retrieve(1, 5) == [(1, 2)]

    def test_tie_broken_by_recency(self):
        table = NGramTable(n=2)
        table.update([1, 2], history_tail=[])   # older
        table.update([1, 3], history_tail=[])   # newer, same frequency
        assert table.retrieve(1, 2) == [(1, 3), (1, 2)]
        table.update([1, 2], history_tail=[])   # now more frequent
        assert table.retrieve(1, 2) == [(1, 2), (1, 3)]


def test_dump_jsonl_schema():
    table = NGramTable(n=2)
    table.update([1, 2, 1, 2], history_tail=[])
    buf = io.StringIO()
    table.dump_jsonl(buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert {"gram": [1, 2], "freq": 2} in rows
