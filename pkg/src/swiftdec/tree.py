"""Candidate tree for batched verification.

The per-head top-s_k candidates form a trie realising the full Cartesian
product of the head predictions (shared prefixes merged), so the head part of
a widths (s_1..s_K) tree has prod(s_k) leaf paths. Retrieved n-grams join as
linear chains, merging greedily with existing nodes on token equality and
dropping entirely when they duplicate an existing path.

Every node carries its depth as the position offset, and the attention mask
is the reflexive ancestor closure: mask[i][j] = 1 iff node j is i's ancestor
or i itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class WidthMismatch(ValueError):
    """Per-head candidate lists disagree with the configured widths."""


class NGramLengthMismatch(ValueError):
    """An n-gram branch is not exactly tree-depth long."""


@dataclass(frozen=True)
class TreeConfig:
    """Per-head candidate counts s_1..s_K; K must equal gamma + 1."""

    widths: tuple[int, ...] = (1, 3, 3, 3)

    def __post_init__(self) -> None:
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("widths must be a non-empty list of counts >= 1")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def head_leaves(self) -> int:
        return int(np.prod(self.widths))

    @classmethod
    def parse(cls, text: str) -> "TreeConfig":
        return cls(tuple(int(w) for w in text.split(",")))


@dataclass
class PathInfo:
    tokens: tuple[int, ...]
    nodes: tuple[int, ...]   # node ids along the path, depth order
    origin: str              # "head" or "ngram"
    origin_index: int        # Cartesian rank or retrieval rank


@dataclass
class CandidateTree:
    tokens: list[int]
    parent: list[int]        # -1 for depth-0 roots
    depth: list[int]
    mask: np.ndarray         # (n, n) bool, ancestor-or-self closure
    paths: list[PathInfo]
    head_node_count: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def position_offsets(self) -> list[int]:
        return list(self.depth)


def _closure_mask(parent: list[int]) -> np.ndarray:
    n = len(parent)
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        j = i
        while j != -1:
            mask[i, j] = True
            j = parent[j]
    return mask


def build_tree(
    per_head_topk: list[list[int]],
    ngram_branches: list[tuple[int, ...]] | None = None,
    widths: TreeConfig | None = None,
) -> CandidateTree:
    """Merge head candidates (Cartesian product trie) and n-gram chains.

    ``per_head_topk[k]`` lists the depth-k candidates, one list per head;
    every n-gram branch must span the full depth and start at the head
    argmax, ``per_head_topk[0][0]``.
    """
    K = len(per_head_topk)
    if widths is not None:
        if widths.depth != K:
            raise WidthMismatch(f"{K} candidate lists for widths {widths.widths}")
        for k, cands in enumerate(per_head_topk):
            if len(cands) != widths.widths[k]:
                raise WidthMismatch(
                    f"head {k} has {len(cands)} candidates, widths want {widths.widths[k]}"
                )
    tokens: list[int] = []
    parent: list[int] = []
    depth: list[int] = []
    children: list[dict[int, int]] = []  # token -> node id, per node
    roots: dict[int, int] = {}

    def add_node(par: int, tok: int, dep: int) -> int:
        node = len(tokens)
        tokens.append(tok)
        parent.append(par)
        depth.append(dep)
        children.append({})
        if par == -1:
            roots[tok] = node
        else:
            children[par][tok] = node
        return node

    def walk_or_add(path_tokens: tuple[int, ...]) -> tuple[int, ...]:
        """Greedy merge by token equality; returns node ids along the path."""
        nodes = []
        cur = -1
        for dep, tok in enumerate(path_tokens):
            table = roots if cur == -1 else children[cur]
            nxt = table.get(tok)
            if nxt is None:
                nxt = add_node(cur, tok, dep)
            nodes.append(nxt)
            cur = nxt
        return tuple(nodes)

    paths: list[PathInfo] = []
    seen: dict[tuple[int, ...], int] = {}

    def head_products(prefix: tuple[int, ...], k: int):
        if k == K:
            yield prefix
            return
        for tok in per_head_topk[k]:
            yield from head_products(prefix + (tok,), k + 1)

    for rank, combo in enumerate(head_products((), 0)):
        nodes = walk_or_add(combo)
        seen[combo] = rank
        paths.append(PathInfo(combo, nodes, "head", rank))
    head_nodes = len(tokens)

    for rank, gram in enumerate(ngram_branches or []):
        gram = tuple(int(t) for t in gram)
        if len(gram) != K:
            raise NGramLengthMismatch(f"branch {gram} has length {len(gram)}, tree depth is {K}")
        if per_head_topk[0] and gram[0] != per_head_topk[0][0]:
            raise NGramLengthMismatch(
                f"branch {gram} does not start at the head argmax {per_head_topk[0][0]}"
            )
        if gram in seen:
            continue  # duplicates an existing path
        nodes = walk_or_add(gram)
        seen[gram] = len(paths)
        paths.append(PathInfo(gram, nodes, "ngram", rank))

    return CandidateTree(
        tokens=tokens,
        parent=parent,
        depth=depth,
        mask=_closure_mask(parent),
        paths=paths,
        head_node_count=head_nodes,
    )


def mask_check(tree: CandidateTree) -> bool:
    """Recompute the ancestor closure by graph walk and compare."""
    return bool(np.array_equal(tree.mask, _closure_mask(tree.parent)))
