"""Bounded multi-resolution event forest.

Leaves are created from closed windows; whenever the root count exceeds
``n_r`` the adjacent root pair with the best merge score is fused into a new
parent. Nodes are never deleted, so retrieval can descend to any granularity.

Readers work on a :class:`ForestView`, an O(1) snapshot: node storage is
append-only and a view only trusts ids below its own node count, so later
merges (which add parents) are invisible to it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .stream_core import FrameRef
from .tiers import WindowBatch, uniform_sample

NORM_EPS = 1e-12
# merge scores this close to the best count as tied (rounding noise, not preference)
TIE_EPS = 1e-12


class ForestError(ValueError):
    pass


class NonContiguousWindow(ForestError):
    pass


class EmbeddingDimMismatch(ForestError):
    pass


class TooFewRoots(ForestError):
    pass


@dataclass(frozen=True)
class EventNode:
    id: int
    start: float
    end: float
    keyframes: tuple[FrameRef, ...]
    summary: str
    embedding: np.ndarray = field(repr=False, compare=False)
    level: int = 0
    children: tuple[int, ...] = ()
    norm: float = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "norm", _norm(self.embedding))

    @property
    def interval(self) -> tuple[float, float]:
        return (self.start, self.end)

    @property
    def is_leaf(self) -> bool:
        return not self.children


def _norm(v: np.ndarray) -> float:
    return math.sqrt(float(np.dot(v, v)))


def cosine(u: np.ndarray, v: np.ndarray, nu: float | None = None, nv: float | None = None) -> float:
    """dot(u, v) / (|u| |v|), or 0 when either norm is below 1e-12."""
    nu = _norm(u) if nu is None else nu
    nv = _norm(v) if nv is None else nv
    if nu < NORM_EPS or nv < NORM_EPS:
        return 0.0
    return min(1.0, max(-1.0, float(np.dot(u, v)) / (nu * nv)))


def merge_score(a: EventNode, b: EventNode, lam: float) -> float:
    """cos(e_a, e_b) - lam * (d_a + d_b)."""
    return cosine(a.embedding, b.embedding, a.norm, b.norm) - lam * (a.level + b.level)


# fuse(a, b) -> (merged summary, merged embedding); supplied by the engine
Fuser = Callable[[EventNode, EventNode], "tuple[str, np.ndarray]"]


class ForestView:
    """Read-only snapshot of a forest."""

    def __init__(self, nodes: list[EventNode], parents: list[int], count: int,
                 roots: tuple[int, ...], unit: np.ndarray, embed_dim: int):
        self._nodes = nodes
        self._parents = parents
        self._count = count
        self.roots = roots
        self._unit = unit
        self.embed_dim = embed_dim

    def __len__(self) -> int:
        return self._count

    def node(self, node_id: int) -> EventNode:
        if not 0 <= node_id < self._count:
            raise KeyError(node_id)
        return self._nodes[node_id]

    def nodes(self) -> list[EventNode]:
        return self._nodes[: self._count]

    def root_nodes(self) -> list[EventNode]:
        return [self._nodes[i] for i in self.roots]

    def parent(self, node_id: int) -> int | None:
        p = self._parents[node_id]
        return p if 0 <= p < self._count else None

    def ancestors(self, node_id: int) -> list[int]:
        out = []
        p = self.parent(node_id)
        while p is not None:
            out.append(p)
            p = self.parent(p)
        return out

    def descendants(self, node_id: int) -> list[int]:
        out = []
        stack = list(self._nodes[node_id].children)
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(self._nodes[c].children)
        return out

    @property
    def flushed_end(self) -> float | None:
        return self._nodes[self.roots[-1]].end if self.roots else None

    def root_summaries(self) -> list[tuple[tuple[float, float], str]]:
        return [((n.start, n.end), n.summary) for n in self.root_nodes()]

    def similarities(self, query: np.ndarray) -> np.ndarray:
        """Cosine of ``query`` against every node, indexed by node id."""
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.embed_dim,):
            raise EmbeddingDimMismatch(f"query has shape {query.shape}, expected ({self.embed_dim},)")
        qn = float(np.linalg.norm(query))
        if qn < NORM_EPS or self._count == 0:
            return np.zeros(self._count)
        return self._unit[: self._count] @ (query / qn)

    def retrieve_pruned(self, query: np.ndarray, k: int) -> list[EventNode]:
        """Greedy top-k over all nodes, pruning the lineage of every pick.

        Similarities within ``TIE_EPS`` of the best remaining one are tied and
        the older node (smaller id) wins.
        """
        scores = self.similarities(query)
        if k <= 0 or self._count == 0:
            return []
        order = [int(i) for i in np.lexsort((np.arange(self._count), -scores))]
        chosen: list[int] = []
        chosen_set: set[int] = set()
        # chosen nodes and their ancestors are excluded outright
        blocked: set[int] = set()

        def eligible(c: int) -> bool:
            # c is a descendant of a chosen node if one lies on its parent chain
            return c not in blocked and not (chosen_set and any(a in chosen_set for a in self.ancestors(c)))

        pos = 0
        while len(chosen) < k:
            while pos < len(order) and not eligible(order[pos]):
                pos += 1
            if pos == len(order):
                break
            best = order[pos]
            floor = scores[best] - TIE_EPS
            j = pos + 1
            while j < len(order) and scores[order[j]] >= floor:
                if order[j] < best and eligible(order[j]):
                    best = order[j]
                j += 1
            chosen.append(best)
            chosen_set.add(best)
            blocked.add(best)
            blocked.update(self.ancestors(best))
        return [self._nodes[i] for i in chosen]


class EventForest:
    """Mutable forest owned by a single writer.

    Every public mutation ends by publishing ``(node count, roots, unit
    matrix)`` in one assignment; :meth:`view` reads only the published triple,
    so readers never observe a half-applied insertion or merge.
    """

    def __init__(self, n_r: int, lam: float, n_f: int, embed_dim: int, bounded: bool = True):
        self.n_r = n_r
        self.lam = lam
        self.n_f = n_f
        self.embed_dim = embed_dim
        self.bounded = bounded
        self._nodes: list[EventNode] = []
        self._parents: list[int] = []
        self._count = 0
        self._unit = np.zeros((16, embed_dim))
        self._roots: list[int] = []
        # score of (roots[i], roots[i+1]) at index i
        self._pair_scores: list[float] = []
        self.merge_count = 0
        self._pub: tuple[int, tuple[int, ...], np.ndarray] = (0, (), self._unit)

    def _publish(self) -> None:
        self._pub = (self._count, tuple(self._roots), self._unit)

    def view(self) -> ForestView:
        count, roots, unit = self._pub
        return ForestView(self._nodes, self._parents, count, roots, unit, self.embed_dim)

    @property
    def roots(self) -> tuple[int, ...]:
        return self._pub[1]

    def __len__(self) -> int:
        return self._pub[0]

    def node(self, node_id: int) -> EventNode:
        return self.view().node(node_id)

    def nodes(self) -> list[EventNode]:
        return self.view().nodes()

    def root_nodes(self) -> list[EventNode]:
        return self.view().root_nodes()

    def root_summaries(self) -> list[tuple[tuple[float, float], str]]:
        return self.view().root_summaries()

    def retrieve_pruned(self, query: np.ndarray, k: int) -> list[EventNode]:
        return self.view().retrieve_pruned(query, k)

    @property
    def flushed_end(self) -> float | None:
        return self._nodes[self._roots[-1]].end if self._roots else None

    def _check_embedding(self, embedding) -> np.ndarray:
        emb = np.array(embedding, dtype=np.float64)
        if emb.shape != (self.embed_dim,):
            raise EmbeddingDimMismatch(f"embedding has shape {emb.shape}, expected ({self.embed_dim},)")
        emb.setflags(write=False)
        return emb

    def _append(self, node: EventNode) -> None:
        if self._count == len(self._unit):
            grown = np.zeros((2 * len(self._unit), self.embed_dim))
            grown[: self._count] = self._unit[: self._count]
            self._unit = grown
        if node.norm >= NORM_EPS:
            self._unit[self._count] = node.embedding / node.norm
        self._nodes.append(node)
        self._parents.append(-1)
        self._count += 1

    def insert_leaf(self, batch: WindowBatch, summary: str, embedding, fuse: Fuser | None = None) -> EventNode:
        """Append a level-0 node for ``batch`` and restore the root bound."""
        if self._roots and batch.start != self.flushed_end:
            raise NonContiguousWindow(f"window starts at {batch.start}, flushed range ends at {self.flushed_end}")
        emb = self._check_embedding(embedding)
        leaf = EventNode(self._count, batch.start, batch.end, tuple(uniform_sample(batch.keyframes, self.n_f)),
                         summary, emb)
        self._append(leaf)
        if self._roots:
            self._pair_scores.append(merge_score(self._nodes[self._roots[-1]], leaf, self.lam))
        self._roots.append(leaf.id)
        try:
            if self.bounded:
                self._enforce(fuse)
        finally:
            self._publish()
        return leaf

    def select_merge_pair(self) -> int:
        """Index i of the best adjacent root pair (i, i+1).

        Scores within ``TIE_EPS`` of the maximum are tied and the earliest wins.
        """
        if len(self._roots) < 2:
            raise TooFewRoots("need at least two roots to merge")
        scores = self._pair_scores
        top = max(scores) - TIE_EPS
        for i, s in enumerate(scores):
            if s >= top:
                return i
        raise AssertionError("unreachable")

    def _merge(self, i: int, summary: str, embedding) -> EventNode:
        if not 0 <= i < len(self._roots) - 1:
            raise IndexError(f"no adjacent root pair at {i}")
        emb = self._check_embedding(embedding)
        a = self._nodes[self._roots[i]]
        b = self._nodes[self._roots[i + 1]]
        parent = EventNode(
            id=self._count,
            start=a.start,
            end=b.end,
            keyframes=tuple(uniform_sample(a.keyframes + b.keyframes, self.n_f)),
            summary=summary,
            embedding=emb,
            level=max(a.level, b.level) + 1,
            children=(a.id, b.id),
        )
        self._append(parent)
        self._parents[a.id] = parent.id
        self._parents[b.id] = parent.id
        self._roots[i : i + 2] = [parent.id]
        # the (i, i+1) pair is consumed; its neighbours now pair with the parent
        del self._pair_scores[i]
        if i > 0:
            self._pair_scores[i - 1] = merge_score(self._nodes[self._roots[i - 1]], parent, self.lam)
        if i < len(self._roots) - 1:
            self._pair_scores[i] = merge_score(parent, self._nodes[self._roots[i + 1]], self.lam)
        self.merge_count += 1
        return parent

    def merge_nodes(self, i: int, summary: str, embedding) -> EventNode:
        """Fuse roots i and i+1 into a new parent that takes their place."""
        parent = self._merge(i, summary, embedding)
        self._publish()
        return parent

    def _enforce(self, fuse: Fuser | None) -> None:
        while len(self._roots) > self.n_r:
            if fuse is None:
                raise ForestError("root bound exceeded but no fuser supplied")
            i = self.select_merge_pair()
            summary, embedding = fuse(self._nodes[self._roots[i]], self._nodes[self._roots[i + 1]])
            self._merge(i, summary, embedding)

    def enforce_root_bound(self, fuse: Fuser | None) -> None:
        try:
            self._enforce(fuse)
        finally:
            self._publish()

    @classmethod
    def restore(cls, n_r: int, lam: float, n_f: int, embed_dim: int, bounded: bool,
                nodes: Sequence[EventNode], roots: Sequence[int], merge_count: int = 0) -> "EventForest":
        """Rebuild a forest from its node table and root order."""
        forest = cls(n_r, lam, n_f, embed_dim, bounded)
        cap = 16
        while cap < len(nodes):
            cap *= 2
        forest._unit = np.zeros((cap, embed_dim))
        for expected_id, node in enumerate(nodes):
            if node.id != expected_id:
                raise ForestError(f"node ids must be dense, got {node.id} at {expected_id}")
            forest._append(node)
            for c in node.children:
                forest._parents[c] = node.id
        forest._roots = list(roots)
        forest._pair_scores = [
            merge_score(forest._nodes[a], forest._nodes[b], lam) for a, b in zip(forest._roots, forest._roots[1:])
        ]
        forest.merge_count = merge_count
        forest._publish()
        return forest
