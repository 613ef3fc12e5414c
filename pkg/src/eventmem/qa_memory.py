"""Rolling dialogue digest plus the embedded question/answer history."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .forest import NORM_EPS, TIE_EPS, EmbeddingDimMismatch
from .stream_core import clip_to_tokens, count_text_tokens

if TYPE_CHECKING:
    from .backends import Backend

QA_SEPARATOR = "\n"


class OutOfOrderQuery(ValueError):
    pass


@dataclass(frozen=True)
class QARecord:
    question: str
    answer: str
    asked_at: float
    embedding: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class QAView:
    summary: str = ""
    records: tuple[QARecord, ...] = ()

    def retrieve(self, query: np.ndarray, k: int) -> list[QARecord]:
        return retrieve_qa(self.records, query, k)


def _trim_oldest(text: str) -> str:
    """Drop roughly the older half of ``text``, cutting at a word boundary."""
    cut = len(text) // 2
    space = text.find(" ", cut)
    return "" if space < 0 else text[space + 1 :]


def fold_summary(prev: str, q: str, a: str, backend: "Backend", cap: int) -> str:
    """Fold (q, a) into ``prev`` with one backend call, keeping ``cap`` tokens.

    Before the call the oldest part of ``prev`` is dropped until it and the
    new pair fit together; whatever still overflows loses its oldest text.
    """
    room = cap - count_text_tokens(q) - count_text_tokens(a)
    while prev and count_text_tokens(prev) > room:
        prev = _trim_oldest(prev)
    return clip_to_tokens(backend.fold_qa_summary(prev, q, a), cap, keep="tail")


class QAStore:
    def __init__(self, summary_token_cap: int, embed_dim: int):
        self.cap = summary_token_cap
        self.embed_dim = embed_dim
        self.summary = ""
        self.records: list[QARecord] = []

    def view(self) -> QAView:
        return QAView(self.summary, tuple(self.records))

    def prepare_fold(self, q: str, a: str, t: float, backend: "Backend") -> tuple[str, QARecord]:
        """Compute the new summary and record without touching the store."""
        if self.records and t < self.records[-1].asked_at:
            raise OutOfOrderQuery(f"query at {t} precedes {self.records[-1].asked_at}")
        summary = fold_summary(self.summary, q, a, backend, self.cap)
        emb = np.array(backend.embed(q + QA_SEPARATOR + a), dtype=np.float64)
        if emb.shape != (self.embed_dim,):
            raise EmbeddingDimMismatch(f"QA embedding has shape {emb.shape}")
        emb.setflags(write=False)
        return summary, QARecord(q, a, t, emb)

    def commit(self, summary: str, record: QARecord) -> None:
        self.summary = summary
        self.records.append(record)

    def fold_qa(self, q: str, a: str, t: float, backend: "Backend") -> None:
        self.commit(*self.prepare_fold(q, a, t, backend))


def retrieve_qa(records: tuple[QARecord, ...] | list[QARecord], query: np.ndarray, k: int) -> list[QARecord]:
    """Top-k records by cosine to ``query``.

    Scores within ``TIE_EPS`` of the best remaining one are tied; the most
    recent record wins (later position on equal ``asked_at``).
    """
    if k <= 0 or not records:
        return []
    query = np.asarray(query, dtype=np.float64)
    qn = float(np.linalg.norm(query))
    mat = np.stack([r.embedding for r in records])
    norms = np.linalg.norm(mat, axis=1)
    if qn < NORM_EPS:
        scores = np.zeros(len(records))
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            scores = np.where(norms < NORM_EPS, 0.0, (mat @ query) / (norms * qn))
    order = [int(i) for i in np.argsort(-scores, kind="stable")]
    recency = {i: (records[i].asked_at, i) for i in order}
    out: list[QARecord] = []
    while order and len(out) < k:
        floor = scores[order[0]] - TIE_EPS
        tied = 1
        while tied < len(order) and scores[order[tied]] >= floor:
            tied += 1
        pick = max(order[:tied], key=recency.__getitem__)
        order.remove(pick)
        out.append(records[pick])
    return out
