import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventmem.backends import MockBackend
from eventmem.qa_memory import OutOfOrderQuery, QARecord, QAStore, retrieve_qa
from eventmem.stream_core import count_text_tokens

from oracles import qa_sort_oracle


def test_first_fold(mock):
    store = QAStore(256, mock.embed_dim)
    store.fold_qa("what color?", "blue", 3.0, mock)
    assert store.summary == "Q:what color? A:blue"
    assert len(store.records) == 1
    rec = store.records[0]
    assert rec.asked_at == 3.0
    assert np.array_equal(rec.embedding, mock.embed("what color?\nblue"))


def test_fold_chain_is_byte_exact(mock):
    store = QAStore(256, mock.embed_dim)
    for i, (q, a) in enumerate([("q1", "a1"), ("q2", "a2"), ("q3", "a3")]):
        store.fold_qa(q, a, float(i), mock)
    assert store.summary == "Q:q1 A:a1 | Q:q2 A:a2 | Q:q3 A:a3"
    assert [r.question for r in store.records] == ["q1", "q2", "q3"]


def test_summary_capped_keeping_recent(mock):
    store = QAStore(16, mock.embed_dim)
    for i in range(40):
        store.fold_qa(f"question {i}", f"answer {i}", float(i), mock)
        assert count_text_tokens(store.summary) <= 16
    assert store.summary.endswith("Q:question 39 A:answer 39")
    assert len(store.records) == 40


def test_one_backend_call_per_fold(mock):
    store = QAStore(16, mock.embed_dim)
    for i in range(40):
        store.fold_qa(f"a longer question number {i}", f"answer {i}", float(i), mock)
    assert mock.calls["fold"] == 40


def test_out_of_order(mock):
    store = QAStore(16, mock.embed_dim)
    store.fold_qa("a", "b", 5.0, mock)
    with pytest.raises(OutOfOrderQuery):
        store.fold_qa("c", "d", 4.0, mock)


def test_failed_fold_leaves_store_untouched():
    class Broken(MockBackend):
        def embed(self, text):
            raise RuntimeError("down")

    store = QAStore(16, 8)
    with pytest.raises(RuntimeError):
        store.fold_qa("q", "a", 1.0, Broken(8))
    assert store.summary == "" and store.records == []


def rec(emb, t):
    return QARecord("q", "a", t, np.asarray(emb, dtype=float))


def test_retrieve_examples():
    assert retrieve_qa([], np.ones(2), 1) == []
    r = rec([1, 0], 0.0)
    assert retrieve_qa([r], np.array([0.0, 1.0]), 1) == [r]


def test_ties_prefer_recent():
    old, new = rec([1, 0], 1.0), rec([1, 0], 2.0)
    assert retrieve_qa([old, new], np.array([1.0, 0.0]), 1) == [new]


@given(st.integers(0, 2**32 - 1), st.integers(0, 100), st.integers(0, 5))
def test_matches_full_sort(seed, n, k):
    rng = np.random.default_rng(seed)
    # a small vector alphabet makes cosine ties common
    alphabet = rng.standard_normal((4, 6))
    records = [rec(alphabet[rng.integers(4)], float(i // 3)) for i in range(n)]
    q = rng.standard_normal(6)
    got = retrieve_qa(records, q, k)
    position = {id(r): i for i, r in enumerate(records)}
    assert [position[id(r)] for r in got] == qa_sort_oracle(records, q, k)
