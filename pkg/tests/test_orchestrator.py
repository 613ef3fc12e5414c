import json
import re
import threading

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventmem.backends import ChatTurn, MockBackend, RemoteBackend, scripted_reason
from eventmem.harness.runner import run_trace
from eventmem.harness.synthetic import generate_synthetic
from eventmem.orchestrator import (
    MalformedResponse,
    RunMode,
    StreamEngine,
    build_coarse_context,
    coarse_token_bound,
    parse_outcome,
)
from eventmem.stream_core import EngineConfig, FrameRef


def feed(engine, seconds, fps=2.0, caption=lambda t: f"scene at {int(t)}", start=0.0):
    n = int(round(seconds * fps))
    for i in range(n):
        t = start + i / fps
        engine.push_frame(FrameRef(t, f"f{int(round(t * fps))}", caption(t)))
    return start + (n - 1) / fps


# parsing

def test_parse_answer():
    out = parse_outcome("<answer>five</answer>")
    assert (out.kind, out.answer, out.intent) == ("final_answer", "five", None)


def test_parse_tool_call_with_think():
    raw = 'I must check history. <tool_call>{"query": "people in the living room"}</tool_call>'
    out = parse_outcome(raw)
    assert out.kind == "tool_call" and out.intent == "people in the living room"
    assert out.think == "I must check history."


def test_parse_rejects_untagged_and_bad_payloads():
    with pytest.raises(MalformedResponse):
        parse_outcome("no tags at all")
    with pytest.raises(MalformedResponse):
        parse_outcome("<tool_call>not json</tool_call>")
    with pytest.raises(MalformedResponse):
        parse_outcome('<tool_call>{"q": "x"}</tool_call>')


def test_parse_skips_bad_tool_call_for_good_one():
    out = parse_outcome('<tool_call>oops</tool_call> <tool_call>{"query": "cars"}</tool_call>')
    assert out.intent == "cars"


# coarse context

def test_cold_engine_context(cfg, mock):
    engine = StreamEngine(cfg, mock)
    ctx = build_coarse_context(engine.snapshot(), "anything?", 0.0, cfg)
    assert ctx.frames == () and ctx.root_summaries == () and ctx.qa_summary == ""
    assert ctx.budget(cfg).frame_tokens == 0


def test_five_minutes_of_stream(cfg, mock):
    engine = StreamEngine(cfg, mock)
    now = feed(engine, 300)
    ctx = build_coarse_context(engine.snapshot(), "q", now, cfg)
    assert 1 <= len(ctx.root_summaries) <= 4
    ids = [f.payload_id for f in ctx.frames]
    assert len(ids) == len(set(ids))
    assert len(ctx.short_frames) == 17 and len(ctx.medium_frames) == 33 - 9
    assert [f.ts for f in ctx.frames] == sorted(f.ts for f in ctx.frames)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**16))
def test_coarse_budget_bounded_for_any_length(minutes, seed):
    cfg = EngineConfig()
    engine = StreamEngine(cfg, MockBackend(cfg.embed_dim))
    rng = np.random.default_rng(seed)
    words = ["dog", "cat", "car", "tree", "lamp", "desk", "cup", "chair"]
    now = feed(engine, minutes * 60, fps=1.0, caption=lambda t: " ".join(rng.choice(words, 12)))
    engine.ask("what is here?", now, ["!answer:" + "x" * 300])
    report = engine.ask("what is here?", now)
    assert report.coarse_budget.total <= coarse_token_bound(cfg, "what is here?")


# routing

def test_answer_directive_is_coarse_only(cfg, mock):
    engine = StreamEngine(cfg, mock)
    now = feed(engine, 100)
    embeds_before = mock.calls["embed"]
    r = engine.ask("color?", now, ["!answer:blue"])
    assert (r.phase, r.answer, r.retrieval_calls, r.reasoning_calls) == ("coarse_only", "blue", 0, 1)
    assert r.fine_budget is None and r.fine is None
    # only the QA fold embeds
    assert mock.calls["embed"] - embeds_before == 1
    assert 0 <= r.rpd <= r.end_to_end


def test_tool_directive_runs_one_fine_pass(cfg, mock):
    engine = StreamEngine(cfg, mock)
    now = feed(engine, 200)
    engine.ask("earlier?", now, ["!answer:yes"])
    r = engine.ask("where was the plate?", now + 1, ["!tool:white plate", "!answer:on the table"])
    assert (r.phase, r.intent, r.answer) == ("fine", "white plate", "on the table")
    assert r.retrieval_calls == 1 and r.reasoning_calls == 2
    assert len(r.retrieved_nodes) == cfg.k_f and len(r.retrieved_qa) == cfg.k_q
    assert r.fine_budget is not None and r.fine_budget.frame_tokens > 0
    assert r.retrieval_query == "white plate"


def test_needle_node_retrieved(cfg, mock):
    engine = StreamEngine(cfg, mock)

    def caption(t):
        return "a blue teapot on the shelf" if 100 <= t < 104 else "people talk in the office near desks"

    now = feed(engine, 400, caption=caption)
    r = engine.ask("anything unusual?", now, ["!tool:blue teapot"])
    assert any(n.start <= 100 < n.end for n in r.retrieved_nodes)
    top = r.retrieved_nodes[0]
    assert "teapot" in top.summary


def test_one_fold_per_query_and_read_only_passes(cfg, mock):
    engine = StreamEngine(cfg, mock)
    now = feed(engine, 150)
    nodes_before = len(engine.forest)
    for i, hints in enumerate([["!answer:a"], ["!tool:scene", "!answer:b"], []]):
        engine.ask(f"q{i}", now + i, hints)
        assert len(engine.qa.records) == i + 1
    assert len(engine.forest) == nodes_before
    assert mock.calls["fold"] == 3


def test_backend_failure_leaves_memory_untouched(cfg):
    class Flaky(MockBackend):
        fail = False

        def reason(self, turns):
            if self.fail:
                raise RuntimeError("model down")
            return super().reason(turns)

    backend = Flaky(cfg.embed_dim)
    engine = StreamEngine(cfg, backend)
    now = feed(engine, 100)
    backend.fail = True
    with pytest.raises(RuntimeError):
        engine.ask("q", now, ["!answer:x"])
    assert engine.qa.records == [] and engine.qa.summary == ""
    assert engine.last_query_ts is None


class Canned(MockBackend):
    """Replies from a fixed list, in order."""

    def __init__(self, dim, replies):
        super().__init__(dim)
        self.replies = list(replies)
        self.turns = []

    def reason(self, turns):
        self.turns.append(list(turns))
        return self.replies.pop(0)


def test_malformed_retries_once_then_falls_back(cfg):
    backend = Canned(cfg.embed_dim, ["gibberish", "still gibberish"])
    engine = StreamEngine(cfg, backend)
    r = engine.ask("q", 0.0)
    assert r.answer == "still gibberish" and r.fallback and r.reasoning_calls == 2
    assert "Reply with <answer>" in backend.turns[1][-1].text


def test_malformed_then_valid(cfg):
    backend = Canned(cfg.embed_dim, ["gibberish", "<answer>ok</answer>"])
    r = StreamEngine(cfg, backend).ask("q", 0.0)
    assert r.answer == "ok" and not r.fallback


def test_fine_tool_call_hard_stops(cfg):
    backend = Canned(cfg.embed_dim, ['<tool_call>{"query": "a"}</tool_call>', '<tool_call>{"query": "b"}</tool_call>'])
    engine = StreamEngine(cfg, backend)
    feed(engine, 80)
    r = engine.ask("q", 40.0)
    assert r.hard_stop and r.retrieval_calls == 1 and r.reasoning_calls == 2


def test_fine_call_carries_coarse_context_and_evidence_only(cfg, mock):
    backend = Canned(cfg.embed_dim, ['thinking... <tool_call>{"query": "scene"}</tool_call>', "<answer>x</answer>"])
    engine = StreamEngine(cfg, backend)
    now = feed(engine, 100)
    engine.ask("q", now)
    coarse_turns, fine_turns = backend.turns
    assert fine_turns[: len(coarse_turns)] == coarse_turns
    assert len(fine_turns) == len(coarse_turns) + 1
    assert "thinking" not in fine_turns[-1].text
    assert fine_turns[-1].text.startswith("Retrieved events:")


def test_naive_rag_embeds_the_question(cfg, mock):
    engine = StreamEngine(cfg, mock, RunMode.NAIVE_RAG)
    now = feed(engine, 100)
    r = engine.ask("was the door open?", now, ["!tool:door state"])
    assert r.retrieval_query == "was the door open?" and r.intent == "door state"


@pytest.mark.parametrize("mode", [RunMode.NO_RAG, RunMode.FULL_CONTEXT])
def test_modes_without_retrieval(cfg, mock, mode):
    engine = StreamEngine(cfg, mock, mode)
    now = feed(engine, 100)
    r = engine.ask("q", now, ["!tool:x"])
    assert r.retrieval_calls == 0 and r.phase == "coarse_only" and r.fine is None


def test_full_context_stacks_history_at_half_fps(cfg, mock):
    engine = StreamEngine(cfg, mock, RunMode.FULL_CONTEXT)
    now = feed(engine, 600)
    r = engine.ask("q", now, ["!answer:x"])
    assert len(r.coarse.frames) == 300
    assert len(engine.forest) == 0 and mock.calls["summarize"] == 0


def test_flatten_memory_keeps_every_root(cfg, mock):
    engine = StreamEngine(cfg, mock, RunMode.FLATTEN_MEMORY)
    feed(engine, 32 * 10 + 1)
    assert len(engine.forest.roots) == 10 and engine.forest.merge_count == 0


def test_query_order_enforced(cfg, mock):
    engine = StreamEngine(cfg, mock)
    engine.ask("a", 10.0)
    with pytest.raises(ValueError):
        engine.ask("b", 5.0)


def test_background_maintenance_matches_serial(cfg):
    events = [ev for ev in generate_synthetic(5, 12, "2@10") if ev.kind != "query"]
    forests = []
    for background in (False, True):
        engine = StreamEngine(cfg, MockBackend(cfg.embed_dim), background=background)
        for ev in events:
            if ev.kind == "frame":
                engine.push_frame(FrameRef(ev.ts, ev.payload_id, ev.caption))
            else:
                engine.close(ev.ts)
        engine.wait_idle()
        engine.shutdown()
        forests.append(([(n.interval, n.summary, n.level, n.children) for n in engine.forest.nodes()],
                        engine.forest.roots))
    assert forests[0] == forests[1]
    assert forests[0][0][-1][0][1] == 12 * 60


def test_queries_during_background_maintenance_see_consistent_forest(cfg):
    engine = StreamEngine(cfg.replace(tau_m=8.0, tau_s=2.0), MockBackend(cfg.embed_dim), background=True)
    stop = threading.Event()
    seen = []

    def reader():
        while not stop.is_set():
            view = engine.snapshot().forest
            roots = [view.node(r) for r in view.roots]
            seen.append(len(roots))
            assert all(a.end == b.start for a, b in zip(roots, roots[1:]))
            assert all(view.parent(r) is None for r in view.roots)

    t = threading.Thread(target=reader)
    t.start()
    feed(engine, 2000, fps=1.0)
    engine.wait_idle()
    stop.set()
    t.join()
    engine.shutdown()
    assert seen and max(seen) <= 4


# backend-agnostic behaviour: the same trace through an HTTP stub

def stub_transport(mock: MockBackend):
    frame_re = re.compile(r"<frame t=([^ ]+) id=([^>]+)>(.*?)</frame>")

    def handler(request):
        body = json.loads(request.content)
        if request.url.path.endswith("/embeddings"):
            return httpx.Response(200, json={"data": [{"embedding": mock.embed(body["input"]).tolist()}]})
        msgs = body["messages"]
        system = msgs[0]["content"] if msgs[0]["role"] == "system" else ""
        user = msgs[-1]["content"]
        if system.startswith("TASK summarize_window"):
            frames = [FrameRef(float(t), pid, cap) for t, pid, cap in frame_re.findall(user)]
            a, b = re.search(r"Segment \[([^–]+)–([^\]]+)\]", user).groups()
            text = mock.summarize_window(frames, (float(a), float(b)))
        elif system.startswith("TASK merge_summaries"):
            a, b = re.fullmatch(r"FIRST:\n(.*)\nSECOND:\n(.*)", user, re.S).groups()
            text = mock.merge_summaries(a, b)
        elif system.startswith("TASK fold_qa_summary"):
            prev, q, a = re.fullmatch(r"SUMMARY:\n(.*)\nQUESTION:\n(.*)\nANSWER:\n(.*)", user, re.S).groups()
            text = mock.fold_qa_summary(prev, q, a)
        else:
            text = scripted_reason([ChatTurn(m["role"], m["content"]) for m in msgs])
        return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})

    return httpx.MockTransport(handler)


@pytest.mark.parametrize("mode", ["hierarchical", "naive_rag", "no_rag"])
def test_stub_server_transcript_matches_mock(mode):
    cfg = EngineConfig()
    events = generate_synthetic(11, 8, "1@6")
    local = run_trace(events, cfg, mode, MockBackend(cfg.embed_dim)).dumps()
    remote = RemoteBackend("http://stub/v1", "m", "e", cfg.embed_dim, transport=stub_transport(MockBackend(cfg.embed_dim)))
    assert run_trace(events, cfg, mode, remote).dumps() == local


def test_unreachable_backend_leaves_engine_unchanged(monkeypatch):
    monkeypatch.setattr("eventmem.backends.time.sleep", lambda s: None)
    cfg = EngineConfig()
    engine = StreamEngine(cfg, MockBackend(cfg.embed_dim))
    now = feed(engine, 100)
    before = (len(engine.forest), engine.forest.roots, engine.qa.summary, len(engine.qa.records))
    engine.backend = RemoteBackend("http://127.0.0.1:9", "c", "e", cfg.embed_dim, timeout=0.5, max_retries=0)
    from eventmem.backends import EndpointError
    with pytest.raises(EndpointError):
        engine.ask("q", now)
    assert (len(engine.forest), engine.forest.roots, engine.qa.summary, len(engine.qa.records)) == before
