"""Two-phase query answering over a snapshot of the stream memory.

A query first gets a coarse pass over what is immediately at hand (recent
frames, root summaries, dialogue digest). Only when the model asks for it via
a tool call does a single fine pass run, with evidence retrieved by the
model's own intent string.
"""
from __future__ import annotations

import enum
import json
import logging
import queue
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backends import Backend, ChatTurn, render_frame, render_interval
from .forest import EventForest, EventNode, ForestView
from .qa_memory import QARecord, QAStore, QAView
from .stream_core import (
    EngineConfig,
    FrameRef,
    TokenBudget,
    clip_to_tokens,
    context_token_cost,
    count_text_tokens,
    fmt_ts,
    validate_config,
)
from .tiers import EPS, TierStore, WindowBatch, medium_view, short_view

log = logging.getLogger(__name__)

FULL_CONTEXT_FPS = 0.5

SYSTEM_PROMPT = """You answer questions about a live video stream.
You see the most recent frames, short summaries of earlier events, and a digest of the conversation so far.
If what you can see is enough, reply with the answer wrapped as <answer>...</answer>.
If the question needs details from earlier in the stream that are not visible here, do not guess.
Instead reply with <tool_call>{"query": "..."}</tool_call>, where query describes the evidence you need
(for example "people in the living room"), not the question itself."""

FINE_INSTRUCTION = "Retrieved evidence from earlier in the stream is above. Answer now as <answer>...</answer>."
REMINDER = "Reply with <answer>...</answer> or <tool_call>{\"query\": \"...\"}</tool_call> only."
NO_TOOL_REMINDER = "No retrieval is available for this question. Answer now as <answer>...</answer>."


class RunMode(str, enum.Enum):
    HIERARCHICAL = "hierarchical"
    FULL_CONTEXT = "full_context"
    NAIVE_RAG = "naive_rag"
    NO_RAG = "no_rag"
    FLATTEN_MEMORY = "flatten_memory"

    @property
    def retrieves(self) -> bool:
        return self in (RunMode.HIERARCHICAL, RunMode.NAIVE_RAG, RunMode.FLATTEN_MEMORY)


class MalformedResponse(ValueError):
    def __init__(self, raw: str):
        super().__init__(f"no <answer> or <tool_call> in response: {raw[:120]!r}")
        self.raw = raw


@dataclass(frozen=True)
class ReasoningOutcome:
    kind: str  # "final_answer" | "tool_call"
    answer: str | None = None
    intent: str | None = None
    think: str = ""


_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.S)
_TOOL_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.S)
_TAG_RE = re.compile(r"<(answer|tool_call)>")


def parse_outcome(raw: str) -> ReasoningOutcome:
    """Route a model reply: a final answer wins over a tool call."""
    first_tag = _TAG_RE.search(raw)
    think = raw[: first_tag.start()].strip() if first_tag else ""
    m = _ANSWER_RE.search(raw)
    if m:
        return ReasoningOutcome("final_answer", answer=m.group(1).strip(), think=think)
    for m in _TOOL_RE.finditer(raw):
        try:
            payload = json.loads(m.group(1))
        except ValueError:
            continue
        if isinstance(payload, dict) and isinstance(payload.get("query"), str):
            return ReasoningOutcome("tool_call", intent=payload["query"], think=think)
    raise MalformedResponse(raw)


# --- contexts ----------------------------------------------------------------

@dataclass(frozen=True)
class MemorySnapshot:
    frames: tuple[FrameRef, ...]
    forest: ForestView
    qa: QAView
    archive: tuple[FrameRef, ...] = ()


@dataclass(frozen=True)
class CoarseContext:
    system_prompt: str
    short_frames: tuple[FrameRef, ...]
    medium_frames: tuple[FrameRef, ...]
    root_summaries: tuple[tuple[tuple[float, float], str], ...]
    qa_summary: str
    question: str
    hint: str = ""

    @property
    def frames(self) -> tuple[FrameRef, ...]:
        return tuple(sorted(self.short_frames + self.medium_frames, key=lambda f: f.ts))

    def render(self) -> str:
        parts = []
        if self.root_summaries:
            parts.append("Earlier events:")
            parts.extend(f"{render_interval(iv)} {text}" for iv, text in self.root_summaries)
        if self.qa_summary:
            parts.append("Conversation so far:")
            parts.append(self.qa_summary)
        parts.append(f"Question: {self.question}")
        if self.hint:
            parts.append(self.hint)
        return "\n".join(parts)

    def turns(self) -> list[ChatTurn]:
        return [ChatTurn("system", self.system_prompt), ChatTurn("user", self.render(), self.frames)]

    def budget(self, cfg: EngineConfig) -> TokenBudget:
        return context_token_cost(len(self.frames), [self.system_prompt, self.render()], cfg.frame_token_cost)


@dataclass(frozen=True)
class FineContext:
    nodes: tuple[EventNode, ...]
    qa: tuple[QARecord, ...]
    hint: str = ""

    @property
    def frames(self) -> tuple[FrameRef, ...]:
        return tuple(f for n in self.nodes for f in n.keyframes)

    def render(self) -> str:
        parts = ["Retrieved events:"]
        for n in self.nodes:
            parts.append(f"{render_interval(n.interval)} {n.summary}")
        if self.qa:
            parts.append("Related earlier questions:")
            for r in self.qa:
                parts.append(f"[t={fmt_ts(r.asked_at)}] Q: {r.question} A: {r.answer}")
        parts.append(FINE_INSTRUCTION)
        if self.hint:
            parts.append(self.hint)
        return "\n".join(parts)

    def turn(self) -> ChatTurn:
        return ChatTurn("user", self.render(), self.frames)

    def budget(self, cfg: EngineConfig) -> TokenBudget:
        return context_token_cost(len(self.frames), [self.render()], cfg.frame_token_cost)


def build_coarse_context(snap: MemorySnapshot, question: str, now: float, cfg: EngineConfig,
                         mode: RunMode = RunMode.HIERARCHICAL, hint: str = "") -> CoarseContext:
    if mode is RunMode.FULL_CONTEXT:
        frames = tuple(f for f in snap.archive if f.ts <= now + EPS)
        return CoarseContext(SYSTEM_PROMPT, (), frames, (), "", question, hint)
    short = short_view(snap.frames, now, cfg)
    seen = {f.payload_id for f in short}
    medium = [f for f in medium_view(snap.frames, now, cfg) if f.payload_id not in seen]
    roots = tuple(snap.forest.root_summaries())
    return CoarseContext(SYSTEM_PROMPT, tuple(short), tuple(medium), roots, snap.qa.summary, question, hint)


# worst-case rendering of a timestamp inside interval headers (covers < 1e12 s)
_WIDE_TS = 9.5e11 + 0.123456789


def coarse_token_bound(cfg: EngineConfig, question: str, hint: str = "", n_roots: int | None = None) -> int:
    """Upper bound on the coarse-context total for any stream length.

    Frame count: both views can hold at most one frame per grid step over their
    closed horizon. Text: every root summary and the dialogue digest at their
    token caps, rendered with very wide timestamps.
    """
    frames = int(cfg.tau_s * cfg.r_s + EPS) + 1 + int(cfg.tau_m * cfg.r_m + EPS) + 1
    roots = cfg.n_r if n_roots is None else n_roots
    cap_text = "x" * (4 * cfg.summary_token_cap)
    worst = CoarseContext(
        SYSTEM_PROMPT, (), (),
        tuple(((_WIDE_TS, _WIDE_TS), cap_text) for _ in range(roots)),
        cap_text, question, hint,
    )
    return frames * cfg.frame_token_cost + count_text_tokens(SYSTEM_PROMPT) + count_text_tokens(worst.render())


def fine_token_bound(cfg: EngineConfig, max_qa_chars: int, hint: str = "") -> int:
    """Upper bound on the fine-context total, given the longest stored question+answer."""
    cap_text = "x" * (4 * cfg.summary_token_cap)
    nodes = "\n".join(f"[{fmt_ts(_WIDE_TS)}–{fmt_ts(_WIDE_TS)}] {cap_text}" for _ in range(cfg.k_f))
    qa = "\n".join(f"[t={fmt_ts(_WIDE_TS)}] Q:  A: " + "x" * max_qa_chars for _ in range(cfg.k_q))
    text = "\n".join(["Retrieved events:", nodes, "Related earlier questions:", qa, FINE_INSTRUCTION, hint])
    return cfg.k_f * cfg.n_f * cfg.frame_token_cost + count_text_tokens(text)


# --- query report --------------------------------------------------------------

@dataclass
class QueryReport:
    question: str
    answer: str
    phase: str  # "coarse_only" | "fine"
    asked_at: float
    coarse_budget: TokenBudget
    fine_budget: TokenBudget | None = None
    intent: str | None = None
    think: str = ""
    rpd: float = 0.0
    end_to_end: float = 0.0
    retrieval_calls: int = 0
    reasoning_calls: int = 0
    fallback: bool = False
    hard_stop: bool = False
    retrieval_query: str | None = None
    coarse: CoarseContext | None = field(default=None, repr=False)
    fine: FineContext | None = field(default=None, repr=False)

    @property
    def retrieved_nodes(self) -> tuple[EventNode, ...]:
        return self.fine.nodes if self.fine else ()

    @property
    def retrieved_qa(self) -> tuple[QARecord, ...]:
        return self.fine.qa if self.fine else ()

    def to_record(self, timing: bool = True) -> dict:
        rec = {
            "question": self.question,
            "asked_at": self.asked_at,
            "phase": self.phase,
            "intent": self.intent,
            "retrieved_nodes": [n.id for n in self.retrieved_nodes],
            "retrieved_intervals": [list(n.interval) for n in self.retrieved_nodes],
            "retrieved_qa": [r.asked_at for r in self.retrieved_qa],
            "coarse_budget": self.coarse_budget.to_dict(),
            "fine_budget": self.fine_budget.to_dict() if self.fine_budget else None,
            "answer": self.answer,
            "fallback": self.fallback,
            "hard_stop": self.hard_stop,
        }
        if timing:
            rec["rpd"] = self.rpd
            rec["end_to_end"] = self.end_to_end
        return rec


class _Reasoner:
    """Counts calls and stamps the first dispatch time."""

    def __init__(self, backend: Backend, clock: Callable[[], float]):
        self.backend = backend
        self.clock = clock
        self.first_dispatch: float | None = None
        self.calls = 0

    def __call__(self, turns: list[ChatTurn]) -> str:
        if self.first_dispatch is None:
            self.first_dispatch = self.clock()
        self.calls += 1
        return self.backend.reason(turns)

    def outcome(self, turns: list[ChatTurn], reminder: str = REMINDER) -> tuple[ReasoningOutcome, bool]:
        """One call plus at most one retry on a malformed reply; raw text as last resort."""
        raw = self(turns)
        try:
            return parse_outcome(raw), False
        except MalformedResponse:
            log.info("malformed reply, retrying once")
        raw = self(turns + [ChatTurn("user", reminder)])
        try:
            return parse_outcome(raw), False
        except MalformedResponse:
            return ReasoningOutcome("final_answer", answer=raw.strip()), True


def answer_query(snap: MemorySnapshot, question: str, now: float, backend: Backend, cfg: EngineConfig,
                 mode: RunMode = RunMode.HIERARCHICAL, hints: Sequence[str] = (),
                 clock: Callable[[], float] = time.perf_counter, arrival: float | None = None) -> QueryReport:
    """Answer one query against ``snap``. Read-only: folding the QA pair is the caller's job.

    ``hints`` are appended, one per reasoning pass, to the newest user turn;
    scripted backends read their directives from there.
    """
    arrival = clock() if arrival is None else arrival
    reasoner = _Reasoner(backend, clock)
    coarse_hint = hints[0] if len(hints) > 0 else ""
    fine_hint = hints[1] if len(hints) > 1 else ""

    coarse = build_coarse_context(snap, question, now, cfg, mode, coarse_hint)
    turns = coarse.turns()
    report = QueryReport(question, "", "coarse_only", now, coarse.budget(cfg), coarse=coarse)

    outcome, report.fallback = reasoner.outcome(turns)
    if outcome.kind == "tool_call" and not mode.retrieves:
        # no evidence store to consult in this mode: insist on a direct answer
        outcome, report.fallback = reasoner.outcome(turns + [ChatTurn("user", NO_TOOL_REMINDER)], NO_TOOL_REMINDER)
        if outcome.kind == "tool_call":
            outcome = ReasoningOutcome("final_answer", answer="", think=outcome.think)
            report.fallback = True
    report.think = outcome.think

    if outcome.kind == "final_answer":
        report.answer = outcome.answer or ""
    else:
        report.intent = outcome.intent
        report.retrieval_query = question if mode is RunMode.NAIVE_RAG else outcome.intent
        q_emb = np.asarray(backend.embed(report.retrieval_query), dtype=np.float64)
        nodes = snap.forest.retrieve_pruned(q_emb, cfg.k_f)
        qa = snap.qa.retrieve(q_emb, cfg.k_q)
        report.retrieval_calls = 1
        fine = FineContext(tuple(nodes), tuple(qa), fine_hint)
        report.fine = fine
        report.fine_budget = fine.budget(cfg)
        report.phase = "fine"
        final, report.fallback = reasoner.outcome(turns + [fine.turn()])
        if final.kind == "tool_call":
            log.warning("fine pass asked for another retrieval (%r); stopping after one round", final.intent)
            report.hard_stop = True
            report.answer = final.intent or ""
        else:
            report.answer = final.answer or ""

    report.reasoning_calls = reasoner.calls
    done = clock()
    report.rpd = (reasoner.first_dispatch if reasoner.first_dispatch is not None else done) - arrival
    report.end_to_end = done - arrival
    return report


# --- engine ------------------------------------------------------------------------

class StreamEngine:
    """Owns the live memory: tiers, event forest, QA store.

    With ``background=True`` window summarization and merging run on a worker
    thread; queries always read an immutable snapshot taken at arrival.
    """

    def __init__(self, cfg: EngineConfig, backend: Backend, mode: RunMode = RunMode.HIERARCHICAL,
                 background: bool = False, clock: Callable[[], float] = time.perf_counter):
        self.cfg = validate_config(cfg)
        if backend.embed_dim != cfg.embed_dim:
            raise ValueError(f"backend embed_dim {backend.embed_dim} != config embed_dim {cfg.embed_dim}")
        self.backend = backend
        self.mode = RunMode(mode)
        self.clock = clock
        self.tiers = TierStore(cfg)
        self.forest = EventForest(cfg.n_r, cfg.lam, cfg.n_f, cfg.embed_dim,
                                  bounded=self.mode is not RunMode.FLATTEN_MEMORY)
        self.qa = QAStore(cfg.summary_token_cap, cfg.embed_dim)
        self.archive: list[FrameRef] = []
        self.closed = False
        self.last_query_ts: float | None = None
        self._lock = threading.Lock()
        self._query_lock = threading.Lock()
        self._queue: queue.Queue | None = None
        self._worker: threading.Thread | None = None
        self._worker_error: BaseException | None = None
        if background:
            self._queue = queue.Queue()
            self._worker = threading.Thread(target=self._drain, daemon=True)
            self._worker.start()

    # maintenance path

    def _summarize_node(self, batch: WindowBatch) -> tuple[str, np.ndarray]:
        summary = clip_to_tokens(self.backend.summarize_window(batch.keyframes, batch.interval),
                                 self.cfg.summary_token_cap)
        return summary, self.backend.embed(summary)

    def _fuse(self, a: EventNode, b: EventNode) -> tuple[str, np.ndarray]:
        summary = clip_to_tokens(self.backend.merge_summaries(a.summary, b.summary), self.cfg.summary_token_cap)
        return summary, self.backend.embed(summary)

    def _absorb(self, batch: WindowBatch) -> None:
        summary, emb = self._summarize_node(batch)
        self.forest.insert_leaf(batch, summary, emb, self._fuse)

    def _drain(self) -> None:
        assert self._queue is not None
        while True:
            batch = self._queue.get()
            try:
                if batch is None:
                    return
                if self._worker_error is None:
                    self._absorb(batch)
            except BaseException as exc:  # surfaced on the next writer call
                self._worker_error = exc
            finally:
                self._queue.task_done()

    def _dispatch(self, batches: Sequence[WindowBatch]) -> None:
        if self.mode is RunMode.FULL_CONTEXT:
            return
        for batch in batches:
            if self._queue is not None:
                self._queue.put(batch)
            else:
                self._absorb(batch)

    def _raise_worker_error(self) -> None:
        if self._worker_error is not None:
            raise self._worker_error

    def push_frame(self, frame: FrameRef) -> None:
        self._raise_worker_error()
        with self._lock:
            batches = self.tiers.push(frame)
            if not self.archive or frame.ts >= self.archive[-1].ts + 1.0 / FULL_CONTEXT_FPS - EPS:
                self.archive.append(frame)
        self._dispatch(batches)

    def close(self, end: float | None = None) -> None:
        """Flush the final partial window."""
        with self._lock:
            batch = self.tiers.close(end)
        self.closed = True
        if batch is not None:
            self._dispatch([batch])
        self.wait_idle()

    def wait_idle(self) -> None:
        if self._queue is not None:
            self._queue.join()
        self._raise_worker_error()

    def shutdown(self) -> None:
        if self._queue is not None and self._worker is not None:
            self._queue.put(None)
            self._worker.join()
            self._queue = None

    # query path

    def snapshot(self) -> MemorySnapshot:
        with self._lock:
            archive = tuple(self.archive) if self.mode is RunMode.FULL_CONTEXT else ()
            return MemorySnapshot(self.tiers.view(), self.forest.view(), self.qa.view(), archive)

    def ask(self, question: str, now: float, hints: Sequence[str] = ()) -> QueryReport:
        """Answer ``question`` at stream time ``now`` and fold the QA pair into memory."""
        arrival = self.clock()
        with self._query_lock:
            if self.last_query_ts is not None and now < self.last_query_ts:
                raise ValueError(f"query at {now} precedes previous query at {self.last_query_ts}")
            snap = self.snapshot()
            report = answer_query(snap, question, now, self.backend, self.cfg, self.mode, hints,
                                  self.clock, arrival)
            summary, record = self.qa.prepare_fold(question, report.answer, now, self.backend)
            with self._lock:
                self.qa.commit(summary, record)
            self.last_query_ts = now
        log.info("query %s", json.dumps(report.to_record(), ensure_ascii=False))
        return report
