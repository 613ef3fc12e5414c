"""Replay a trace through the engine and score the run."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..backends import Backend
from ..orchestrator import QueryReport, RunMode, StreamEngine
from ..stream_core import EngineConfig, FrameRef
from .trace import TraceEvent, read_trace


def overlaps(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


@dataclass
class RunReport:
    mode: str
    queries: list[QueryReport] = field(default_factory=list)
    events: list[TraceEvent] = field(default_factory=list)
    timing: bool = True
    stats: dict = field(default_factory=dict)

    def hits(self) -> list[bool]:
        """Per evidence-bearing query: did any retrieved node overlap the evidence?"""
        out = []
        for ev, rep in zip(self.events, self.queries):
            if ev.evidence is not None:
                out.append(any(overlaps(n.interval, ev.evidence) for n in rep.retrieved_nodes))
        return out

    def aggregate(self) -> dict:
        n = len(self.queries)
        coarse = [q.coarse_budget.total for q in self.queries]
        combined = [q.coarse_budget.total + (q.fine_budget.total if q.fine_budget else 0) for q in self.queries]
        hits = self.hits()
        graded = [(ev.expected, q.answer) for ev, q in zip(self.events, self.queries) if ev.expected is not None]
        agg = {
            "mode": self.mode,
            "queries": n,
            "coarse_only": sum(q.phase == "coarse_only" for q in self.queries),
            "fine": sum(q.phase == "fine" for q in self.queries),
            "mean_coarse_tokens": sum(coarse) / n if n else 0.0,
            "max_coarse_tokens": max(coarse, default=0),
            "mean_total_tokens": sum(combined) / n if n else 0.0,
            "max_total_tokens": max(combined, default=0),
            "recall": sum(hits) / len(hits) if hits else None,
            "accuracy": sum(e == a for e, a in graded) / len(graded) if graded else None,
            **self.stats,
        }
        if self.timing:
            agg["mean_rpd"] = sum(q.rpd for q in self.queries) / n if n else 0.0
            agg["max_rpd"] = max((q.rpd for q in self.queries), default=0.0)
            agg["mean_end_to_end"] = sum(q.end_to_end for q in self.queries) / n if n else 0.0
        return agg

    def lines(self) -> list[str]:
        out = [json.dumps(q.to_record(self.timing), ensure_ascii=False, sort_keys=True) for q in self.queries]
        out.append(json.dumps({"aggregate": self.aggregate()}, ensure_ascii=False, sort_keys=True))
        return out

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def replay(events: Iterable[TraceEvent], engine: StreamEngine, timing: bool = True) -> RunReport:
    report = RunReport(engine.mode.value, timing=timing)
    for ev in events:
        if ev.kind == "frame":
            engine.push_frame(FrameRef(ev.ts, ev.payload_id, ev.caption))
        elif ev.kind == "close":
            engine.close(ev.ts)
        else:
            report.queries.append(engine.ask(ev.question, ev.ts, ev.directive))
            report.events.append(ev)
    engine.wait_idle()
    report.stats = {
        "nodes": len(engine.forest),
        "roots": len(engine.forest.roots),
        "merges": engine.forest.merge_count,
    }
    return report


def run_trace(trace: str | Path | Iterable[TraceEvent], cfg: EngineConfig, mode: RunMode | str,
              backend: Backend, deterministic: bool = True, report_path: str | Path | None = None,
              engine: StreamEngine | None = None) -> RunReport:
    """Replay ``trace`` and return (and optionally write) the run report.

    Deterministic runs serialize maintenance with queries and leave wall-clock
    fields out of the report, so identical inputs give identical bytes.
    """
    events = read_trace(trace) if isinstance(trace, (str, Path)) else list(trace)
    engine = engine or StreamEngine(cfg, backend, RunMode(mode), background=not deterministic)
    try:
        report = replay(events, engine, timing=not deterministic)
    finally:
        engine.shutdown()
    if report_path is not None:
        report.write(report_path)
    return report
