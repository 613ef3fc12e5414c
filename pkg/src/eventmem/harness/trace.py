"""Line-delimited trace files: one JSON object per line.

    {"kind": "frame", "ts": 12.5, "caption": "a dog on the sofa", "id": "f0000025"}
    {"kind": "query", "ts": 60, "question": "...", "directive": ["!tool:...", "!answer:..."],
     "expected": "...", "evidence": [32, 64]}
    {"kind": "close", "ts": 3600}

``directive`` may be a single string or one string per reasoning pass.
``evidence`` marks the stream interval holding the ground truth, for recall.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

KINDS = ("frame", "query", "close")


class TraceParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TraceEvent:
    kind: str
    ts: float
    caption: str = ""
    payload_id: str = ""
    question: str = ""
    directive: tuple[str, ...] = ()
    expected: str | None = None
    evidence: tuple[float, float] | None = None

    def to_json(self) -> dict:
        if self.kind == "frame":
            return {"kind": "frame", "ts": self.ts, "caption": self.caption, "id": self.payload_id}
        if self.kind == "close":
            return {"kind": "close", "ts": self.ts}
        rec: dict = {"kind": "query", "ts": self.ts, "question": self.question}
        if self.directive:
            rec["directive"] = list(self.directive)
        if self.expected is not None:
            rec["expected"] = self.expected
        if self.evidence is not None:
            rec["evidence"] = list(self.evidence)
        return rec


def _event(obj: dict, lineno: int, frame_index: int) -> TraceEvent:
    kind = obj.get("kind")
    if kind not in KINDS:
        raise TraceParseError(lineno, f"unknown kind {kind!r}")
    try:
        ts = float(obj["ts"])
    except (KeyError, TypeError, ValueError):
        raise TraceParseError(lineno, "missing or non-numeric ts") from None
    if ts < 0:
        raise TraceParseError(lineno, "negative ts")
    if kind == "frame":
        return TraceEvent("frame", ts, caption=str(obj.get("caption") or ""),
                          payload_id=str(obj.get("id") or f"f{frame_index}"))
    if kind == "close":
        return TraceEvent("close", ts)
    if not isinstance(obj.get("question"), str):
        raise TraceParseError(lineno, "query needs a question")
    directive = obj.get("directive") or ()
    if isinstance(directive, str):
        directive = (directive,)
    evidence = obj.get("evidence")
    if evidence is not None:
        if not (isinstance(evidence, list) and len(evidence) == 2):
            raise TraceParseError(lineno, "evidence must be [start, end]")
        evidence = (float(evidence[0]), float(evidence[1]))
    return TraceEvent("query", ts, question=obj["question"], directive=tuple(str(d) for d in directive),
                      expected=obj.get("expected"), evidence=evidence)


def parse_lines(lines: Iterable[str]) -> Iterator[TraceEvent]:
    last_ts = 0.0
    closed = False
    frames = 0
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        if closed:
            raise TraceParseError(lineno, "event after close")
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise TraceParseError(lineno, f"invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise TraceParseError(lineno, "record must be an object")
        ev = _event(obj, lineno, frames)
        if ev.ts < last_ts:
            raise TraceParseError(lineno, f"timestamp {ev.ts} regresses from {last_ts}")
        last_ts = ev.ts
        frames += ev.kind == "frame"
        closed = ev.kind == "close"
        yield ev


def read_trace(path: str | Path) -> list[TraceEvent]:
    with open(path, encoding="utf-8") as fh:
        return list(parse_lines(fh))


def dumps_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(json.dumps(ev.to_json(), ensure_ascii=False) + "\n" for ev in events)


def write_trace(events: Iterable[TraceEvent], path: str | Path) -> None:
    Path(path).write_text(dumps_trace(events), encoding="utf-8")
