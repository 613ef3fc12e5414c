"""Model capabilities used by the engine, with a deterministic mock and an HTTP client.

One backend instance serves every role: window summaries, summary merging,
QA folding, embeddings and the reasoning calls.
"""
from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .stream_core import FrameRef, fmt_ts

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class BackendTimeout(BackendError):
    pass


class EndpointError(BackendError):
    def __init__(self, status: int | None, body: str):
        super().__init__(f"endpoint error {status}: {body[:200]}")
        self.status = status
        self.body = body


class DimMismatch(BackendError):
    pass


ROLES = ("system", "user", "assistant", "tool")


@dataclass(frozen=True)
class ChatTurn:
    role: str
    text: str
    attachments: tuple[FrameRef, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


def check_turns(turns: Sequence[ChatTurn]) -> None:
    systems = [i for i, t in enumerate(turns) if t.role == "system"]
    if len(systems) > 1 or (systems and systems[0] != 0):
        raise ValueError("a system turn may only appear once, first")


class Backend(Protocol):
    embed_dim: int

    def summarize_window(self, keyframes: Sequence[FrameRef], interval: tuple[float, float]) -> str: ...

    def merge_summaries(self, a: str, b: str) -> str: ...

    def fold_qa_summary(self, prev: str, q: str, a: str) -> str: ...

    def embed(self, text: str) -> np.ndarray: ...

    def reason(self, turns: Sequence[ChatTurn]) -> str: ...


# --- deterministic mock -----------------------------------------------------

_TOKEN_RE = re.compile(r"\w+")
_DIRECTIVE_RE = re.compile(r"!(answer|tool):([^\n]*)")


def fnv1a_32(data: bytes) -> int:
    h = 0x811C9DC5
    for byte in data:
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, dim: int) -> int:
    return fnv1a_32(token.encode("utf-8")) % dim


def render_interval(interval: tuple[float, float]) -> str:
    return f"[{fmt_ts(interval[0])}–{fmt_ts(interval[1])}]"


def scripted_reason(turns: Sequence[ChatTurn]) -> str:
    """Answer from the directive in the newest user turn (``!answer:x`` / ``!tool:intent``)."""
    for turn in reversed(turns):
        if turn.role != "user":
            continue
        m = _DIRECTIVE_RE.search(turn.text)
        if m is None:
            break
        kind, body = m.group(1), m.group(2).strip()
        if kind == "answer":
            return f"<answer>{body}</answer>"
        return "<tool_call>" + json.dumps({"query": body}) + "</tool_call>"
    return "<answer>UNKNOWN</answer>"


class MockBackend:
    """Bit-deterministic stand-in for every model role."""

    def __init__(self, embed_dim: int = 256):
        self.embed_dim = embed_dim
        self.calls = {"summarize": 0, "merge": 0, "fold": 0, "embed": 0, "reason": 0}
        self._bucket_cache: dict[str, int] = {}

    def embed(self, text: str) -> np.ndarray:
        self.calls["embed"] += 1
        vec = np.zeros(self.embed_dim)
        for tok in tokenize(text):
            b = self._bucket_cache.get(tok)
            if b is None:
                b = self._bucket_cache[tok] = token_bucket(tok, self.embed_dim)
            vec[b] += 1.0
        norm = float(np.sqrt(np.dot(vec, vec)))
        if norm > 0:
            vec /= norm
        return vec

    def summarize_window(self, keyframes: Sequence[FrameRef], interval: tuple[float, float]) -> str:
        self.calls["summarize"] += 1
        return render_interval(interval) + " " + "; ".join(f.caption for f in keyframes if f.caption)

    def merge_summaries(self, a: str, b: str) -> str:
        self.calls["merge"] += 1
        return f"{a} | {b}"

    def fold_qa_summary(self, prev: str, q: str, a: str) -> str:
        self.calls["fold"] += 1
        entry = f"Q:{q} A:{a}"
        return f"{prev} | {entry}" if prev else entry

    def reason(self, turns: Sequence[ChatTurn]) -> str:
        check_turns(turns)
        self.calls["reason"] += 1
        return scripted_reason(turns)


# --- remote client ----------------------------------------------------------

SUMMARIZE_PROMPT = (
    "TASK summarize_window\n"
    "You describe a short video segment. List only facts that are directly observable "
    "in the frames: people, objects, actions, text on screen. One or two sentences."
)
MERGE_PROMPT = (
    "TASK merge_summaries\n"
    "Combine the two consecutive event descriptions into one description of the whole span. "
    "Keep distinctive objects and names; drop repetition."
)
FOLD_PROMPT = (
    "TASK fold_qa_summary\n"
    "Update the running dialogue summary with the new question and answer. Keep names "
    "consistent with earlier turns. Return only the updated summary."
)


def render_frame(f: FrameRef) -> str:
    return f"<frame t={fmt_ts(f.ts)} id={f.payload_id}>{f.caption}</frame>"


class RemoteBackend:
    """Client for an HTTP chat-completion + embedding endpoint.

    Requests follow the common ``/chat/completions`` and ``/embeddings`` shapes.
    Frame attachments are sent as caption text unless ``vision`` is set, in
    which case each frame also travels as an image reference.
    """

    def __init__(self, base_url: str, chat_model: str, embed_model: str, embed_dim: int,
                 timeout: float = 30.0, max_retries: int = 2, vision: bool = False,
                 api_key: str | None = None, transport: httpx.BaseTransport | None = None):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout,
                                   headers=headers, transport=transport)
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.embed_dim = embed_dim
        self.max_retries = max_retries
        self.vision = vision

    def close(self) -> None:
        self.client.close()

    def _post(self, path: str, body: dict) -> dict:
        delay = 0.5
        for attempt in range(self.max_retries + 1):
            try:
                resp = self.client.post(path, json=body)
            except httpx.TimeoutException as exc:
                err: BackendError = BackendTimeout(f"{path}: {exc}")
            except httpx.HTTPError as exc:
                err = EndpointError(None, str(exc))
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError:
                        raise EndpointError(resp.status_code, resp.text) from None
                err = EndpointError(resp.status_code, resp.text)
                # client errors will not improve on retry
                if resp.status_code < 500 and resp.status_code != 429:
                    raise err
            if attempt < self.max_retries:
                log.warning("retrying %s after %s (attempt %d)", path, err, attempt + 1)
                time.sleep(delay)
                delay *= 2
        raise err

    def _message(self, turn: ChatTurn) -> dict:
        text = turn.text
        if turn.attachments:
            text = "\n".join(render_frame(f) for f in turn.attachments) + "\n" + text
        if self.vision and turn.attachments:
            parts = [{"type": "image_url", "image_url": {"url": f.payload_id}} for f in turn.attachments]
            return {"role": turn.role, "content": parts + [{"type": "text", "text": text}]}
        return {"role": turn.role, "content": text}

    def reason(self, turns: Sequence[ChatTurn]) -> str:
        check_turns(turns)
        body = {"model": self.chat_model, "messages": [self._message(t) for t in turns], "temperature": 0}
        data = self._post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise EndpointError(200, json.dumps(data)) from None

    def embed(self, text: str) -> np.ndarray:
        data = self._post("/embeddings", {"model": self.embed_model, "input": text})
        try:
            vec = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError):
            raise EndpointError(200, json.dumps(data)) from None
        if vec.shape != (self.embed_dim,):
            raise DimMismatch(f"embedding length {vec.size} != {self.embed_dim}")
        return vec

    def summarize_window(self, keyframes: Sequence[FrameRef], interval: tuple[float, float]) -> str:
        turns = [ChatTurn("system", SUMMARIZE_PROMPT),
                 ChatTurn("user", f"Segment {render_interval(interval)}", tuple(keyframes))]
        return self.reason(turns)

    def merge_summaries(self, a: str, b: str) -> str:
        turns = [ChatTurn("system", MERGE_PROMPT), ChatTurn("user", f"FIRST:\n{a}\nSECOND:\n{b}")]
        return self.reason(turns)

    def fold_qa_summary(self, prev: str, q: str, a: str) -> str:
        turns = [ChatTurn("system", FOLD_PROMPT), ChatTurn("user", f"SUMMARY:\n{prev}\nQUESTION:\n{q}\nANSWER:\n{a}")]
        return self.reason(turns)
