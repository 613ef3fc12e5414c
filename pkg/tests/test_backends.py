import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventmem.backends import (
    ChatTurn,
    DimMismatch,
    EndpointError,
    MockBackend,
    RemoteBackend,
    fnv1a_32,
    scripted_reason,
)
from eventmem.stream_core import FrameRef


def test_fnv1a_reference_values():
    # published FNV-1a 32-bit test vectors
    assert fnv1a_32(b"") == 0x811C9DC5
    assert fnv1a_32(b"a") == 0xE40C292C
    assert fnv1a_32(b"foobar") == 0xBF9CF968


def test_mock_embed_properties():
    m = MockBackend(64)
    assert not m.embed("").any()
    assert np.array_equal(m.embed("teddy bear"), m.embed("bear teddy"))
    assert np.array_equal(m.embed("Teddy, bear!"), m.embed("teddy bear"))
    assert m.embed("a b c").shape == (64,)


@given(st.text(min_size=1).filter(lambda t: any(c.isalnum() for c in t)))
def test_mock_self_cosine_is_one(text):
    v = MockBackend(32).embed(text)
    if v.any():
        assert float(v @ v) == pytest.approx(1.0, abs=1e-12)


def test_mock_summaries():
    m = MockBackend(8)
    assert m.summarize_window([], (0.0, 32.0)) == "[0–32] "
    frames = [FrameRef(1.0, "a", "a dog"), FrameRef(2.0, "b", "a cat")]
    assert m.summarize_window(frames, (0.0, 32.0)) == "[0–32] a dog; a cat"
    assert m.merge_summaries("x", "y") == "x | y"
    assert m.fold_qa_summary("", "q", "a") == "Q:q A:a"
    assert m.fold_qa_summary("prev", "q", "a") == "prev | Q:q A:a"


@pytest.mark.parametrize("text, expected", [
    ("!answer:blue", "<answer>blue</answer>"),
    ("!tool:people in the living room", '<tool_call>{"query": "people in the living room"}</tool_call>'),
    ("no directive here", "<answer>UNKNOWN</answer>"),
])
def test_scripted_reason(text, expected):
    assert scripted_reason([ChatTurn("system", "s"), ChatTurn("user", "ctx\n" + text)]) == expected


def test_directive_read_from_newest_user_turn_only():
    turns = [ChatTurn("user", "!answer:old"), ChatTurn("assistant", "x"), ChatTurn("user", "evidence")]
    assert scripted_reason(turns) == "<answer>UNKNOWN</answer>"


def test_system_turn_position_checked():
    with pytest.raises(ValueError):
        MockBackend(8).reason([ChatTurn("user", "u"), ChatTurn("system", "s")])
    with pytest.raises(ValueError):
        ChatTurn("robot", "x")


# --- remote client ---

def echo_transport(embedding_len=8, seen=None):
    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        if seen is not None:
            seen.append((request.url.path, body))
        if request.url.path.endswith("/embeddings"):
            return httpx.Response(200, json={"data": [{"embedding": [0.5] * embedding_len}]})
        last = body["messages"][-1]["content"]
        return httpx.Response(200, json={"choices": [{"message": {"content": f"echo:{last[-20:]}"}}]})
    return httpx.MockTransport(handler)


def test_remote_request_shapes():
    seen = []
    r = RemoteBackend("http://stub/v1", "chat-m", "emb-m", 8, transport=echo_transport(seen=seen))
    frames = (FrameRef(1.5, "p1", "a red car"),)
    out = r.reason([ChatTurn("system", "sys"), ChatTurn("user", "what now?", frames)])
    assert out.startswith("echo:")
    path, body = seen[0]
    assert path == "/v1/chat/completions"
    assert body["model"] == "chat-m" and body["temperature"] == 0
    assert body["messages"][1]["content"].startswith("<frame t=1.5 id=p1>a red car</frame>")
    vec = r.embed("hello")
    assert seen[1] == ("/v1/embeddings", {"model": "emb-m", "input": "hello"})
    assert vec.shape == (8,)


def test_remote_dim_mismatch():
    r = RemoteBackend("http://stub", "c", "e", 8, transport=echo_transport(embedding_len=5))
    with pytest.raises(DimMismatch):
        r.embed("x")


def test_remote_http_error_surfaces():
    def handler(request):
        return httpx.Response(400, text="bad request")
    r = RemoteBackend("http://stub", "c", "e", 8, transport=httpx.MockTransport(handler))
    with pytest.raises(EndpointError) as info:
        r.reason([ChatTurn("user", "x")])
    assert info.value.status == 400


def test_remote_retries_server_errors(monkeypatch):
    monkeypatch.setattr("eventmem.backends.time.sleep", lambda s: None)
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json={"choices": [{"message": {"content": "<answer>ok</answer>"}}]})
    r = RemoteBackend("http://stub", "c", "e", 8, transport=httpx.MockTransport(handler), max_retries=2)
    assert r.reason([ChatTurn("user", "x")]) == "<answer>ok</answer>"
    assert len(calls) == 3


def test_unreachable_endpoint(monkeypatch):
    monkeypatch.setattr("eventmem.backends.time.sleep", lambda s: None)
    r = RemoteBackend("http://127.0.0.1:9", "c", "e", 8, timeout=0.5, max_retries=1)
    with pytest.raises(EndpointError):
        r.reason([ChatTurn("user", "x")])


def test_vision_attachments_sent_as_references():
    seen = []
    r = RemoteBackend("http://stub", "c", "e", 8, vision=True, transport=echo_transport(seen=seen))
    r.reason([ChatTurn("user", "q", (FrameRef(0.0, "frame://0", "cap"),))])
    content = seen[0][1]["messages"][0]["content"]
    assert content[0] == {"type": "image_url", "image_url": {"url": "frame://0"}}
    assert content[-1]["type"] == "text"


def test_real_http_round_trip():
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            if self.path.endswith("/embeddings"):
                payload = {"data": [{"embedding": [1.0, 0.0, 0.0, 0.0]}]}
            else:
                payload = {"choices": [{"message": {"content": f"<answer>{len(body['messages'])}</answer>"}}]}
            data = json.dumps(payload).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        r = RemoteBackend(f"http://127.0.0.1:{server.server_port}", "c", "e", 4, timeout=5)
        assert r.reason([ChatTurn("system", "s"), ChatTurn("user", "u")]) == "<answer>2</answer>"
        assert list(r.embed("x")) == [1.0, 0.0, 0.0, 0.0]
        r.close()
    finally:
        server.shutdown()
