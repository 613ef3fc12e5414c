"""Versioned, checksummed engine snapshots.

Layout (little endian)::

    magic    8 bytes   b"EVMSNAP\\0"
    version  u32
    digest   32 bytes  sha256 of everything after it
    metalen  u64
    meta     JSON      config, mode, frame table, node table, roots, QA store,
                       and a "blobs" entry describing the arrays that follow
    blobs    raw float64 arrays (node embeddings, QA embeddings)

Frames are stored once in a table and referenced by index everywhere else.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..backends import Backend
from ..forest import EventForest, EventNode
from ..orchestrator import RunMode, StreamEngine
from ..qa_memory import QARecord
from ..stream_core import EngineConfig, FrameRef

MAGIC = b"EVMSNAP\0"
VERSION = 1
_HEAD = struct.Struct("<8sI32s")
_LEN = struct.Struct("<Q")


class SnapshotError(Exception):
    pass


class SnapshotIOError(SnapshotError, OSError):
    pass


class VersionMismatch(SnapshotError):
    pass


class CorruptSnapshot(SnapshotError):
    pass


class _FrameTable:
    def __init__(self) -> None:
        self.rows: list[list] = []
        self.index: dict[str, int] = {}

    def ref(self, f: FrameRef) -> int:
        i = self.index.get(f.payload_id)
        if i is None:
            i = self.index[f.payload_id] = len(self.rows)
            self.rows.append([f.ts, f.payload_id, f.caption])
        return i


def encode(engine: StreamEngine) -> bytes:
    engine.wait_idle()
    frames = _FrameTable()
    nodes = engine.forest.nodes()
    records = engine.qa.records
    dim = engine.cfg.embed_dim
    meta = {
        "format": "eventmem.snapshot",
        "version": VERSION,
        "config": engine.cfg.to_dict(),
        "mode": engine.mode.value,
        "closed": engine.closed,
        "last_query_ts": engine.last_query_ts,
        "tiers": {
            "frames": [frames.ref(f) for f in engine.tiers.frames],
            "pending": [frames.ref(f) for f in engine.tiers._pending],
            "last_flush_end": engine.tiers.last_flush_end,
        },
        "archive": [frames.ref(f) for f in engine.archive],
        "forest": {
            "bounded": engine.forest.bounded,
            "merge_count": engine.forest.merge_count,
            "roots": list(engine.forest.roots),
            "nodes": [
                [n.id, n.start, n.end, [frames.ref(f) for f in n.keyframes], n.summary, n.level, list(n.children)]
                for n in nodes
            ],
        },
        "qa": {
            "summary": engine.qa.summary,
            "records": [[r.question, r.answer, r.asked_at] for r in records],
        },
        "blobs": [
            {"name": "node_embeddings", "dtype": "<f8", "shape": [len(nodes), dim]},
            {"name": "qa_embeddings", "dtype": "<f8", "shape": [len(records), dim]},
        ],
    }
    meta["frames"] = frames.rows
    node_emb = np.stack([n.embedding for n in nodes]) if nodes else np.zeros((0, dim))
    qa_emb = np.stack([r.embedding for r in records]) if records else np.zeros((0, dim))
    meta_bytes = json.dumps(meta, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    body = b"".join([
        _LEN.pack(len(meta_bytes)), meta_bytes,
        node_emb.astype("<f8").tobytes(), qa_emb.astype("<f8").tobytes(),
    ])
    return _HEAD.pack(MAGIC, VERSION, hashlib.sha256(body).digest()) + body


def decode(data: bytes, backend: Backend) -> StreamEngine:
    if len(data) < _HEAD.size + _LEN.size:
        raise CorruptSnapshot("file too short")
    magic, version, digest = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CorruptSnapshot("bad magic")
    if version != VERSION:
        raise VersionMismatch(f"snapshot version {version}, expected {VERSION}")
    body = memoryview(data)[_HEAD.size:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptSnapshot("checksum mismatch")
    (meta_len,) = _LEN.unpack_from(body)
    try:
        meta = json.loads(bytes(body[_LEN.size:_LEN.size + meta_len]).decode("utf-8"))
    except ValueError as exc:
        raise CorruptSnapshot(f"unreadable metadata: {exc}") from None

    offset = _LEN.size + meta_len
    blobs = {}
    for spec in meta["blobs"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) * 8
        blobs[spec["name"]] = np.frombuffer(body[offset:offset + size], dtype=spec["dtype"]).reshape(shape)
        offset += size
    if offset != len(body):
        raise CorruptSnapshot("trailing or missing bytes")

    cfg = EngineConfig.from_dict(meta["config"])
    engine = StreamEngine(cfg, backend, RunMode(meta["mode"]))
    table = [FrameRef(ts, pid, cap) for ts, pid, cap in meta["frames"]]

    engine.tiers.frames = [table[i] for i in meta["tiers"]["frames"]]
    engine.tiers._pending = [table[i] for i in meta["tiers"]["pending"]]
    engine.tiers.last_flush_end = meta["tiers"]["last_flush_end"]
    engine.archive = [table[i] for i in meta["archive"]]
    engine.closed = meta["closed"]
    engine.last_query_ts = meta["last_query_ts"]

    f = meta["forest"]
    node_emb = blobs["node_embeddings"]
    nodes = []
    for (nid, start, end, kf, summary, level, children), emb in zip(f["nodes"], node_emb):
        emb = np.array(emb)
        emb.setflags(write=False)
        nodes.append(EventNode(nid, start, end, tuple(table[i] for i in kf), summary, emb, level, tuple(children)))
    engine.forest = EventForest.restore(cfg.n_r, cfg.lam, cfg.n_f, cfg.embed_dim, f["bounded"],
                                        nodes, f["roots"], f["merge_count"])

    engine.qa.summary = meta["qa"]["summary"]
    qa_emb = blobs["qa_embeddings"]
    for (q, a, t), emb in zip(meta["qa"]["records"], qa_emb):
        emb = np.array(emb)
        emb.setflags(write=False)
        engine.qa.records.append(QARecord(q, a, t, emb))
    return engine


def snapshot_save(engine: StreamEngine, path: str | Path) -> None:
    data = encode(engine)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise SnapshotIOError(str(exc)) from exc


def snapshot_load(path: str | Path, backend: Backend) -> StreamEngine:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SnapshotIOError(str(exc)) from exc
    return decode(data, backend)
