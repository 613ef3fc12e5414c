"""Command line entry point: ``run``, ``gen`` and ``snapshot``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .backends import MockBackend, RemoteBackend
from .harness.runner import run_trace
from .harness.snapshot import snapshot_load, snapshot_save
from .harness.synthetic import generate_synthetic
from .harness.trace import write_trace
from .orchestrator import RunMode, StreamEngine
from .stream_core import EngineConfig, load_config, validate_config


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args) -> EngineConfig:
    overrides = _overrides(args.set)
    if args.config:
        return load_config(args.config, overrides)
    return validate_config(EngineConfig.from_dict({**EngineConfig().to_dict(), **overrides}))


def _backend(args, cfg: EngineConfig):
    if args.backend == "mock":
        return MockBackend(cfg.embed_dim)
    if not args.endpoint:
        raise SystemExit("--backend remote needs --endpoint")
    return RemoteBackend(args.endpoint, args.chat_model, args.embed_model, cfg.embed_dim,
                         timeout=args.timeout, api_key=os.environ.get("EVENTMEM_API_KEY"))


def _add_engine_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--mode", default="hierarchical", choices=[m.value for m in RunMode])
    p.add_argument("--backend", default="mock", choices=["mock", "remote"])
    p.add_argument("--endpoint", help="base URL of the chat/embedding service")
    p.add_argument("--chat-model", default="default")
    p.add_argument("--embed-model", default="default")
    p.add_argument("--timeout", type=float, default=30.0)


def cmd_run(args) -> int:
    cfg = _config(args)
    backend = _backend(args, cfg)
    engine = StreamEngine(cfg, backend, RunMode(args.mode), background=not args.deterministic)
    report = run_trace(args.trace, cfg, args.mode, backend, deterministic=args.deterministic,
                       report_path=args.report, engine=engine)
    if args.snapshot_out:
        snapshot_save(engine, args.snapshot_out)
    if not args.report:
        sys.stdout.write(report.dumps())
    else:
        print(json.dumps(report.aggregate(), sort_keys=True))
    return 0


def cmd_gen(args) -> int:
    events = generate_synthetic(args.seed, args.minutes, args.needles, fps=args.fps,
                                embed_dim=args.embed_dim, probe_every=args.probe_every)
    write_trace(events, args.out)
    return 0


def cmd_snapshot(args) -> int:
    if args.action == "save":
        if not args.trace:
            raise SystemExit("snapshot save needs --trace to build the state from")
        cfg = _config(args)
        backend = _backend(args, cfg)
        engine = StreamEngine(cfg, backend, RunMode(args.mode))
        run_trace(args.trace, cfg, args.mode, backend, engine=engine)
        snapshot_save(engine, args.path)
    else:
        engine = snapshot_load(args.path, MockBackend(_peek_dim(args.path)))
    info = {
        "nodes": len(engine.forest),
        "roots": [list(iv) for iv, _ in engine.forest.root_summaries()],
        "qa_records": len(engine.qa.records),
        "flushed_to": engine.tiers.last_flush_end,
        "mode": engine.mode.value,
    }
    print(json.dumps(info, sort_keys=True))
    return 0


def _peek_dim(path: str) -> int:
    from .harness.snapshot import _HEAD, _LEN

    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size + _LEN.size)
        (meta_len,) = _LEN.unpack_from(head, _HEAD.size)
        meta = json.loads(fh.read(meta_len))
    return int(meta["config"]["embed_dim"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eventmem")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replay a trace and write a report")
    run.add_argument("--trace", required=True)
    _add_engine_args(run)
    run.add_argument("--report", help="output file (default: stdout)")
    run.add_argument("--deterministic", action="store_true",
                     help="serialize maintenance and drop wall-clock fields")
    run.add_argument("--snapshot-out", help="save the final engine state here")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen", help="write a synthetic needle trace")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--minutes", type=float, required=True)
    gen.add_argument("--needles", default="", help='e.g. "2@50,10@55" (needle minute @ query minute)')
    gen.add_argument("--out", required=True)
    gen.add_argument("--fps", type=float, default=2.0)
    gen.add_argument("--embed-dim", type=int, default=EngineConfig().embed_dim)
    gen.add_argument("--probe-every", type=float, default=1.0, help="minutes between present-moment probes")
    gen.set_defaults(func=cmd_gen)

    snap = sub.add_parser("snapshot", help="save or inspect an engine snapshot")
    snap.add_argument("action", choices=["save", "load"])
    snap.add_argument("--path", required=True)
    snap.add_argument("--trace", help="trace to replay before saving")
    _add_engine_args(snap)
    snap.set_defaults(func=cmd_snapshot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)
