"""Streaming event memory with coarse-to-fine question answering."""
from .backends import MockBackend, RemoteBackend
from .forest import EventForest, EventNode, merge_score
from .orchestrator import QueryReport, RunMode, StreamEngine, answer_query, parse_outcome
from .stream_core import ConfigError, EngineConfig, FrameRef, TokenBudget, validate_config

__all__ = [
    "ConfigError", "EngineConfig", "EventForest", "EventNode", "FrameRef", "MockBackend", "QueryReport",
    "RemoteBackend", "RunMode", "StreamEngine", "TokenBudget", "answer_query", "merge_score",
    "parse_outcome", "validate_config",
]
