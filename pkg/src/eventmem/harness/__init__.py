from ..orchestrator import RunMode
from .runner import RunReport, run_trace
from .snapshot import CorruptSnapshot, VersionMismatch, snapshot_load, snapshot_save
from .synthetic import generate_synthetic, parse_needles
from .trace import TraceEvent, TraceParseError, read_trace, write_trace

__all__ = [
    "CorruptSnapshot", "RunMode", "RunReport", "TraceEvent", "TraceParseError", "VersionMismatch",
    "generate_synthetic", "parse_needles", "read_trace", "run_trace", "snapshot_load", "snapshot_save",
    "write_trace",
]
