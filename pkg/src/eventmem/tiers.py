"""Short window / medium buffer over the live stream, plus window batching.

Frames are kept at full fidelity for the last ``tau_m`` seconds. Every time the
stream crosses a window boundary (multiples of ``tau_m`` since the last flush)
a :class:`WindowBatch` is emitted for the event forest.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TypeVar

from .stream_core import EngineConfig, FrameRef

T = TypeVar("T")

# tolerance for comparing float timestamps on sampling grids
EPS = 1e-9


class OutOfOrderFrame(ValueError):
    pass


def uniform_sample(items: Sequence[T], n: int) -> list[T]:
    """Pick ``n`` items at indices floor(i*m/n); all items when m <= n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    m = len(items)
    if m <= n:
        return list(items)
    picked = []
    last = -1
    for i in range(n):
        idx = (i * m) // n
        if idx != last:
            picked.append(items[idx])
            last = idx
    return picked


@dataclass(frozen=True)
class WindowBatch:
    start: float
    end: float
    keyframes: tuple[FrameRef, ...]
    source_count: int

    @property
    def interval(self) -> tuple[float, float]:
        return (self.start, self.end)


def subsample_back(frames: Sequence[FrameRef], now: float, horizon: float, rate: float) -> list[FrameRef]:
    """Frames in [now - horizon, now], thinned to ``rate`` by stepping back from the newest."""
    step = 1.0 / rate
    lo = now - horizon - EPS
    kept: list[FrameRef] = []
    last_ts = None
    for f in reversed(frames):
        if f.ts > now + EPS:
            continue
        if f.ts < lo:
            break
        if last_ts is None or f.ts <= last_ts - step + EPS:
            kept.append(f)
            last_ts = f.ts
    kept.reverse()
    return kept


class TierStore:
    """Full-fidelity frame store feeding both views and the window batcher."""

    def __init__(self, cfg: EngineConfig, start: float = 0.0):
        self.cfg = cfg
        self.frames: list[FrameRef] = []
        self.last_flush_end = start
        # frames of the still-open window, in arrival order
        self._pending: list[FrameRef] = []

    @property
    def newest_ts(self) -> float | None:
        return self.frames[-1].ts if self.frames else None

    def push(self, f: FrameRef) -> list[WindowBatch]:
        """Append ``f``; return the window batches it closes (usually none or one).

        A frame arriving after a gap longer than one window closes every
        intervening window, empty ones included, so batch intervals always
        tile the flushed range.
        """
        newest = self.newest_ts
        if newest is not None and f.ts <= newest:
            raise OutOfOrderFrame(f"frame at {f.ts} does not follow {newest}")
        if f.ts < self.last_flush_end:
            raise OutOfOrderFrame(f"frame at {f.ts} precedes flushed range end {self.last_flush_end}")
        batches = []
        while f.ts >= self.last_flush_end + self.cfg.tau_m:
            batches.append(self._flush(self.last_flush_end + self.cfg.tau_m))
        self.frames.append(f)
        self._pending.append(f)
        self._evict(f.ts)
        return batches

    def close(self, end: float | None = None) -> WindowBatch | None:
        """Flush the final partial window, ending at ``end`` (default: newest frame)."""
        if end is None:
            end = self.newest_ts if self.newest_ts is not None else self.last_flush_end
        if end < self.last_flush_end:
            raise OutOfOrderFrame(f"close at {end} precedes flushed range end {self.last_flush_end}")
        if not self._pending and end == self.last_flush_end:
            return None
        return self._flush(end, inclusive=True)

    def _flush(self, end: float, inclusive: bool = False) -> WindowBatch:
        if inclusive:
            window = [f for f in self._pending if f.ts <= end]
        else:
            window = [f for f in self._pending if f.ts < end]
        self._pending = self._pending[len(window):]
        batch = WindowBatch(
            start=self.last_flush_end,
            end=end,
            keyframes=tuple(uniform_sample(window, self.cfg.n_f)),
            source_count=len(window),
        )
        self.last_flush_end = end
        return batch

    def _evict(self, newest: float) -> None:
        cutoff = newest - self.cfg.tau_m - EPS
        drop = 0
        while drop < len(self.frames) and self.frames[drop].ts < cutoff:
            drop += 1
        if drop:
            del self.frames[:drop]

    def view(self) -> tuple[FrameRef, ...]:
        return tuple(self.frames)


def short_view(frames: Sequence[FrameRef], now: float, cfg: EngineConfig) -> list[FrameRef]:
    return subsample_back(frames, now, cfg.tau_s, cfg.r_s)


def medium_view(frames: Sequence[FrameRef], now: float, cfg: EngineConfig) -> list[FrameRef]:
    return subsample_back(frames, now, cfg.tau_m, cfg.r_m)
