"""Process-global runtime and per-thread execution contexts.

The runtime owns everything immutable-after-startup (device list, op
registry, options) plus the shared services: instrumentation counters, the
RNG stream behind stateful random ops, and the executor worker pool.

Each thread of execution owns one ExecutionContext: its stack of open
traces, its stack of active gradient tapes, and its device-scope stack.
"""
from __future__ import annotations

import os
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, List, Optional

import numpy as np

from .devices import Device, default_devices


@dataclass(frozen=True)
class RuntimeOptions:
    accelerators: int = 0
    executor_workers: Optional[int] = None  # None = hardware parallelism
    seed: int = 0
    serialize_host_callbacks: bool = True

    @property
    def workers(self) -> int:
        if self.executor_workers is not None:
            return max(1, self.executor_workers)
        return max(1, os.cpu_count() or 1)


class RuntimeStats:
    """Instrumentation counters; cheap enough to leave always on."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        with getattr(self, "_lock"):
            self.eager_dispatches = 0
            self.eager_op_counts: Counter = Counter()
            self.transparent_copies = 0
            self.traces = 0
            self.derived_traces = 0

    def count_eager(self, op: str) -> None:
        with self._lock:
            self.eager_dispatches += 1
            self.eager_op_counts[op] += 1

    def count_copy(self, n: int = 1) -> None:
        with self._lock:
            self.transparent_copies += n

    def count_trace(self) -> None:
        with self._lock:
            self.traces += 1

    def count_derived_trace(self) -> None:
        with self._lock:
            self.derived_traces += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "eager_dispatches": self.eager_dispatches,
                "eager_op_counts": dict(self.eager_op_counts),
                "transparent_copies": self.transparent_copies,
                "traces": self.traces,
                "derived_traces": self.derived_traces,
            }


class ExecutionContext:
    """Per-thread mode, tape, and placement state."""

    __slots__ = ("traces", "tapes", "device_scopes", "escape_depth")

    def __init__(self):
        self.traces: List[Any] = []  # stack of staging.TraceState
        self.tapes: List[Any] = []  # stack of tape.Tape, innermost last
        self.device_scopes: List[Any] = []
        self.escape_depth = 0

    @property
    def tracing(self) -> bool:
        """True when dispatches should record graph nodes."""
        return bool(self.traces) and self.escape_depth == 0

    @property
    def current_trace(self):
        return self.traces[-1]

    def scope_device(self):
        return self.device_scopes[-1] if self.device_scopes else None


class Runtime:
    def __init__(self, options: Optional[RuntimeOptions] = None):
        self.options = options or RuntimeOptions()
        self.devices: List[Device] = default_devices(self.options.accelerators)
        self.stats = RuntimeStats()
        self._rng_lock = threading.Lock()
        self._rng = np.random.default_rng(self.options.seed)
        self._pool: Optional[ThreadPoolExecutor] = None
        self._pool_lock = threading.Lock()
        # RLock: a callback may itself contain host calls.
        self.host_callback_lock = threading.RLock()
        from .ops import build_registry

        self.registry = build_registry()

    def reseed(self, seed: int) -> None:
        with self._rng_lock:
            self._rng = np.random.default_rng(seed)

    def draw(self, fn) -> np.ndarray:
        """Run ``fn(rng)`` under the RNG lock; the only way to consume RNG."""
        with self._rng_lock:
            return fn(self._rng)

    @property
    def pool(self) -> ThreadPoolExecutor:
        with self._pool_lock:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(
                    max_workers=self.options.workers,
                    thread_name_prefix="stageflow-exec",
                )
            return self._pool

    def shutdown(self) -> None:
        with self._pool_lock:
            if self._pool is not None:
                self._pool.shutdown(wait=True)
                self._pool = None


_runtime_lock = threading.Lock()
_runtime: Optional[Runtime] = None

_local = threading.local()


def get_runtime() -> Runtime:
    global _runtime
    rt = _runtime  # lock-free fast path; assignment is atomic
    if rt is None:
        with _runtime_lock:
            if _runtime is None:
                _runtime = Runtime()
            rt = _runtime
    return rt


def init_runtime(options: Optional[RuntimeOptions] = None) -> Runtime:
    """Replace the global runtime (fresh devices, registry, counters, RNG).

    Open traces, tapes, and device scopes on the calling thread are
    discarded; other threads' contexts reset lazily on next use.
    """
    global _runtime
    with _runtime_lock:
        if _runtime is not None:
            _runtime.shutdown()
        _runtime = Runtime(options)
    _local.context = ExecutionContext()
    _local.runtime_ref = _runtime
    return _runtime


def current_context() -> ExecutionContext:
    rt = get_runtime()
    if getattr(_local, "runtime_ref", None) is not rt:
        _local.context = ExecutionContext()
        _local.runtime_ref = rt
    return _local.context
