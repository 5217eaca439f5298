"""Signature-keyed data-object store with reference counting.

Tasks communicate by writing and reading byte payloads keyed by task
signature.  Each object carries the consumer count known statically from
the plan; the last read frees it.  Live/peak byte accounting is the
instrument that makes the scheduler's memory claims checkable.  All
operations are thread-safe; counters are updated under one lock.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass

from .errors import ExecutionError


@dataclass(frozen=True)
class StoreStats:
    live_bytes: int
    peak_bytes: int
    put_count: int
    get_count: int
    released_count: int


class _Entry:
    __slots__ = ("payload", "size", "remaining", "spill_path")

    def __init__(self, payload: bytes, remaining: int, spill_path: str | None):
        self.size = len(payload)
        self.remaining = remaining
        self.spill_path = spill_path
        self.payload = b"" if spill_path else payload


class DataObjectStore:
    """In-memory object store; optional disk spill behind the same interface.

    Objects put with ``consumer_count=0`` (terminal stage outputs) stay
    live until explicitly released by the study readout.
    """

    def __init__(self, spill_dir: str | None = None):
        self._lock = threading.Lock()
        self._objects: dict[bytes, _Entry] = {}
        self._spill_dir = spill_dir
        self._live = 0
        self._peak = 0
        self._watermark = 0
        self._puts = 0
        self._gets = 0
        self._released = 0
        if spill_dir is not None:
            os.makedirs(spill_dir, exist_ok=True)

    # -- core operations ---------------------------------------------------

    def put(self, key: bytes, payload: bytes, consumer_count: int) -> None:
        if consumer_count < 0:
            raise ExecutionError("consumer_count must be >= 0")
        spill_path = None
        if self._spill_dir is not None:
            spill_path = os.path.join(self._spill_dir, key.hex())
            with open(spill_path, "wb") as fh:
                fh.write(payload)
        with self._lock:
            if key in self._objects:
                raise ExecutionError(
                    f"duplicate put for key {key.hex()}: the same signature was produced twice"
                )
            self._objects[key] = _Entry(payload, consumer_count, spill_path)
            self._live += len(payload)
            self._peak = max(self._peak, self._live)
            self._watermark = max(self._watermark, self._live)
            self._puts += 1

    def peek(self, key: bytes) -> bytes:
        """Read a payload without consuming a reference."""
        with self._lock:
            entry = self._require(key)
            return self._read(entry)

    def get_and_release(self, key: bytes) -> bytes:
        """Read a payload and consume one reference; frees on the last one."""
        with self._lock:
            entry = self._require(key)
            if entry.remaining < 1:
                raise ExecutionError(f"over-consumption of key {key.hex()}")
            payload = self._read(entry)
            entry.remaining -= 1
            self._gets += 1
            if entry.remaining == 0:
                self._free(key, entry)
            return payload

    def release(self, key: bytes) -> None:
        """Free an object regardless of its remaining consumer count."""
        with self._lock:
            entry = self._require(key)
            self._free(key, entry)

    def release_all(self) -> None:
        with self._lock:
            for key, entry in list(self._objects.items()):
                self._free(key, entry)

    def contains(self, key: bytes) -> bool:
        with self._lock:
            return key in self._objects

    # -- accounting ----------------------------------------------------------

    def stats(self) -> StoreStats:
        with self._lock:
            return StoreStats(
                self._live, self._peak, self._puts, self._gets, self._released
            )

    def reset_watermark(self) -> None:
        """Start a fresh high-water window (used per stage execution)."""
        with self._lock:
            self._watermark = self._live

    def watermark(self) -> int:
        """Peak live bytes since the last reset_watermark()."""
        with self._lock:
            return self._watermark

    # -- internals -----------------------------------------------------------

    def _require(self, key: bytes) -> _Entry:
        entry = self._objects.get(key)
        if entry is None:
            raise ExecutionError(f"missing key {key.hex()}: read before write or after free")
        return entry

    def _read(self, entry: _Entry) -> bytes:
        if entry.spill_path is not None:
            with open(entry.spill_path, "rb") as fh:
                return fh.read()
        return entry.payload

    def _free(self, key: bytes, entry: _Entry) -> None:
        del self._objects[key]
        self._live -= entry.size
        self._released += 1
        if entry.spill_path is not None and os.path.exists(entry.spill_path):
            os.unlink(entry.spill_path)
