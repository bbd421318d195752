"""Append-only newline-delimited JSON logs with startup replay.

Every durable store in the gateway is one flat file of JSON records, one
per line, only ever appended to. Replay at startup rebuilds in-memory
state; the files stay human-readable and diffable.

Durability discipline: each append is written and flushed in one call
before the triggering operation acknowledges, so a SIGKILL after the ack
never loses the record (the OS page cache survives process death). fsync
per append is available for power-loss paranoia but off by default.

Recovery discipline: a torn final line (no trailing newline, not valid
JSON) can only be an append that was never acknowledged — it is truncated
away with a warning. Any *terminated* line that fails to parse means real
corruption: StorageCorrupt names the file and line and the gateway must
refuse to start.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path
from typing import Iterator

from ssc.errors import SscError

logger = logging.getLogger(__name__)


class StorageCorrupt(SscError):
    pass


class StorageFailure(SscError):
    pass


class AppendLog:
    def __init__(self, path: Path, *, fsync: bool = False) -> None:
        self.path = Path(path)
        self._fsync = fsync
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._validate_and_heal()
        self._fh = open(self.path, "ab")

    def _validate_and_heal(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        if not data:
            return
        if not data.endswith(b"\n"):
            last_nl = data.rfind(b"\n")
            tail = data[last_nl + 1 :]
            try:
                json.loads(tail.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                logger.warning("truncating torn final record in %s (%d bytes)", self.path, len(tail))
                with open(self.path, "r+b") as fh:
                    fh.truncate(last_nl + 1 if last_nl >= 0 else 0)
                return
            # complete record that lost its newline mid-write: terminate it
            with open(self.path, "ab") as fh:
                fh.write(b"\n")

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        data = line.encode("utf-8") + b"\n"
        with self._lock:
            try:
                self._fh.write(data)
                self._fh.flush()
                if self._fsync:
                    os.fsync(self._fh.fileno())
            except (OSError, ValueError) as exc:  # ValueError: write on closed log
                raise StorageFailure(f"append to {self.path} failed: {exc}") from exc

    def replay(self) -> Iterator[dict]:
        """Parse every existing record in append order.

        Raises StorageCorrupt (file:line) on the first unparsable
        newline-terminated record.
        """
        if not self.path.exists():
            return
        with open(self.path, "rb") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip(b"\n")
                if not line:
                    continue
                try:
                    record = json.loads(line.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise StorageCorrupt(f"{self.path}:{lineno}: {exc}") from exc
                if not isinstance(record, dict):
                    raise StorageCorrupt(f"{self.path}:{lineno}: expected object")
                yield record

    def record_count(self) -> int:
        return sum(1 for _ in self.replay())

    def close(self) -> None:
        with self._lock:
            try:
                self._fh.close()
            except OSError:
                pass


class Storage:
    """A directory of named append-only logs (events, instances, audit, ...)."""

    def __init__(self, root: Path | str, *, fsync: bool = False) -> None:
        self.root = Path(root)
        self._fsync = fsync
        self._logs: dict[str, AppendLog] = {}
        self._lock = threading.Lock()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            probe = self.root / ".writable"
            probe.write_bytes(b"ok")
            probe.unlink()
        except OSError as exc:
            raise StorageFailure(f"storage path {self.root} is not writable: {exc}") from exc

    def log(self, name: str) -> AppendLog:
        with self._lock:
            if name not in self._logs:
                self._logs[name] = AppendLog(self.root / f"{name}.log", fsync=self._fsync)
            return self._logs[name]

    def close(self) -> None:
        with self._lock:
            for log in self._logs.values():
                log.close()
            self._logs.clear()
