"""Socket protocols: edge events in, telemetry out.

Both directions use newline-delimited JSON over a stream socket. An event is
``{"seq":…,"ts_ms":…,"faces":…}\\n``; telemetry lines match the log format.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .telemetry import TelemetrySample, decode_sample, encode_sample

log = logging.getLogger(__name__)

DEFAULT_EVENT_PORT = 5555
DEFAULT_TELEMETRY_PORT = 5556
MAX_LINE_BYTES = 64 * 1024


class WireError(ValueError):
    pass


class MalformedMessageError(WireError):
    pass


class MissingFieldError(WireError):
    pass


class InvalidFieldError(WireError):
    pass


class NegativeFacesError(InvalidFieldError):
    pass


class NonMonotoneSeqError(WireError):
    pass


class TraceError(ValueError):
    pass


class ReplayError(ConnectionError):
    pass


@dataclass(frozen=True)
class EventMsg:
    seq: int
    ts_ms: float
    faces: int


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def encode_event(msg: EventMsg) -> bytes:
    return (
        json.dumps({"seq": msg.seq, "ts_ms": msg.ts_ms, "faces": msg.faces}, separators=(",", ":"))
        + "\n"
    ).encode("utf-8")


def decode_event(data: bytes | str) -> EventMsg:
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
        doc = json.loads(text)
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise MalformedMessageError(f"not a JSON line: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedMessageError("event must be a JSON object")
    for key in ("seq", "ts_ms", "faces"):
        if key not in doc:
            raise MissingFieldError(f"missing field {key!r}")
    seq, ts, faces = doc["seq"], doc["ts_ms"], doc["faces"]
    if not _is_int(seq) or not (0 <= seq < 2**64):
        raise InvalidFieldError(f"seq must be a u64, got {seq!r}")
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or not math.isfinite(ts):
        raise InvalidFieldError(f"ts_ms must be a finite number, got {ts!r}")
    if not _is_int(faces):
        raise InvalidFieldError(f"faces must be an integer, got {faces!r}")
    if faces < 0:
        raise NegativeFacesError(f"faces must be >= 0, got {faces}")
    return EventMsg(seq, ts, faces)


def encode_telemetry(s: TelemetrySample) -> bytes:
    return encode_sample(s)


def decode_telemetry(data: bytes | str) -> TelemetrySample:
    try:
        return decode_sample(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessageError(f"not a JSON line: {exc}") from None
    except KeyError as exc:
        raise MissingFieldError(str(exc)) from None
    except (TypeError, AttributeError) as exc:
        raise MalformedMessageError(str(exc)) from None


class SeqTracker:
    """Enforces strictly increasing seq on one connection."""

    def __init__(self):
        self.last: int | None = None
        self.rejected = 0

    def check(self, msg: EventMsg) -> None:
        if self.last is not None and msg.seq <= self.last:
            self.rejected += 1
            raise NonMonotoneSeqError(f"seq {msg.seq} after {self.last}")
        self.last = msg.seq


class EventStreamDecoder:
    """Incremental framer + decoder for one connection.

    Bad lines are counted and skipped; a line longer than ``max_line`` is
    discarded up to its terminating newline so framing recovers.
    """

    def __init__(self, max_line: int = MAX_LINE_BYTES):
        self.max_line = max_line
        self._buf = bytearray()
        self._discarding = False
        self.seq = SeqTracker()
        self.errors: dict[str, int] = {}

    def _err(self, exc: Exception) -> None:
        name = type(exc).__name__
        self.errors[name] = self.errors.get(name, 0) + 1
        log.debug("dropped event line: %s", exc)

    def feed(self, data: bytes) -> list[EventMsg]:
        out = []
        self._buf += data
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                if len(self._buf) > self.max_line:
                    self._buf.clear()
                    if not self._discarding:
                        self._discarding = True
                        self._err(MalformedMessageError("line too long"))
                return out
            line = bytes(self._buf[:nl])
            del self._buf[: nl + 1]
            if self._discarding:
                self._discarding = False
                continue
            if not line.strip():
                continue
            if len(line) > self.max_line:
                self._err(MalformedMessageError("line too long"))
                continue
            try:
                msg = decode_event(line)
                self.seq.check(msg)
            except WireError as exc:
                self._err(exc)
                continue
            out.append(msg)


class EventServer:
    """Single-client NDJSON event server.

    Accepts one edge node at a time; on disconnect it goes back to waiting for
    the next connection. Decoded events are handed to ``handler`` in order.
    """

    def __init__(self, host: str, port: int, handler: Callable[[EventMsg], None], *, poll: float = 0.1):
        self.handler = handler
        self.poll = poll
        self._stop = threading.Event()
        self._sock = socket.create_server((host, port), reuse_port=False)
        self._sock.settimeout(poll)
        self.address = self._sock.getsockname()[:2]
        self.delivered = 0
        self.connections = 0
        self.errors: dict[str, int] = {}
        self.idle = threading.Event()
        self.idle.set()

    @property
    def port(self) -> int:
        return self.address[1]

    def shutdown(self) -> None:
        self._stop.set()

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    conn, peer = self._sock.accept()
                except socket.timeout:
                    continue
                except OSError:
                    if self._stop.is_set():
                        break
                    raise
                self.connections += 1
                self.idle.clear()
                log.info("edge node connected from %s:%s", *peer[:2])
                try:
                    self._serve_client(conn)
                finally:
                    conn.close()
                    self.idle.set()
        finally:
            self._sock.close()

    def _serve_client(self, conn: socket.socket) -> None:
        conn.settimeout(self.poll)
        dec = EventStreamDecoder()
        try:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(65536)
                except socket.timeout:
                    continue
                except OSError as exc:
                    log.info("edge connection error: %s", exc)
                    break
                if not chunk:
                    break
                for msg in dec.feed(chunk):
                    self.handler(msg)
                    self.delivered += 1
        finally:
            for k, v in dec.errors.items():
                self.errors[k] = self.errors.get(k, 0) + v


def serve_events(endpoint: tuple[str, int], handler: Callable[[EventMsg], None],
                 stop: threading.Event | None = None) -> EventServer:
    """Run an EventServer on a daemon thread; returns it once bound."""
    srv = EventServer(endpoint[0], endpoint[1], handler)
    if stop is not None:
        threading.Thread(target=lambda: (stop.wait(), srv.shutdown()), daemon=True).start()
    threading.Thread(target=srv.serve_forever, name="event-server", daemon=True).start()
    return srv


def parse_endpoint(text: str, default_port: int) -> tuple[str, int]:
    """``host:port``, ``host`` or ``:port``."""
    host, sep, port = text.rpartition(":")
    if not sep:
        return text or "127.0.0.1", default_port
    return host or "127.0.0.1", int(port)


def endpoint_from_env(var: str, fallback: str, default_port: int) -> tuple[str, int]:
    return parse_endpoint(os.environ.get(var, fallback), default_port)


# --------------------------------------------------------------------------
# Traces and replay
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EventTrace:
    entries: tuple[tuple[float, int], ...]

    def __post_init__(self):
        prev = -math.inf
        for off, faces in self.entries:
            if off < prev:
                raise TraceError(f"offsets must be non-decreasing ({off} after {prev})")
            if faces < 0:
                raise TraceError(f"faces must be >= 0, got {faces}")
            prev = off

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def parse_trace(text: str) -> EventTrace:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["offset_ms", "faces"]:
        raise TraceError("trace CSV must have header 'offset_ms,faces'")
    entries = []
    for lineno, row in enumerate(reader, start=2):
        try:
            off = float(row["offset_ms"])
            faces = int(row["faces"])
        except (TypeError, ValueError):
            raise TraceError(f"line {lineno}: bad row {row!r}") from None
        if not math.isfinite(off):
            raise TraceError(f"line {lineno}: offset must be finite")
        entries.append((int(off) if off.is_integer() else off, faces))
    return EventTrace(tuple(entries))


def load_trace(path: str | Path) -> EventTrace:
    return parse_trace(Path(path).read_text())


def trace_events(trace: Iterable[tuple[float, int]], first_seq: int = 1) -> list[EventMsg]:
    return [EventMsg(first_seq + i, off, faces) for i, (off, faces) in enumerate(trace)]


def replay(trace: EventTrace, endpoint: tuple[str, int], speed: float = math.inf, *,
           attempts: int = 5, backoff_s: float = 0.1, sleep=time.sleep) -> int:
    """Send a trace to the event server, pacing by offset / speed.

    Seq numbers are assigned from 1. A refused or reset connection is retried
    with exponential backoff, resuming at the first unsent event; after
    ``attempts`` consecutive failures ReplayError is raised. Returns the
    number of events sent.
    """
    if speed <= 0:
        raise ValueError("speed must be > 0")
    events = trace_events(trace)
    if not events:
        return 0
    idx, failures = 0, 0
    start = time.monotonic()
    while idx < len(events):
        try:
            with socket.create_connection(endpoint, timeout=5.0) as sock:
                failures = 0
                while idx < len(events):
                    ev = events[idx]
                    if math.isfinite(speed):
                        due = start + (ev.ts_ms / speed) / 1000.0
                        delay = due - time.monotonic()
                        if delay > 0:
                            sleep(delay)
                    sock.sendall(encode_event(ev))
                    idx += 1
        except OSError as exc:
            failures += 1
            if failures >= attempts:
                raise ReplayError(f"giving up after {failures} attempts: {exc}") from exc
            wait = backoff_s * 2 ** (failures - 1)
            log.warning("replay connection failed (%s); retrying in %.2fs", exc, wait)
            sleep(wait)
    return len(events)
