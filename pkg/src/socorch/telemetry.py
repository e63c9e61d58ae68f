"""Power model, telemetry samples, and the log/publish/report pipeline.

All power coefficients are illustrative configuration values; none of them
are measurements of real hardware.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import statistics
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .fabric import FabricState, Lifecycle, Variant

log = logging.getLogger(__name__)


class PowerModelError(ValueError):
    pass


class EmptyReportError(ValueError):
    pass


@dataclass(frozen=True)
class DynamicLaw:
    base_w: float
    slope_w: float

    def watts(self, points: int) -> float:
        return self.base_w + self.slope_w * math.log2(points)


@dataclass(frozen=True)
class ExecTimeLaw:
    base_ms: float
    ns_per_butterfly: float

    def ms(self, points: int) -> float:
        butterflies = points // 2 * int(math.log2(points))
        return self.base_ms + butterflies * self.ns_per_butterfly * 1e-6


@dataclass(frozen=True)
class PowerModel:
    static_w: dict[str, float]
    dynamic: dict[Variant, DynamicLaw]
    exec_time: dict[Variant, ExecTimeLaw] = field(default_factory=dict)

    def dynamic_w(self, variant: Variant, points: int) -> float:
        try:
            return self.dynamic[variant].watts(points)
        except KeyError:
            raise PowerModelError(f"no dynamic law for {variant.value}") from None

    def modeled_exec_ms(self, variant: Variant, points: int) -> float:
        law = self.exec_time.get(variant)
        return law.ms(points) if law else 0.0

    @classmethod
    def from_dict(cls, doc: dict) -> "PowerModel":
        schema = json.loads(resources.files("socorch").joinpath("data", "schemas", "power.schema.json").read_text())
        try:
            jsonschema.validate(doc, schema)
        except jsonschema.ValidationError as exc:
            raise PowerModelError(f"invalid power model: {exc.message}") from None
        return cls(
            static_w={k: float(v) for k, v in doc["domains"].items()},
            dynamic={Variant(k): DynamicLaw(**v) for k, v in doc["dynamic"].items()},
            exec_time={Variant(k): ExecTimeLaw(**v) for k, v in doc.get("exec_time", {}).items()},
        )

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PowerModel":
        if path is None:
            text = resources.files("socorch").joinpath("data", "power.json").read_text()
        else:
            text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PowerModelError(f"power model is not valid JSON: {exc}") from None
        return cls.from_dict(doc)


@dataclass(frozen=True)
class RunContext:
    """Metadata about the most recent workload run, carried into samples."""

    exec_time_ms: float = 0.0
    mse: float | None = None
    faces: int | None = None
    config: tuple[str, int] | None = None  # (variant, points)
    reconfig_ms: float = 0.0
    source: str = "event"


@dataclass(frozen=True)
class TelemetrySample:
    ts_ms: float
    rails: dict[str, float]
    total_w: float
    exec_time_ms: float
    mse: float | None
    faces: int | None
    config: dict | None
    reconfig_ms: float
    source: str = "event"

    def to_dict(self) -> dict:
        return {
            "ts_ms": self.ts_ms,
            "rails": {k: self.rails[k] for k in sorted(self.rails)},
            "total_w": self.total_w,
            "exec_time_ms": self.exec_time_ms,
            "mse": self.mse,
            "faces": self.faces,
            "config": self.config,
            "reconfig_ms": self.reconfig_ms,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TelemetrySample":
        missing = [k for k in ("ts_ms", "rails", "total_w", "exec_time_ms", "reconfig_ms") if k not in d]
        if missing:
            raise KeyError(f"missing field(s): {', '.join(missing)}")
        if not isinstance(d["rails"], dict):
            raise TypeError("rails must be an object")
        return cls(
            ts_ms=d["ts_ms"],
            rails=dict(d["rails"]),
            total_w=d["total_w"],
            exec_time_ms=d["exec_time_ms"],
            mse=d.get("mse"),
            faces=d.get("faces"),
            config=d.get("config"),
            reconfig_ms=d["reconfig_ms"],
            source=d.get("source", "event"),
        )


def encode_sample(s: TelemetrySample) -> bytes:
    return (json.dumps(s.to_dict(), separators=(",", ":"), allow_nan=False) + "\n").encode()


def decode_sample(line: bytes | str) -> TelemetrySample:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    return TelemetrySample.from_dict(json.loads(line))


def sample(fabric: FabricState, model: PowerModel, context: RunContext | None = None) -> TelemetrySample:
    """Instantaneous power of every domain plus the last-run metadata.

    A rail is the domain's static power plus the dynamic power of each Active
    instance placed on it; Gated and Loading instances draw no dynamic power.
    """
    context = context or RunContext()
    rails: dict[str, float] = {}
    for did in sorted(fabric.domains):
        if did not in model.static_w:
            raise PowerModelError(f"power model has no entry for domain {did!r}")
        terms = [model.static_w[did]]
        for inst in sorted(fabric.hosted(did), key=lambda i: i.id):
            if inst.lifecycle is Lifecycle.ACTIVE:
                terms.append(model.dynamic_w(inst.variant, inst.points))
        rails[did] = math.fsum(terms)
    config = None
    if context.config is not None:
        config = {"variant": context.config[0], "points": context.config[1]}
    return TelemetrySample(
        ts_ms=fabric.sim_time_ms,
        rails=rails,
        total_w=math.fsum(rails.values()),
        exec_time_ms=context.exec_time_ms,
        mse=context.mse,
        faces=context.faces,
        config=config,
        reconfig_ms=context.reconfig_ms,
        source=context.source,
    )


class TelemetryLog:
    """Append-only JSON-lines sink, flushed after every sample."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "ab")

    def record(self, s: TelemetrySample) -> None:
        self._fh.write(encode_sample(s))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def record(s: TelemetrySample, sink) -> None:
    """Append one sample to ``sink`` (a TelemetryLog or binary file object)."""
    if isinstance(sink, TelemetryLog):
        sink.record(s)
    else:
        sink.write(encode_sample(s))
        sink.flush()


class TelemetryPublisher:
    """Pushes samples to a host collector over TCP.

    While the peer is unreachable samples wait in a bounded buffer; once it is
    full the oldest are discarded and counted in ``dropped``.
    """

    def __init__(self, host: str, port: int, maxlen: int = 1024, timeout: float = 1.0):
        self.host, self.port = host, port
        self.timeout = timeout
        self.buffer: deque[bytes] = deque()
        self.maxlen = maxlen
        self.dropped = 0
        self.sent = 0
        self._sock: socket.socket | None = None

    def _connect(self) -> bool:
        if self._sock is not None:
            return True
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError:
            self._sock = None
            return False
        return True

    def publish(self, s: TelemetrySample) -> None:
        # drain any backlog first so a returning peer gets it before eviction
        reachable = self.flush()
        if len(self.buffer) >= self.maxlen:
            self.buffer.popleft()
            self.dropped += 1
        self.buffer.append(encode_sample(s))
        if reachable:
            self.flush()

    def flush(self) -> bool:
        """Send buffered samples; False if the peer could not be reached."""
        while self.buffer:
            if not self._connect():
                return False
            try:
                self._sock.sendall(self.buffer[0])
            except OSError:
                self._disconnect()
                return False
            self.buffer.popleft()
            self.sent += 1
        return True

    def _disconnect(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self) -> None:
        self.flush()
        if self.dropped:
            log.warning("telemetry publisher dropped %d samples", self.dropped)
        self._disconnect()


def publish(s: TelemetrySample, connection: TelemetryPublisher) -> None:
    connection.publish(s)


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


def _edge_values(ts: list[float], ws: list[float], t: float) -> tuple[float, float]:
    """Value just before and just after ``t`` for a series that may step."""
    at = [i for i, x in enumerate(ts) if x == t]
    if at:
        return ws[at[0]], ws[at[-1]]
    if t <= ts[0]:
        return ws[0], ws[0]
    if t >= ts[-1]:
        return ws[-1], ws[-1]
    j = next(i for i, x in enumerate(ts) if x > t)
    frac = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
    v = ws[j - 1] + frac * (ws[j] - ws[j - 1])
    return v, v


def energy_j(ts: list[float], ws: list[float], start: float | None = None, end: float | None = None) -> float:
    """Trapezoidal energy in joules for watts sampled at ``ts`` milliseconds.

    Repeated timestamps encode a step. Window bounds are interpolated, so
    energy over [a, b] plus [b, c] equals energy over [a, c].
    """
    if not ts:
        return 0.0
    a = ts[0] if start is None else max(start, ts[0])
    b = ts[-1] if end is None else min(end, ts[-1])
    if b <= a:
        return 0.0
    pts = [(a, _edge_values(ts, ws, a)[1])]
    pts += [(t, w) for t, w in zip(ts, ws) if a < t < b]
    pts.append((b, _edge_values(ts, ws, b)[0]))
    total = 0.0
    for (t0, w0), (t1, w1) in zip(pts, pts[1:]):
        total += 0.5 * (w0 + w1) * (t1 - t0)
    return total / 1000.0


@dataclass
class Report:
    samples: list[TelemetrySample]
    skipped: int
    rail_stats: dict[str, dict[str, float]]
    rail_energy_j: dict[str, float]
    total_energy_j: float
    mse_stats: dict[str, float] | None
    reconfigurations: int
    duration_ms: float

    def summary(self) -> str:
        lines = [
            f"samples: {len(self.samples)} (skipped {self.skipped} corrupt lines)",
            f"duration: {self.duration_ms:.3f} ms",
            f"reconfigurations: {self.reconfigurations}",
            f"total energy: {self.total_energy_j:.6f} J",
            "rails (W):",
        ]
        for rail, st in self.rail_stats.items():
            lines.append(
                f"  {rail:<8} min {st['min']:.4f}  mean {st['mean']:.4f}  max {st['max']:.4f}"
                f"  energy {self.rail_energy_j[rail]:.6f} J"
            )
        if self.mse_stats:
            m = self.mse_stats
            lines.append(
                f"mse: n={int(m['count'])} min {m['min']:.3e} median {m['median']:.3e}"
                f" mean {m['mean']:.3e} max {m['max']:.3e}"
            )
        else:
            lines.append("mse: none (no accelerated runs)")
        return "\n".join(lines)


def read_log(path: str | Path) -> tuple[list[TelemetrySample], int]:
    samples, skipped = [], 0
    with open(path, "rb") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            try:
                samples.append(decode_sample(raw))
            except (ValueError, KeyError, TypeError, UnicodeDecodeError):
                skipped += 1
    return samples, skipped


def report(log_path: str | Path, svg_dir: str | Path | None = None) -> Report:
    samples, skipped = read_log(log_path)
    if not samples:
        raise EmptyReportError(f"no telemetry samples in {log_path}")
    samples.sort(key=lambda s: s.ts_ms)  # stable: keeps step order at equal ts
    ts = [float(s.ts_ms) for s in samples]

    rail_names = sorted({r for s in samples for r in s.rails})
    rail_stats, rail_energy = {}, {}
    for r in rail_names:
        pts = [(float(s.ts_ms), float(s.rails[r])) for s in samples if r in s.rails]
        vals = [w for _, w in pts]
        rail_stats[r] = {"min": min(vals), "mean": statistics.fmean(vals), "max": max(vals)}
        rail_energy[r] = energy_j([t for t, _ in pts], vals)

    mses = [float(s.mse) for s in samples if s.mse is not None]
    mse_stats = None
    if mses:
        mse_stats = {
            "count": len(mses),
            "min": min(mses),
            "median": statistics.median(mses),
            "mean": statistics.fmean(mses),
            "max": max(mses),
        }
    rep = Report(
        samples=samples,
        skipped=skipped,
        rail_stats=rail_stats,
        rail_energy_j=rail_energy,
        total_energy_j=energy_j(ts, [float(s.total_w) for s in samples]),
        mse_stats=mse_stats,
        reconfigurations=sum(1 for s in samples if s.reconfig_ms and s.reconfig_ms > 0),
        duration_ms=ts[-1] - ts[0],
    )
    if svg_dir is not None:
        write_charts(rep, svg_dir)
    return rep


def write_charts(rep: Report, out_dir: str | Path) -> list[Path]:
    # Figure objects directly, so the caller's pyplot backend is left alone
    import matplotlib
    from matplotlib.figure import Figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ts = [s.ts_ms for s in rep.samples]
    written = []
    with matplotlib.rc_context({"svg.hashsalt": "socorch"}):
        for key, ylabel in (("total_w", "total power (W)"), ("exec_time_ms", "FFT exec time (ms)")):
            fig = Figure(figsize=(8, 3))
            ax = fig.subplots()
            ax.step(ts, [getattr(s, key) for s in rep.samples], where="post")
            ax.set_xlabel("time (ms)")
            ax.set_ylabel(ylabel)
            ax.grid(True, alpha=0.3)
            fig.tight_layout()
            path = out / f"{key}.svg"
            # no date stamp, so identical logs give identical files
            fig.savefig(path, format="svg", metadata={"Date": None})
            written.append(path)
    return written
