"""Command line entry points.

    socorch orchd          orchestration daemon
    socorch edge-emu       replay a face-count trace to the daemon
    socorch telem-report   summarize a telemetry log, optionally with SVG charts
    socorch telem-collect  host-side receiver for published telemetry
    socorch fft-bench      float vs fixed-point FFT sweep as CSV

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import queue
import signal
import socket
import statistics
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import fabric as fab
from . import policy as pol
from . import telemetry as tel
from . import wire
from . import workloads as wl
from .orchestrator import Orchestrator, SimulatedClock, WallClock

log = logging.getLogger("socorch")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

ENV_EVENT = "SOCORCH_EVENT_ENDPOINT"
ENV_TELEMETRY = "SOCORCH_TELEMETRY_ENDPOINT"


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    fabric_path: Path | None = None
    policy_path: Path | None = None
    power_path: Path | None = None
    realtime: bool = False
    event_endpoint: tuple[str, int] = ("127.0.0.1", wire.DEFAULT_EVENT_PORT)
    telemetry_endpoint: tuple[str, int] | None = None
    log_path: Path = Path("telemetry.jsonl")
    sample_period_ms: float = 100.0
    signal_seed: int = 0
    fixed_format: str = "Q1.15"
    exit_after_disconnect: bool = False
    queue_size: int = 4096

    def validate(self) -> None:
        for p in (self.fabric_path, self.policy_path, self.power_path):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"config file not found: {p}")
        if self.sample_period_ms < 0:
            raise ConfigError("sample period must be >= 0")


class TelemetryWorker:
    """Background consumer so slow sinks never stall the control loop."""

    def __init__(self, sinks, maxsize: int = 4096):
        self.sinks = list(sinks)
        self.q: queue.Queue = queue.Queue(maxsize=maxsize)
        self.dropped = 0
        self.errors = 0
        self._thread = threading.Thread(target=self._run, name="telemetry", daemon=True)
        self._thread.start()

    def put(self, s: tel.TelemetrySample) -> None:
        try:
            self.q.put_nowait(s)
        except queue.Full:
            self.dropped += 1

    def _run(self) -> None:
        while True:
            s = self.q.get()
            if s is None:
                return
            for sink in self.sinks:
                try:
                    sink(s)
                except OSError as exc:
                    self.errors += 1
                    log.error("telemetry sink failed: %s", exc)

    def close(self) -> None:
        self.q.put(None)
        self._thread.join()


@dataclass
class DaemonResult:
    events: int
    superseded: int
    decode_errors: dict
    telemetry_dropped: int


def build_orchestrator(cfg: RunConfig, sinks) -> Orchestrator:
    try:
        fabric = fab.load_fabric(cfg.fabric_path)
        policy = pol.load_policy_file(cfg.policy_path)
        power = tel.PowerModel.load(cfg.power_path)
        fmt = wl.FixedPointFormat.parse(cfg.fixed_format)
        missing = sorted(set(fabric.domains) - set(power.static_w))
        if missing:
            raise ConfigError(f"power model lacks domains: {', '.join(missing)}")
    except (fab.FabricError, pol.PolicyError, tel.PowerModelError, ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    return Orchestrator(
        fabric,
        policy,
        power,
        sample_period_ms=cfg.sample_period_ms,
        fmt=fmt,
        signal_seed=cfg.signal_seed,
        sinks=sinks,
        clock=WallClock() if cfg.realtime else SimulatedClock(),
    )


def run_daemon(cfg: RunConfig, stop: threading.Event | None = None, on_ready=None) -> DaemonResult:
    """Run the orchestration daemon until ``stop`` is set.

    ``on_ready`` receives the bound event port once the server listens.
    Raises ConfigError for bad configuration.
    """
    cfg.validate()
    stop = stop or threading.Event()
    orch = build_orchestrator(cfg, [])
    events: queue.Queue = queue.Queue()
    srv = wire.EventServer(*cfg.event_endpoint, handler=events.put)

    tlog = tel.TelemetryLog(cfg.log_path)
    publisher = None
    sinks = [tlog.record]
    if cfg.telemetry_endpoint is not None:
        publisher = tel.TelemetryPublisher(*cfg.telemetry_endpoint)
        sinks.append(publisher.publish)
    worker = TelemetryWorker(sinks, cfg.queue_size)
    orch.sinks.append(worker.put)

    server_thread = threading.Thread(target=srv.serve_forever, name="event-server", daemon=True)
    server_thread.start()
    sampler = None
    if cfg.realtime and cfg.sample_period_ms > 0:
        def _sample_loop():
            while not stop.wait(cfg.sample_period_ms / 1000.0):
                worker.put(orch.sample_now())
        sampler = threading.Thread(target=_sample_loop, name="sampler", daemon=True)
        sampler.start()
    log.info("orchd listening for events on %s:%d", *srv.address)
    if on_ready:
        on_ready(srv.port)

    processed = 0

    def _handle(batch):
        nonlocal processed
        if cfg.realtime and len(batch) > 1:
            # newest event wins when several queued up during a reconfiguration
            orch.superseded += len(batch) - 1
            batch = batch[-1:]
        for ev in batch:
            orch.submit(ev)
        processed += len(batch)

    try:
        while not stop.is_set():
            try:
                batch = [events.get(timeout=0.05)]
            except queue.Empty:
                if cfg.exit_after_disconnect and srv.connections and srv.idle.is_set() and events.empty():
                    break
                continue
            while True:
                try:
                    batch.append(events.get_nowait())
                except queue.Empty:
                    break
            _handle(batch)
    finally:
        stop.set()
        srv.shutdown()
        server_thread.join(timeout=2.0)
        leftover = []
        while True:
            try:
                leftover.append(events.get_nowait())
            except queue.Empty:
                break
        if leftover:
            _handle(leftover)
        orch.drain()
        worker.close()
        tlog.close()
        if publisher is not None:
            publisher.close()
    return DaemonResult(processed, orch.superseded, dict(srv.errors), worker.dropped + (publisher.dropped if publisher else 0))


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    return RunConfig(
        fabric_path=args.fabric,
        policy_path=args.policy,
        power_path=args.power,
        realtime=args.realtime,
        event_endpoint=wire.parse_endpoint(args.events, wire.DEFAULT_EVENT_PORT),
        telemetry_endpoint=(
            wire.parse_endpoint(args.telemetry, wire.DEFAULT_TELEMETRY_PORT) if args.telemetry else None
        ),
        log_path=args.log,
        sample_period_ms=args.period,
        signal_seed=args.seed,
        fixed_format=args.format,
        exit_after_disconnect=args.once,
    )


def _cmd_orchd(args) -> int:
    try:
        cfg = _run_config(args)
    except ValueError as exc:
        print(f"orchd: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())

    def ready(port):
        print(f"orchd: listening on {cfg.event_endpoint[0]}:{port}", flush=True)

    try:
        res = run_daemon(cfg, stop, on_ready=ready)
    except ConfigError as exc:
        print(f"orchd: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"orchd: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(
        f"orchd: processed {res.events} events, {res.superseded} superseded, "
        f"decode errors {res.decode_errors or 0}, telemetry dropped {res.telemetry_dropped}",
        flush=True,
    )
    return EXIT_OK


def _cmd_edge_emu(args) -> int:
    try:
        trace = wire.load_trace(args.trace)
    except (OSError, wire.TraceError) as exc:
        print(f"edge-emu: bad trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        speed = float(args.speed)
        endpoint = wire.parse_endpoint(args.events, wire.DEFAULT_EVENT_PORT)
    except ValueError as exc:
        print(f"edge-emu: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not speed > 0:
        print("edge-emu: speed must be > 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        n = wire.replay(trace, endpoint, speed, attempts=args.attempts, backoff_s=args.backoff)
    except wire.ReplayError as exc:
        print(f"edge-emu: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"edge-emu: sent {n} events to {endpoint[0]}:{endpoint[1]}")
    return EXIT_OK


def _cmd_telem_report(args) -> int:
    try:
        rep = tel.report(args.log, svg_dir=args.svg)
    except tel.EmptyReportError as exc:
        print(f"telem-report: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"telem-report: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(rep.summary())
    if args.svg:
        print(f"charts written to {args.svg}")
    return EXIT_OK


def collect(endpoint: tuple[str, int], out_path: Path, stop: threading.Event, on_ready=None) -> int:
    """Receive published telemetry lines and append the valid ones to a log."""
    n = 0
    with socket.create_server(endpoint) as srv, open(out_path, "ab") as out:
        srv.settimeout(0.1)
        if on_ready:
            on_ready(srv.getsockname()[1])
        while not stop.is_set():
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                continue
            with conn, conn.makefile("rb") as fh:
                for line in fh:
                    try:
                        wire.decode_telemetry(line)
                    except wire.WireError:
                        continue
                    out.write(line if line.endswith(b"\n") else line + b"\n")
                    out.flush()
                    n += 1
    return n


def _cmd_telem_collect(args) -> int:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    endpoint = wire.parse_endpoint(args.listen, wire.DEFAULT_TELEMETRY_PORT)
    try:
        n = collect(endpoint, args.out, stop, on_ready=lambda p: print(f"telem-collect: listening on {p}", flush=True))
    except OSError as exc:
        print(f"telem-collect: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"telem-collect: stored {n} samples in {args.out}")
    return EXIT_OK


def fft_bench(sizes, formats, seeds, out=sys.stdout, repeats: int = 3) -> list[dict]:
    """Float vs fixed-point sweep; one row per (n, variant).

    ``mse_vs_float`` and ``wall_time`` are medians over ``seeds``; the MSE is
    deterministic for fixed seeds.
    """
    for n in sizes:
        wl.check_points(n)
    fmts = [f if isinstance(f, wl.FixedPointFormat) else wl.FixedPointFormat.parse(f) for f in formats]
    rows = []
    writer = csv.DictWriter(out, fieldnames=["n", "variant", "wall_time", "mse_vs_float"], lineterminator="\n")
    writer.writeheader()
    for n in sizes:
        signals = [wl.generate_signal(wl.SignalKind.SEEDED_UNIFORM, n, seed=s) for s in seeds]
        refs = [wl.fft_float(x) for x in signals]
        variants = [("float", wl.fft_float)] + [
            (f"fixed-{f.name}", (lambda fmt: lambda x: wl.fft_fixed(x, fmt))(f)) for f in fmts
        ]
        for name, fn in variants:
            times, errs = [], []
            for x, ref in zip(signals, refs):
                best = math.inf
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    y = fn(x)
                    best = min(best, time.perf_counter() - t0)
                times.append(best)
                errs.append(wl.mse(y, ref))
            row = {"n": n, "variant": name, "wall_time": statistics.median(times),
                   "mse_vs_float": statistics.median(errs)}
            writer.writerow(row)
            rows.append(row)
    return rows


def _cmd_fft_bench(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
        for n in sizes:
            wl.check_points(n)
        formats = [wl.FixedPointFormat.parse(f) for f in args.formats.split(",") if f]
        seeds = list(range(args.seeds))
    except ValueError as exc:
        print(f"fft-bench: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fft_bench(sizes, formats, seeds, repeats=args.repeats)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, not runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="socorch",
        description="FFT migration/scaling orchestrator for an emulated FPGA SoC.",
        epilog="exit codes: 0 success, 1 configuration error, 2 runtime failure",
    )
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("orchd", help="run the orchestration daemon",
                       epilog="exit codes: 0 success, 1 configuration error, 2 runtime failure")
    o.add_argument("--fabric", type=Path, help="fabric config JSON (default: bundled)")
    o.add_argument("--policy", type=Path, help="policy table JSON (default: bundled)")
    o.add_argument("--power", type=Path, help="power model JSON (default: bundled)")
    o.add_argument("--realtime", action="store_true", help="wall-clock mode; latencies become sleeps")
    o.add_argument("--events", default=None, help=f"event listen endpoint host:port (env {ENV_EVENT})")
    o.add_argument("--telemetry", default=None,
                   help=f"publish telemetry to host:port (env {ENV_TELEMETRY})")
    o.add_argument("--log", type=Path, default=Path("telemetry.jsonl"), help="telemetry log path")
    o.add_argument("--period", type=float, default=100.0, help="sampling period in ms (0 disables)")
    o.add_argument("--seed", type=int, default=0, help="base seed of the workload signal")
    o.add_argument("--format", default="Q1.15", help="fixed-point format of the accelerated FFT")
    o.add_argument("--once", action="store_true", help="exit after the first edge node disconnects")
    o.set_defaults(func=_cmd_orchd)

    e = sub.add_parser("edge-emu", help="replay a face-count trace")
    e.add_argument("trace", type=Path, help="CSV with header offset_ms,faces")
    e.add_argument("--events", default=None, help=f"daemon endpoint host:port (env {ENV_EVENT})")
    e.add_argument("--speed", default="1", help="playback speed multiplier, or 'inf' for no pacing")
    e.add_argument("--attempts", type=int, default=5)
    e.add_argument("--backoff", type=float, default=0.2, help="initial retry backoff in seconds")
    e.set_defaults(func=_cmd_edge_emu)

    r = sub.add_parser("telem-report", help="summarize a telemetry log")
    r.add_argument("log", type=Path)
    r.add_argument("--svg", type=Path, help="directory for SVG charts")
    r.set_defaults(func=_cmd_telem_report)

    c = sub.add_parser("telem-collect", help="receive published telemetry into a log")
    c.add_argument("--listen", default=None, help=f"listen endpoint host:port (env {ENV_TELEMETRY})")
    c.add_argument("--out", type=Path, default=Path("collected.jsonl"))
    c.set_defaults(func=_cmd_telem_collect)

    b = sub.add_parser("fft-bench", help="float vs fixed-point FFT sweep (CSV on stdout)")
    b.add_argument("--sizes", default="8,1024,2048,4096")
    b.add_argument("--formats", default="Q1.15,Q1.7")
    b.add_argument("--seeds", type=int, default=5, help="number of seeds (0..k-1)")
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=_cmd_fft_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "events", "unset") is None:
        args.events = os.environ.get(ENV_EVENT, f"127.0.0.1:{wire.DEFAULT_EVENT_PORT}")
    if args.command == "orchd" and args.telemetry is None:
        args.telemetry = os.environ.get(ENV_TELEMETRY)
    if args.command == "telem-collect" and args.listen is None:
        args.listen = os.environ.get(ENV_TELEMETRY, f"127.0.0.1:{wire.DEFAULT_TELEMETRY_PORT}")
    try:
        return args.func(args)
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
