import csv
import io
import json
import os
import subprocess
import sys
import threading
import time
from importlib import resources

import pytest

from socorch import cli, telemetry as tel, wire

SOCORCH = [sys.executable, "-m", "socorch"]


def run(*args, **kw):
    return subprocess.run([*SOCORCH, *args], capture_output=True, text=True, timeout=60, **kw)


def test_fft_bench_rows_and_determinism():
    buf = io.StringIO()
    rows = cli.fft_bench([8, 1024], ["Q1.15", "Q1.7"], [0, 1, 2], out=buf, repeats=1)
    assert [(r["n"], r["variant"]) for r in rows] == [
        (8, "float"), (8, "fixed-Q1.15"), (8, "fixed-Q1.7"),
        (1024, "float"), (1024, "fixed-Q1.15"), (1024, "fixed-Q1.7"),
    ]
    parsed = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert list(parsed[0]) == ["n", "variant", "wall_time", "mse_vs_float"]
    by = {(r["n"], r["variant"]): r["mse_vs_float"] for r in rows}
    for n in (8, 1024):
        assert by[(n, "float")] == 0.0
        assert by[(n, "fixed-Q1.15")] < by[(n, "fixed-Q1.7")]
    again = cli.fft_bench([8, 1024], ["Q1.15", "Q1.7"], [0, 1, 2], out=io.StringIO(), repeats=1)
    assert [r["mse_vs_float"] for r in again] == [r["mse_vs_float"] for r in rows]


def test_fft_bench_cli():
    r = run("fft-bench", "--sizes", "8,16", "--seeds", "2", "--repeats", "1")
    assert r.returncode == 0, r.stderr
    lines = r.stdout.strip().splitlines()
    assert lines[0] == "n,variant,wall_time,mse_vs_float"
    assert len(lines) == 1 + 2 * 3


@pytest.mark.parametrize(
    "args",
    [
        ["fft-bench", "--sizes", "1000"],
        ["fft-bench", "--formats", "Q9"],
        ["orchd", "--fabric", "/nonexistent.json"],
        ["orchd", "--format", "Q3"],
        ["edge-emu", "/nonexistent.csv"],
        ["bogus-command"],
        ["fft-bench", "--seeds", "x"],
    ],
)
def test_config_errors_exit_1(args):
    assert run(*args).returncode == cli.EXIT_CONFIG


def test_bad_policy_file_exit_1(tmp_path):
    p = tmp_path / "pol.json"
    p.write_text('{"rules": [{"faces_min": 0, "faces_max": 0, "variant": "SoftwareFloat", "points": 8}]}')
    r = run("orchd", "--policy", str(p), "--events", "127.0.0.1:0", "--log", str(tmp_path / "t.jsonl"))
    assert r.returncode == cli.EXIT_CONFIG
    assert "configuration error" in r.stderr


def test_edge_emu_unreachable_exit_2(tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text("offset_ms,faces\n0,1\n")
    r = run("edge-emu", str(trace), "--events", "127.0.0.1:1", "--attempts", "2", "--backoff", "0.01")
    assert r.returncode == cli.EXIT_RUNTIME


def test_telem_report_empty_exit_2(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert run("telem-report", str(p)).returncode == cli.EXIT_RUNTIME
    assert run("telem-report", str(tmp_path / "missing.jsonl")).returncode == cli.EXIT_CONFIG


def _start_orchd(tmp_path, *extra, env=None):
    log = tmp_path / "telemetry.jsonl"
    proc = subprocess.Popen(
        [*SOCORCH, "orchd", "--events", "127.0.0.1:0", "--log", str(log), "--once", *extra],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env,
    )
    line = proc.stdout.readline()
    assert "listening on" in line, proc.stderr.read()
    port = int(line.rsplit(":", 1)[1])
    return proc, port, log


def test_orchd_and_edge_emu_end_to_end(tmp_path):
    proc, port, log = _start_orchd(tmp_path)
    trace = resources.files("socorch").joinpath("data", "demo_trace.csv")
    r = run("edge-emu", str(trace), "--events", f"127.0.0.1:{port}", "--speed", "inf")
    assert r.returncode == 0, r.stderr
    out, err = proc.communicate(timeout=30)
    assert proc.returncode == 0, err
    assert "processed 4 events" in out

    samples = tel.read_log(log)[0]
    events = [s for s in samples if s.source == "event"]
    configs = [(s.config["variant"], s.config["points"]) for s in events]
    assert configs == [
        ("SoftwareFloat", 8), ("SoftwareFloat", 1024), ("AcceleratedFixed", 2048), ("AcceleratedFixed", 4096),
    ]
    assert [s.reconfig_ms for s in events] == [0.0, 0.0, 10.0, 0.0]

    r = run("telem-report", str(log), "--svg", str(tmp_path / "svg"))
    assert r.returncode == 0, r.stderr
    assert "reconfigurations: 1" in r.stdout
    assert (tmp_path / "svg" / "total_w.svg").is_file()


def test_event_endpoint_from_env(tmp_path):
    env = dict(os.environ, SOCORCH_EVENT_ENDPOINT="127.0.0.1:0")
    log = tmp_path / "telemetry.jsonl"
    proc = subprocess.Popen(
        [*SOCORCH, "orchd", "--log", str(log), "--once"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env,
    )
    try:
        line = proc.stdout.readline()
        assert line.startswith("orchd: listening on 127.0.0.1:")
        port = int(line.rsplit(":", 1)[1])
        assert port != 0
        env["SOCORCH_EVENT_ENDPOINT"] = f"127.0.0.1:{port}"
        trace = tmp_path / "t.csv"
        trace.write_text("offset_ms,faces\n0,2\n")
        assert run("edge-emu", str(trace), "--speed", "inf", env=env).returncode == 0
        proc.communicate(timeout=30)
    finally:
        if proc.poll() is None:
            proc.kill()
    assert proc.returncode == 0


def test_run_daemon_publishes_to_collector(tmp_path):
    stop_collect = threading.Event()
    ready = threading.Event()
    port_box = {}
    out = tmp_path / "collected.jsonl"

    def on_ready(p):
        port_box["p"] = p
        ready.set()

    counted = {}
    th = threading.Thread(
        target=lambda: counted.setdefault("n", cli.collect(("127.0.0.1", 0), out, stop_collect, on_ready))
    )
    th.start()
    assert ready.wait(5)

    cfg = cli.RunConfig(
        event_endpoint=("127.0.0.1", 0),
        telemetry_endpoint=("127.0.0.1", port_box["p"]),
        log_path=tmp_path / "t.jsonl",
        exit_after_disconnect=True,
        sample_period_ms=0,
    )
    ev_port = {}
    daemon_ready = threading.Event()

    def on_daemon(p):
        ev_port["p"] = p
        daemon_ready.set()

    result = {}
    dt = threading.Thread(target=lambda: result.setdefault("r", cli.run_daemon(cfg, on_ready=on_daemon)))
    dt.start()
    assert daemon_ready.wait(5)
    wire.replay(wire.EventTrace(((0, 0), (100, 2), (200, 1))), ("127.0.0.1", ev_port["p"]))
    dt.join(30)
    assert result["r"].events == 3
    # collector keeps the connection until the publisher closes
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline and len(out.read_bytes().splitlines()) < 3:
        time.sleep(0.02)
    stop_collect.set()
    th.join(5)
    assert counted["n"] == 3
    logged = (tmp_path / "t.jsonl").read_bytes()
    assert out.read_bytes() == logged
    assert [json.loads(l)["faces"] for l in logged.splitlines()] == [0, 2, 1]


def test_run_daemon_config_error_leaves_no_log(tmp_path):
    cfg = cli.RunConfig(fabric_path=tmp_path / "nope.json", log_path=tmp_path / "t.jsonl")
    with pytest.raises(cli.ConfigError):
        cli.run_daemon(cfg)
    assert not (tmp_path / "t.jsonl").exists()


def test_run_daemon_power_mismatch(tmp_path):
    p = tmp_path / "power.json"
    p.write_text(json.dumps({"domains": {"apu": 1.0}, "dynamic": {}}))
    cfg = cli.RunConfig(power_path=p, log_path=tmp_path / "t.jsonl", event_endpoint=("127.0.0.1", 0))
    with pytest.raises(cli.ConfigError, match="pl0"):
        cli.run_daemon(cfg)


def test_help_mentions_exit_codes():
    r = run("--help")
    assert r.returncode == 0
    assert "exit codes" in r.stdout


def test_run_daemon_realtime(tmp_path):
    cfg = cli.RunConfig(
        event_endpoint=("127.0.0.1", 0), log_path=tmp_path / "rt.jsonl", realtime=True,
        exit_after_disconnect=True, sample_period_ms=20,
    )
    ready = threading.Event()
    box = {}

    def on_ready(p):
        box["port"] = p
        ready.set()

    th = threading.Thread(target=lambda: box.setdefault("r", cli.run_daemon(cfg, on_ready=on_ready)))
    th.start()
    assert ready.wait(5)
    time.sleep(0.1)  # let a few periodic samples through
    trace = wire.EventTrace(((0, 0), (10, 1), (20, 2), (30, 3)))
    wire.replay(trace, ("127.0.0.1", box["port"]), speed=1.0)
    th.join(30)
    res = box["r"]
    assert res.events + res.superseded == 4
    samples, skipped = tel.read_log(tmp_path / "rt.jsonl")
    assert skipped == 0
    assert any(s.source == "periodic" for s in samples)
    last = [s for s in samples if s.source == "event"][-1]
    assert last.config == {"variant": "AcceleratedFixed", "points": 4096}
    assert last.exec_time_ms > 0
