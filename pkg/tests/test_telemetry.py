import json
import math
import random
import socket
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from socorch import fabric as fab
from socorch import telemetry as tel
from socorch.fabric import Variant
from socorch.telemetry import DynamicLaw, PowerModel, RunContext, TelemetrySample

from conftest import make_fabric
from gen import random_fabric


@pytest.fixture
def model():
    return PowerModel(
        static_w={"apu": 1.0, "pl0": 0.5},
        dynamic={Variant.SOFTWARE_FLOAT: DynamicLaw(0.3, 0.04), Variant.ACCELERATED_FIXED: DynamicLaw(0.2, 0.05)},
    )


def test_statics_only(model):
    s = tel.sample(make_fabric(), model)
    assert s.rails == {"apu": 1.0, "pl0": 0.5}
    assert s.total_w == 1.5


def test_active_accelerated_fft(model):
    f = fab.deploy(make_fabric(loaded=True), "fft0", "fft", "pl0", 4096)
    s = tel.sample(f, model)
    assert s.rails["pl0"] == pytest.approx(0.5 + 0.2 + 0.05 * 12, abs=1e-15)
    assert s.rails["pl0"] == pytest.approx(1.3)
    g = tel.sample(fab.gate(f, "fft0", True), model)
    assert g.rails["pl0"] == 0.5
    assert g.rails["apu"] == s.rails["apu"]


def test_loading_draws_no_dynamic(model):
    f = fab.deploy(make_fabric(), "fft0", "fft", "apu", 8)
    loading, _ = fab.migrate(f, "fft0", "pl0")
    s = tel.sample(loading, model)
    assert s.rails == {"apu": 1.0, "pl0": 0.5}


def test_missing_domain_rejected(model):
    f = make_fabric(realtime=True)
    with pytest.raises(tel.PowerModelError):
        tel.sample(f, model)


def test_sampling_has_no_side_effects(model):
    f = fab.deploy(make_fabric(loaded=True), "fft0", "fft", "pl0", 2048)
    snap = f.copy()
    tel.sample(f, model, RunContext(exec_time_ms=1.0))
    assert f == snap


def test_default_power_model_loads():
    m = PowerModel.load()
    assert set(m.static_w) == {"apu", "pl0"}
    assert m.dynamic_w(Variant.ACCELERATED_FIXED, 4096) == pytest.approx(0.2 + 0.05 * 12)
    assert m.modeled_exec_ms(Variant.SOFTWARE_FLOAT, 8) > 0


def test_power_model_validation(tmp_path):
    with pytest.raises(tel.PowerModelError):
        PowerModel.from_dict({"domains": {"a": -1}, "dynamic": {}})
    with pytest.raises(tel.PowerModelError):
        PowerModel.from_dict({"domains": {}, "dynamic": {"Gpu": {"base_w": 1, "slope_w": 0}}})
    p = tmp_path / "p.json"
    p.write_text("nope")
    with pytest.raises(tel.PowerModelError):
        PowerModel.load(p)


def _model_for(f, rng):
    return PowerModel(
        static_w={d: x.static_power_w for d, x in f.domains.items()},
        dynamic={v: DynamicLaw(rng.uniform(0, 1), rng.uniform(0, 0.2)) for v in Variant},
    )


@pytest.mark.parametrize("seed", range(50))
def test_conservation_and_gating_monotonicity(seed):
    rng = random.Random(seed)
    f = random_fabric(rng)
    m = _model_for(f, rng)
    s = tel.sample(f, m)
    assert s.total_w == math.fsum(s.rails.values())
    assert all(w >= 0 for w in s.rails.values())
    inst = f.instances["fft0"]
    if inst.lifecycle is fab.Lifecycle.ACTIVE:
        g = tel.sample(fab.gate(f, "fft0", True), m)
        for d in s.rails:
            assert g.rails[d] <= s.rails[d]
        dyn = m.dynamic_w(inst.variant, inst.points)
        assert s.rails[inst.placement] - g.rails[inst.placement] == pytest.approx(dyn, rel=1e-12, abs=1e-12)
        if dyn > 0:
            assert g.rails[inst.placement] < s.rails[inst.placement]


# -- log + codec ----------------------------------------------------------


def _sample(ts, w, **kw):
    return TelemetrySample(
        ts_ms=ts, rails={"pl0": w}, total_w=w, exec_time_ms=kw.get("exec", 0.1), mse=kw.get("mse"),
        faces=kw.get("faces"), config=None, reconfig_ms=kw.get("reconfig", 0.0),
    )


def test_record_appends_stable_json_lines(tmp_path, model):
    path = tmp_path / "t.jsonl"
    f = fab.deploy(make_fabric(loaded=True), "fft0", "fft", "pl0", 2048)
    s = tel.sample(f, model, RunContext(1.5, 1e-4, 2, ("AcceleratedFixed", 2048), 10.0))
    with tel.TelemetryLog(path) as log:
        log.record(s)
        log.record(s)
    lines = path.read_bytes().splitlines()
    assert len(lines) == 2 and lines[0] == lines[1]
    doc = json.loads(lines[0])
    assert list(doc) == ["ts_ms", "rails", "total_w", "exec_time_ms", "mse", "faces", "config", "reconfig_ms", "source"]
    assert tel.decode_sample(lines[0]) == s
    with open(path, "ab") as fh:
        tel.record(s, fh)
    assert len(path.read_bytes().splitlines()) == 3


def test_record_io_failure_surfaces(tmp_path):
    log = tel.TelemetryLog(tmp_path / "x.jsonl")
    log.close()
    with pytest.raises(ValueError):
        log.record(_sample(0, 1.0))


# -- report ---------------------------------------------------------------


def _write(path, samples, extra=()):
    with open(path, "wb") as fh:
        for s in samples:
            fh.write(tel.encode_sample(s))
        for line in extra:
            fh.write(line)


def test_report_constant_power(tmp_path):
    p = tmp_path / "c.jsonl"
    _write(p, [_sample(t, 1.5) for t in range(0, 1001, 100)])
    rep = tel.report(p)
    assert rep.total_energy_j == pytest.approx(1.5, abs=1e-12)
    assert rep.rail_stats["pl0"] == {"min": 1.5, "mean": 1.5, "max": 1.5}


def test_report_step_energy(tmp_path):
    # gate-off at t=500 drops pl0 from 1.3 to 0.5 W; repeated timestamp marks the step
    p = tmp_path / "s.jsonl"
    _write(p, [_sample(0, 1.3), _sample(250, 1.3), _sample(500, 1.3), _sample(500, 0.5), _sample(1000, 0.5)])
    rep = tel.report(p)
    assert rep.rail_energy_j["pl0"] == pytest.approx(0.65 + 0.25, abs=1e-12)


def test_report_skips_corrupt_lines(tmp_path):
    p = tmp_path / "k.jsonl"
    _write(p, [_sample(0, 1.0, mse=1e-3, reconfig=10.0), _sample(10, 1.0, mse=3e-3)],
           extra=[b"garbage\n", b'{"ts_ms": 1}\n', b"\xff\xfe\n", b"\n"])
    rep = tel.report(p)
    assert rep.skipped == 3
    assert rep.reconfigurations == 1
    assert rep.mse_stats["count"] == 2
    assert rep.mse_stats["median"] == pytest.approx(2e-3)
    assert "reconfigurations: 1" in rep.summary()


def test_report_empty(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_bytes(b"")
    with pytest.raises(tel.EmptyReportError):
        tel.report(p)
    p.write_bytes(b"not json\n")
    with pytest.raises(tel.EmptyReportError):
        tel.report(p)


def test_report_svg(tmp_path):
    p = tmp_path / "c.jsonl"
    _write(p, [_sample(t, 1.0 + t / 1000) for t in range(0, 501, 50)])
    tel.report(p, svg_dir=tmp_path / "svg")
    for name in ("total_w.svg", "exec_time_ms.svg"):
        text = (tmp_path / "svg" / name).read_text()
        assert text.lstrip().startswith("<?xml") and "<svg" in text
    tel.report(p, svg_dir=tmp_path / "again")
    for name in ("total_w.svg", "exec_time_ms.svg"):
        assert (tmp_path / "svg" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


@settings(max_examples=200, deadline=None)
@given(
    data=st.lists(
        st.tuples(st.floats(0, 100, allow_nan=False), st.floats(0, 10, allow_nan=False)), min_size=2, max_size=30
    ),
    cuts=st.tuples(st.floats(0, 1), st.floats(0, 1)),
)
def test_energy_additive(data, cuts):
    ts, ws = [], []
    t = 0.0
    for dt, w in data:
        t += dt
        ts.append(t)
        ws.append(w)
    lo, hi = ts[0], ts[-1]
    a = lo
    b = lo + (hi - lo) * min(cuts)
    c = lo + (hi - lo) * max(cuts)
    whole = tel.energy_j(ts, ws, a, c)
    parts = tel.energy_j(ts, ws, a, b) + tel.energy_j(ts, ws, b, c)
    assert abs(whole - parts) <= 1e-9 * max(1.0, abs(whole))


def test_energy_additive_at_step():
    ts = [0, 500, 500, 1000]
    ws = [1.3, 1.3, 0.5, 0.5]
    assert tel.energy_j(ts, ws, 0, 500) == pytest.approx(0.65)
    assert tel.energy_j(ts, ws, 500, 1000) == pytest.approx(0.25)


# -- publisher ------------------------------------------------------------


def test_publisher_delivers_lines():
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    got = []

    def accept():
        conn, _ = srv.accept()
        with conn, conn.makefile("rb") as fh:
            for line in fh:
                got.append(line)

    th = threading.Thread(target=accept)
    th.start()
    pub = tel.TelemetryPublisher("127.0.0.1", port)
    for i in range(5):
        tel.publish(_sample(i, 1.0), pub)
    pub.close()
    th.join(5)
    srv.close()
    assert [tel.decode_sample(l).ts_ms for l in got] == [0, 1, 2, 3, 4]
    assert pub.sent == 5 and pub.dropped == 0


def test_publisher_buffers_and_drops_oldest_when_peer_down():
    # find a port with nothing listening
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    pub = tel.TelemetryPublisher("127.0.0.1", port, maxlen=4, timeout=0.2)
    for i in range(10):
        pub.publish(_sample(i, 1.0))
    assert pub.dropped == 6
    assert [tel.decode_sample(b).ts_ms for b in pub.buffer] == [6, 7, 8, 9]

    # peer comes up: buffered samples go out on the next publish
    srv = socket.create_server(("127.0.0.1", port))
    got = []

    def accept():
        conn, _ = srv.accept()
        with conn, conn.makefile("rb") as fh:
            got.extend(fh)

    th = threading.Thread(target=accept)
    th.start()
    pub.publish(_sample(10, 1.0))
    pub.close()
    th.join(5)
    srv.close()
    assert [tel.decode_sample(l).ts_ms for l in got] == [6, 7, 8, 9, 10]
