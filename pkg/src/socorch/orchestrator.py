"""Event-driven control loop that owns the fabric.

Per event: decide a target, plan and apply the actions, run the active FFT
variant on a fresh signal (plus the float reference when accelerated) and
emit a telemetry sample. Events that arrive while a reconfiguration is in
flight are coalesced; only the newest is applied once the fabric is free.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable

from . import fabric as fab
from . import policy as pol
from . import workloads as wl
from .fabric import DomainKind, FabricState, Variant
from .telemetry import PowerModel, RunContext, TelemetrySample, sample
from .wire import EventMsg

log = logging.getLogger(__name__)

Sink = Callable[[TelemetrySample], None]


class SimulatedClock:
    """Time comes from event timestamps; latencies cost no wall time."""

    realtime = False

    def now_ms(self) -> float | None:
        return None

    def sleep_until(self, t_ms: float) -> None:
        pass


class WallClock:
    realtime = True

    def __init__(self):
        self._t0 = time.monotonic()

    def now_ms(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def sleep_until(self, t_ms: float) -> None:
        delay = (t_ms - self.now_ms()) / 1000.0
        if delay > 0:
            time.sleep(delay)


@dataclass
class AppliedEvent:
    seq: int
    faces: int
    t_ms: float
    target: pol.TargetConfig
    actions: list
    reconfig_ms: float


class Orchestrator:
    def __init__(
        self,
        fabric: FabricState,
        policy: pol.PolicyTable,
        power: PowerModel,
        *,
        fn_id: str = "fft0",
        kind: str = "fft",
        initial_points: int = 8,
        sample_period_ms: float = 100.0,
        fmt: wl.FixedPointFormat = wl.Q15,
        signal_seed: int = 0,
        sinks: Iterable[Sink] = (),
        clock=None,
    ):
        if fn_id not in fabric.instances:
            cores = fabric.domains_of(DomainKind.SOFTWARE_CORE)
            if not cores:
                raise fab.FabricConfigError("fabric needs at least one SoftwareCore domain")
            fabric = fab.deploy(fabric, fn_id, kind, cores[0].id, initial_points)
        self.fabric = fabric
        self.policy = policy
        self.power = power
        self.fn_id = fn_id
        self.fmt = fmt
        self.signal_seed = signal_seed
        self.sample_period_ms = sample_period_ms
        self.sinks = list(sinks)
        self.clock = clock or SimulatedClock()

        inst = self.fabric.instance(fn_id)
        self.ctx = RunContext(config=(inst.variant.value, inst.points), source="event")
        self.pending: EventMsg | None = None
        self.busy_until = -math.inf
        self.superseded = 0
        self.sink_errors = 0
        self.history: list[AppliedEvent] = []
        self._next_tick = 0.0 if sample_period_ms > 0 else math.inf
        self._lock = threading.RLock()

    # -- event intake ---------------------------------------------------

    def submit(self, ev: EventMsg) -> None:
        """Feed one event. In simulated mode its ts_ms is the arrival time."""
        with self._lock:
            now = self.clock.now_ms()
            t = float(ev.ts_ms) if now is None else now
            self._release_pending(t)
            if t < self.busy_until:
                if self.pending is not None:
                    self.superseded += 1
                    log.info("event seq=%d superseded by seq=%d", self.pending.seq, ev.seq)
                self.pending = ev
                return
            self._apply(ev, max(t, self.fabric.sim_time_ms))

    def drain(self) -> None:
        """Apply any held event; call before shutdown."""
        with self._lock:
            self._release_pending(math.inf)

    def _release_pending(self, t: float) -> None:
        while self.pending is not None and self.busy_until <= t:
            ev, self.pending = self.pending, None
            self._apply(ev, max(self.busy_until, self.fabric.sim_time_ms))

    # -- core -----------------------------------------------------------

    def _apply(self, ev: EventMsg, t: float) -> None:
        if not self.clock.realtime:
            self._periodic_until(t)
        if t > self.fabric.sim_time_ms:
            self.fabric = fab.advance(self.fabric, t)
        target = pol.decide(self.policy, ev.faces)
        try:
            actions = pol.plan(self.fabric, self.fn_id, target)
            new_fabric, reconfig = pol.apply_plan(self.fabric, actions)
        except (pol.PlanError, fab.FabricError) as exc:
            log.error("cannot reach %s for faces=%d: %s", target.short(), ev.faces, exc)
            actions, new_fabric, reconfig = [], self.fabric, 0.0
        self.fabric = new_fabric
        self.clock.sleep_until(self.fabric.sim_time_ms)
        self.busy_until = self.fabric.sim_time_ms
        if actions and self.policy.min_dwell_ms > 0:
            self.busy_until = max(self.busy_until, t + self.policy.min_dwell_ms)
        if actions:
            log.info("faces=%d -> %s via %s (%.3f ms)", ev.faces, target.short(), pol.describe(actions), reconfig)
        self.history.append(AppliedEvent(ev.seq, ev.faces, t, target, actions, reconfig))

        exec_ms, err = self._run_workload(ev.seq)
        inst = self.fabric.instance(self.fn_id)
        self.ctx = RunContext(
            exec_time_ms=exec_ms,
            mse=err,
            faces=ev.faces,
            config=(inst.variant.value, inst.points),
            reconfig_ms=reconfig,
            source="event",
        )
        self._emit(sample(self.fabric, self.power, self.ctx))

    def _run_workload(self, seq: int) -> tuple[float, float | None]:
        inst = self.fabric.instance(self.fn_id)
        x = wl.generate_signal(wl.SignalKind.SEEDED_UNIFORM, inst.points, seed=self.signal_seed + seq)
        xn, gain = wl.normalize(x, self.fmt)
        t0 = time.perf_counter()
        if inst.variant is Variant.ACCELERATED_FIXED:
            out = wl.fft_fixed(xn, self.fmt) * gain
        else:
            out = wl.fft_float(xn) * gain
        measured = (time.perf_counter() - t0) * 1000.0
        err = None
        if inst.variant is Variant.ACCELERATED_FIXED:
            err = wl.mse(out, wl.fft_float(xn) * gain)
        if self.clock.realtime:
            return measured, err
        return self.power.modeled_exec_ms(inst.variant, inst.points), err

    def _periodic_until(self, t: float) -> None:
        if self._next_tick < self.fabric.sim_time_ms:
            k = math.ceil(self.fabric.sim_time_ms / self.sample_period_ms)
            self._next_tick = k * self.sample_period_ms
        while self._next_tick <= t:
            self.fabric = fab.advance(self.fabric, self._next_tick)
            self._emit(sample(self.fabric, self.power, self._periodic_ctx()))
            self._next_tick += self.sample_period_ms

    def _periodic_ctx(self) -> RunContext:
        c = self.ctx
        return RunContext(c.exec_time_ms, c.mse, c.faces, c.config, 0.0, "periodic")

    def sample_now(self) -> TelemetrySample:
        """Periodic sample at the current clock, for realtime samplers."""
        with self._lock:
            snap = self.fabric
            now = self.clock.now_ms()
            if now is not None and now > snap.sim_time_ms:
                snap = fab.advance(snap, now)
            return sample(snap, self.power, self._periodic_ctx())

    def _emit(self, s: TelemetrySample) -> None:
        for sink in self.sinks:
            try:
                sink(s)
            except OSError as exc:
                self.sink_errors += 1
                log.error("telemetry sink failed: %s", exc)

    @property
    def config(self) -> pol.TargetConfig:
        return pol.current_config(self.fabric, self.fn_id)
