"""Reconfiguration controller: face-count events to fabric actions.

``decide`` looks up the target configuration for an event, ``plan`` diffs the
fabric against it and ``apply_plan`` executes the resulting actions, charging
bitstream transfers on the simulated clock.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Union

import jsonschema

from . import fabric as fab
from .fabric import DomainKind, FabricState, Lifecycle, RegionState, Variant
from .workloads import is_valid_points


class PolicyError(ValueError):
    pass


class PolicyParseError(PolicyError):
    pass


class PolicyGapError(PolicyError):
    pass


class PolicyOverlapError(PolicyError):
    pass


class PolicyPointsError(PolicyError):
    pass


class PlanError(Exception):
    """No action sequence can reach the target on this fabric."""


@dataclass(frozen=True)
class TargetConfig:
    variant: Variant
    points: int

    def __post_init__(self):
        if not is_valid_points(self.points):
            raise PolicyPointsError(f"points must be a power of two in [8, 65536], got {self.points!r}")

    def short(self) -> str:
        tag = "SW" if self.variant is Variant.SOFTWARE_FLOAT else "PL"
        return f"({tag},{self.points})"


@dataclass(frozen=True)
class PolicyRule:
    faces_min: int
    faces_max: float  # int or math.inf
    target: TargetConfig

    def matches(self, faces: int) -> bool:
        return self.faces_min <= faces <= self.faces_max


@dataclass(frozen=True)
class PolicyTable:
    rules: tuple[PolicyRule, ...]
    min_dwell_ms: float = 0.0


def decide(table: PolicyTable, faces: int) -> TargetConfig:
    if faces < 0:
        raise ValueError(f"faces must be >= 0, got {faces}")
    for rule in table.rules:
        if rule.matches(faces):
            return rule.target
    # unreachable for tables built by load_policy
    raise PolicyGapError(f"no rule covers faces={faces}")


def _validate_coverage(rules: list[PolicyRule]) -> None:
    ordered = sorted(rules, key=lambda r: r.faces_min)
    expect = 0
    for rule in ordered:
        if rule.faces_min > expect:
            raise PolicyGapError(f"faces {expect}..{rule.faces_min - 1} not covered")
        if rule.faces_min < expect:
            raise PolicyOverlapError(f"rule starting at faces={rule.faces_min} overlaps its predecessor")
        if rule.faces_max == math.inf:
            expect = math.inf
            continue
        expect = rule.faces_max + 1
    if expect != math.inf:
        raise PolicyGapError(f"faces >= {expect} not covered")


def policy_from_dict(doc: dict) -> PolicyTable:
    schema = json.loads(resources.files("socorch").joinpath("data", "schemas", "policy.schema.json").read_text())
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise PolicyParseError(f"invalid policy: {exc.message}") from None
    rules = []
    for r in doc["rules"]:
        fmax = math.inf if r["faces_max"] == "inf" else r["faces_max"]
        if fmax < r["faces_min"]:
            raise PolicyParseError(f"faces_max {fmax} < faces_min {r['faces_min']}")
        target = TargetConfig(Variant(r["variant"]), r["points"])
        rules.append(PolicyRule(r["faces_min"], fmax, target))
    _validate_coverage(rules)
    rules.sort(key=lambda r: r.faces_min)
    return PolicyTable(tuple(rules), float(doc.get("min_dwell_ms", 0.0)))


def load_policy(text: str) -> PolicyTable:
    """Parse and validate a policy document (JSON text)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyParseError(f"policy is not valid JSON: {exc}") from None
    return policy_from_dict(doc)


def load_policy_file(path: str | Path | None = None) -> PolicyTable:
    if path is None:
        return load_policy(resources.files("socorch").joinpath("data", "policy.json").read_text())
    return load_policy(Path(path).read_text())


def default_policy() -> PolicyTable:
    return load_policy_file(None)


# --------------------------------------------------------------------------
# Planning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Place:
    bitstream: fab.BitstreamMeta
    region: str


@dataclass(frozen=True)
class Migrate:
    fn_id: str
    domain: str


@dataclass(frozen=True)
class Scale:
    fn_id: str
    points: int


@dataclass(frozen=True)
class Gate:
    fn_id: str
    gated: bool


Action = Union[Place, Migrate, Scale, Gate]
ActionPlan = list  # list[Action], ordered


def current_config(fabric: FabricState, fn_id: str) -> TargetConfig:
    inst = fabric.instance(fn_id)
    return TargetConfig(inst.variant, inst.points)


def _pick_accel_domain(fabric: FabricState, inst: fab.FunctionInstance, points: int) -> str:
    if inst.variant is Variant.ACCELERATED_FIXED:
        return inst.placement
    candidates = [
        d.id
        for d in fabric.domains_of(DomainKind.ACCELERATOR_REGION)
        if d.id in fabric.regions and fabric.regions[d.id].state is not RegionState.LOADING
    ]
    if not candidates:
        raise PlanError("no available AcceleratorRegion domain in the fabric")
    for did in candidates:
        if fabric.regions[did].holds(inst.kind, points):
            return did
    return candidates[0]


def plan(fabric: FabricState, fn_id: str, target: TargetConfig) -> ActionPlan:
    """Minimal ordered action list that brings ``fn_id`` to ``target``.

    Bitstream placement precedes migration, migration precedes scaling, and a
    move off an accelerator region is followed by gating the copy left there.
    """
    inst = fabric.instance(fn_id)
    if inst.lifecycle is Lifecycle.LOADING:
        raise fab.RegionBusyError(f"instance {fn_id!r} is loading")
    actions: ActionPlan = []

    if target.variant is Variant.SOFTWARE_FLOAT:
        if inst.variant is Variant.SOFTWARE_FLOAT:
            dest = inst.placement
        else:
            cores = fabric.domains_of(DomainKind.SOFTWARE_CORE)
            if not cores:
                raise PlanError("no SoftwareCore domain in the fabric")
            dest = cores[0].id
    else:
        dest = _pick_accel_domain(fabric, inst, target.points)
        region = fabric.region(dest)
        if region.state is RegionState.LOADING:
            raise fab.RegionBusyError(f"region {dest!r} is loading")
        bs = region.loaded_bitstream
        if not region.holds(inst.kind, target.points):
            try:
                bs = fabric.select_bitstream(inst.kind, target.points)
            except fab.NoBitstreamError as exc:
                raise PlanError(str(exc)) from None
            actions.append(Place(bs, dest))
        if dest != inst.placement and inst.points > bs.max_points:
            # shrink first so the function fits the region's bitstream
            actions.append(Scale(fn_id, target.points))

    if dest != inst.placement:
        actions.append(Migrate(fn_id, dest))
        if fabric.domain(inst.placement).kind is DomainKind.ACCELERATOR_REGION:
            actions.append(Gate(fab.residual_id(fn_id, inst.placement), True))
    elif inst.lifecycle is Lifecycle.GATED:
        actions.append(Gate(fn_id, False))

    if inst.points != target.points and Scale(fn_id, target.points) not in actions:
        actions.append(Scale(fn_id, target.points))
    return actions


def apply_plan(fabric: FabricState, actions: ActionPlan) -> tuple[FabricState, float]:
    """Execute actions in order; returns the new fabric and reconfig latency.

    Bitstream transfers are waited out on the simulated clock so later actions
    see a loaded region.
    """
    total = 0.0
    for act in actions:
        if isinstance(act, Place):
            fabric, lat = fab.place(fabric, act.bitstream, act.region)
        elif isinstance(act, Migrate):
            fabric, lat = fab.migrate(fabric, act.fn_id, act.domain)
        elif isinstance(act, Scale):
            fabric, lat = fab.scale(fabric, act.fn_id, act.points), 0.0
        elif isinstance(act, Gate):
            fabric, lat = fab.gate(fabric, act.fn_id, act.gated), 0.0
        else:
            raise TypeError(f"unknown action {act!r}")
        if lat > 0:
            fabric = fab.advance(fabric, fabric.sim_time_ms + lat)
            total += lat
    return fabric, total


def describe(actions: ActionPlan) -> str:
    parts = []
    for a in actions:
        if isinstance(a, Place):
            parts.append(f"Place({a.bitstream.function_kind}@{a.region})")
        elif isinstance(a, Migrate):
            parts.append(f"Migrate({a.domain})")
        elif isinstance(a, Scale):
            parts.append(f"Scale({a.points})")
        else:
            parts.append(f"Gate({a.fn_id},{a.gated})")
    return "[" + ", ".join(parts) + "]"
