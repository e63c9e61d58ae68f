"""Simulated SoC compute fabric.

The fabric holds execution domains (software cores, accelerator regions,
reserved realtime cores), one reconfigurable region per accelerator domain,
and the deployed function instances. Every operation takes a ``FabricState``
and returns a new one; the input is never modified, so a raised error leaves
the caller's state untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path

import jsonschema

from .workloads import is_valid_points


class DomainKind(str, Enum):
    SOFTWARE_CORE = "SoftwareCore"
    ACCELERATOR_REGION = "AcceleratorRegion"
    REALTIME_CORE = "RealtimeCore"


class Variant(str, Enum):
    SOFTWARE_FLOAT = "SoftwareFloat"
    ACCELERATED_FIXED = "AcceleratedFixed"


class RegionState(str, Enum):
    EMPTY = "Empty"
    LOADING = "Loading"
    LOADED = "Loaded"


class Lifecycle(str, Enum):
    ACTIVE = "Active"
    GATED = "Gated"
    LOADING = "Loading"


VARIANT_FOR_KIND = {
    DomainKind.SOFTWARE_CORE: Variant.SOFTWARE_FLOAT,
    DomainKind.ACCELERATOR_REGION: Variant.ACCELERATED_FIXED,
}


class FabricError(Exception):
    pass


class UnknownDomainError(FabricError, LookupError):
    pass


class UnknownRegionError(FabricError, LookupError):
    pass


class UnknownInstanceError(FabricError, LookupError):
    pass


class RegionBusyError(FabricError):
    """Region (or the instance it hosts) is still loading a bitstream."""


class UnsupportedDomainError(FabricError):
    pass


class InvalidPointsError(FabricError, ValueError):
    pass


class ExceedsMaxPointsError(InvalidPointsError):
    pass


class NoBitstreamError(FabricError):
    pass


class IncompatibleBitstreamError(FabricError):
    pass


class DuplicateActiveError(FabricError):
    pass


class ClockError(FabricError, ValueError):
    pass


class FabricConfigError(FabricError, ValueError):
    pass


@dataclass(frozen=True)
class ExecutionDomain:
    id: str
    kind: DomainKind
    static_power_w: float = 0.0

    def __post_init__(self):
        if self.static_power_w < 0:
            raise ValueError(f"domain {self.id}: static_power_w must be >= 0")


@dataclass(frozen=True)
class BitstreamMeta:
    function_kind: str
    flash_fraction: float
    max_points: int

    def __post_init__(self):
        if not (0.0 < self.flash_fraction <= 1.0):
            raise ValueError(f"flash_fraction must be in (0, 1], got {self.flash_fraction}")
        if not is_valid_points(self.max_points):
            raise ValueError(f"max_points must be a power of two >= 8, got {self.max_points}")

    def fits(self, kind: str, points: int) -> bool:
        return self.function_kind == kind and points <= self.max_points


@dataclass(frozen=True)
class ReconfigurableRegion:
    domain_id: str
    loaded_bitstream: BitstreamMeta | None = None
    state: RegionState = RegionState.EMPTY
    loading_until: float | None = None

    @property
    def id(self) -> str:
        return self.domain_id

    def holds(self, kind: str, points: int) -> bool:
        """True when a usable bitstream for ``kind`` at ``points`` is loaded."""
        return (
            self.state is RegionState.LOADED
            and self.loaded_bitstream is not None
            and self.loaded_bitstream.fits(kind, points)
        )


@dataclass(frozen=True)
class FunctionInstance:
    id: str
    kind: str
    variant: Variant
    points: int
    placement: str
    lifecycle: Lifecycle = Lifecycle.ACTIVE


@dataclass(frozen=True)
class ReconfigCostModel:
    ms_per_flash_unit: float = 200.0

    def latency(self, flash_fraction: float) -> float:
        return flash_fraction * self.ms_per_flash_unit


@dataclass
class FabricState:
    domains: dict[str, ExecutionDomain] = field(default_factory=dict)
    regions: dict[str, ReconfigurableRegion] = field(default_factory=dict)
    instances: dict[str, FunctionInstance] = field(default_factory=dict)
    sim_time_ms: float = 0.0
    cost_model: ReconfigCostModel = field(default_factory=ReconfigCostModel)
    catalog: tuple[BitstreamMeta, ...] = ()

    def copy(self) -> "FabricState":
        # elements are frozen, so copying the containers is enough
        return FabricState(
            domains=dict(self.domains),
            regions=dict(self.regions),
            instances=dict(self.instances),
            sim_time_ms=self.sim_time_ms,
            cost_model=self.cost_model,
            catalog=self.catalog,
        )

    def domain(self, domain_id: str) -> ExecutionDomain:
        try:
            return self.domains[domain_id]
        except KeyError:
            raise UnknownDomainError(f"unknown domain {domain_id!r}") from None

    def region(self, region_id: str) -> ReconfigurableRegion:
        try:
            return self.regions[region_id]
        except KeyError:
            raise UnknownRegionError(f"unknown region {region_id!r}") from None

    def instance(self, fn_id: str) -> FunctionInstance:
        try:
            return self.instances[fn_id]
        except KeyError:
            raise UnknownInstanceError(f"unknown function instance {fn_id!r}") from None

    def domains_of(self, kind: DomainKind) -> list[ExecutionDomain]:
        return sorted((d for d in self.domains.values() if d.kind is kind), key=lambda d: d.id)

    def hosted(self, domain_id: str) -> list[FunctionInstance]:
        return [i for i in self.instances.values() if i.placement == domain_id]

    @property
    def busy_until(self) -> float | None:
        """Latest completion time of any in-flight load, or None when idle."""
        pending = [r.loading_until for r in self.regions.values() if r.state is RegionState.LOADING]
        return max(pending) if pending else None

    def select_bitstream(self, kind: str, points: int) -> BitstreamMeta:
        """Smallest catalog bitstream able to run ``kind`` at ``points``."""
        fits = [b for b in self.catalog if b.fits(kind, points)]
        if not fits:
            raise NoBitstreamError(f"no bitstream in catalog for {kind!r} at {points} points")
        return min(fits, key=lambda b: (b.flash_fraction, b.max_points))


def residual_id(fn_id: str, domain_id: str) -> str:
    """Id of the gated copy a function leaves behind on an accelerator region."""
    return f"{fn_id}@{domain_id}"


def _check_points(points) -> int:
    if not is_valid_points(points):
        raise InvalidPointsError(f"points must be a power of two in [8, 65536], got {points!r}")
    return int(points)


def _check_single_active(fabric: FabricState, inst: FunctionInstance) -> None:
    for other in fabric.instances.values():
        # a Loading instance turns Active when its load completes
        if other.id != inst.id and other.kind == inst.kind and other.lifecycle is not Lifecycle.GATED:
            raise DuplicateActiveError(
                f"{other.id!r} is already the active {inst.kind!r} instance"
            )


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def deploy(fabric: FabricState, fn_id: str, kind: str, domain_id: str, points: int) -> FabricState:
    """Create an Active instance on a software core or a loaded region."""
    points = _check_points(points)
    if fn_id in fabric.instances:
        raise FabricError(f"instance {fn_id!r} already exists")
    dom = fabric.domain(domain_id)
    if dom.kind not in VARIANT_FOR_KIND:
        raise UnsupportedDomainError(f"cannot deploy to {dom.kind.value} domain {domain_id!r}")
    if dom.kind is DomainKind.ACCELERATOR_REGION:
        region = fabric.region(domain_id)
        if not region.holds(kind, points):
            raise NoBitstreamError(f"region {domain_id!r} has no loaded bitstream for {kind!r}/{points}")
    inst = FunctionInstance(fn_id, kind, VARIANT_FOR_KIND[dom.kind], points, domain_id)
    _check_single_active(fabric, inst)
    out = fabric.copy()
    out.instances[fn_id] = inst
    return out


def place(fabric: FabricState, bitstream: BitstreamMeta, region_id: str) -> tuple[FabricState, float]:
    """Start loading ``bitstream`` into a region; returns the transfer latency.

    Active instances hosted on the region go to Loading and come back when the
    load completes. Gated leftovers that the new bitstream cannot run are
    dropped.
    """
    region = fabric.region(region_id)
    if region.state is RegionState.LOADING:
        raise RegionBusyError(f"region {region_id!r} is loading until {region.loading_until} ms")
    latency = fabric.cost_model.latency(bitstream.flash_fraction)
    out = fabric.copy()
    for inst in fabric.hosted(region_id):
        compatible = bitstream.fits(inst.kind, inst.points)
        if inst.lifecycle is Lifecycle.ACTIVE:
            if not compatible:
                raise IncompatibleBitstreamError(
                    f"active instance {inst.id!r} cannot run on the new bitstream"
                )
            out.instances[inst.id] = replace(inst, lifecycle=Lifecycle.LOADING)
        elif not compatible:
            del out.instances[inst.id]
    out.regions[region_id] = replace(
        region,
        loaded_bitstream=bitstream,
        state=RegionState.LOADING,
        loading_until=fabric.sim_time_ms + latency,
    )
    return out, latency


def migrate(fabric: FabricState, fn_id: str, target_domain: str) -> tuple[FabricState, float]:
    """Move a function to another domain, switching variant to match.

    The instance ends up Active (or Loading when the target region first needs
    a bitstream). Leaving an accelerator region leaves a gated copy behind so a
    later return costs nothing.
    """
    inst = fabric.instance(fn_id)
    target = fabric.domain(target_domain)
    if target.kind not in VARIANT_FOR_KIND:
        raise UnsupportedDomainError(f"migration to {target.kind.value} is not supported")
    if inst.lifecycle is Lifecycle.LOADING:
        raise RegionBusyError(f"instance {fn_id!r} is loading")
    if inst.placement == target_domain:
        return fabric, 0.0

    source = fabric.domain(inst.placement)
    moved = replace(
        inst,
        variant=VARIANT_FOR_KIND[target.kind],
        placement=target_domain,
        lifecycle=Lifecycle.ACTIVE,
    )
    _check_single_active(fabric, moved)

    out = fabric
    latency = 0.0
    if target.kind is DomainKind.ACCELERATOR_REGION:
        region = fabric.region(target_domain)
        if region.state is RegionState.LOADING:
            raise RegionBusyError(f"region {target_domain!r} is loading")
        if not region.holds(inst.kind, inst.points):
            out, latency = place(fabric, fabric.select_bitstream(inst.kind, inst.points), target_domain)
            moved = replace(moved, lifecycle=Lifecycle.LOADING)

    out = out.copy()
    out.instances.pop(residual_id(fn_id, target_domain), None)
    out.instances[fn_id] = moved
    if source.kind is DomainKind.ACCELERATOR_REGION:
        rid = residual_id(fn_id, source.id)
        out.instances[rid] = replace(inst, id=rid, lifecycle=Lifecycle.GATED)
    return out, latency


def scale(fabric: FabricState, fn_id: str, new_points: int) -> FabricState:
    """Change the transform length. Free up to the bitstream's max_points."""
    new_points = _check_points(new_points)
    inst = fabric.instance(fn_id)
    if inst.lifecycle is Lifecycle.LOADING:
        raise RegionBusyError(f"instance {fn_id!r} is loading")
    if inst.points == new_points:
        return fabric
    if inst.variant is Variant.ACCELERATED_FIXED:
        bs = fabric.region(inst.placement).loaded_bitstream
        if bs is None or new_points > bs.max_points:
            limit = bs.max_points if bs else 0
            raise ExceedsMaxPointsError(
                f"{new_points} points exceeds bitstream max_points {limit} on {inst.placement!r}"
            )
    out = fabric.copy()
    out.instances[fn_id] = replace(inst, points=new_points)
    return out


def gate(fabric: FabricState, fn_id: str, gated: bool) -> FabricState:
    inst = fabric.instance(fn_id)
    if inst.lifecycle is Lifecycle.LOADING:
        raise RegionBusyError(f"instance {fn_id!r} is loading")
    want = Lifecycle.GATED if gated else Lifecycle.ACTIVE
    if inst.lifecycle is want:
        return fabric
    updated = replace(inst, lifecycle=want)
    if not gated:
        _check_single_active(fabric, updated)
    out = fabric.copy()
    out.instances[fn_id] = updated
    return out


def advance(fabric: FabricState, to: float) -> FabricState:
    """Move the simulated clock forward, completing any finished loads."""
    if to < fabric.sim_time_ms:
        raise ClockError(f"cannot move clock back from {fabric.sim_time_ms} to {to}")
    out = fabric.copy()
    out.sim_time_ms = to
    for rid, region in fabric.regions.items():
        if region.state is RegionState.LOADING and region.loading_until <= to:
            out.regions[rid] = replace(region, state=RegionState.LOADED, loading_until=None)
            for inst in fabric.hosted(rid):
                if inst.lifecycle is Lifecycle.LOADING:
                    out.instances[inst.id] = replace(inst, lifecycle=Lifecycle.ACTIVE)
    return out


def check_invariants(fabric: FabricState) -> None:
    """Raise AssertionError if the fabric violates a structural invariant."""
    active_kinds: set[str] = set()
    for inst in fabric.instances.values():
        assert inst.placement in fabric.domains, f"{inst.id} placed on unknown domain"
        dom = fabric.domains[inst.placement]
        assert VARIANT_FOR_KIND.get(dom.kind) is inst.variant, f"{inst.id} variant/domain mismatch"
        assert is_valid_points(inst.points)
        if inst.variant is Variant.ACCELERATED_FIXED:
            bs = fabric.regions[inst.placement].loaded_bitstream
            assert bs is not None and inst.points <= bs.max_points, f"{inst.id} exceeds bitstream"
        if inst.lifecycle is not Lifecycle.GATED:
            assert inst.kind not in active_kinds, f"two active {inst.kind} instances"
            active_kinds.add(inst.kind)
        if inst.lifecycle is Lifecycle.LOADING:
            assert fabric.regions[inst.placement].state is RegionState.LOADING
    for rid, region in fabric.regions.items():
        assert fabric.domains[rid].kind is DomainKind.ACCELERATOR_REGION
        if region.state is RegionState.LOADING:
            assert region.loaded_bitstream is not None
            assert region.loading_until > fabric.sim_time_ms


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------


def _schema(name: str) -> dict:
    return json.loads(resources.files("socorch").joinpath("data", "schemas", name).read_text())


def fabric_from_dict(doc: dict) -> FabricState:
    try:
        jsonschema.validate(doc, _schema("fabric.schema.json"))
    except jsonschema.ValidationError as exc:
        raise FabricConfigError(f"invalid fabric config: {exc.message}") from None
    try:
        domains = {}
        for d in doc["domains"]:
            if d["id"] in domains:
                raise FabricConfigError(f"duplicate domain id {d['id']!r}")
            domains[d["id"]] = ExecutionDomain(d["id"], DomainKind(d["kind"]), float(d.get("static_power_w", 0.0)))
        catalog = tuple(BitstreamMeta(**b) for b in doc.get("bitstreams", []))
        regions = {}
        for r in doc.get("regions", []):
            rid = r["domain_id"]
            if rid not in domains or domains[rid].kind is not DomainKind.ACCELERATOR_REGION:
                raise FabricConfigError(f"region {rid!r} must reference an AcceleratorRegion domain")
            if rid in regions:
                raise FabricConfigError(f"duplicate region {rid!r}")
            loaded = r.get("loaded")
            regions[rid] = (
                ReconfigurableRegion(rid, BitstreamMeta(**loaded), RegionState.LOADED)
                if loaded
                else ReconfigurableRegion(rid)
            )
        for d in domains.values():
            if d.kind is DomainKind.ACCELERATOR_REGION and d.id not in regions:
                regions[d.id] = ReconfigurableRegion(d.id)
        cost = ReconfigCostModel(**doc.get("cost_model", {}))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FabricConfigError):
            raise
        raise FabricConfigError(f"invalid fabric config: {exc}") from None
    return FabricState(domains=domains, regions=regions, cost_model=cost, catalog=catalog)


def load_fabric(path: str | Path | None = None) -> FabricState:
    """Load a fabric config file, or the bundled default when ``path`` is None."""
    if path is None:
        text = resources.files("socorch").joinpath("data", "fabric.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FabricConfigError(f"fabric config is not valid JSON: {exc}") from None
    return fabric_from_dict(doc)
