import pytest

from socorch import fabric as fab
from socorch.fabric import BitstreamMeta, DomainKind, ExecutionDomain, FabricState, ReconfigurableRegion
from socorch.policy import default_policy
from socorch.telemetry import PowerModel

FFT_BS = BitstreamMeta("fft", 0.05, 4096)


def make_fabric(*, loaded=False, realtime=False) -> FabricState:
    domains = {
        "apu": ExecutionDomain("apu", DomainKind.SOFTWARE_CORE, 1.0),
        "pl0": ExecutionDomain("pl0", DomainKind.ACCELERATOR_REGION, 0.5),
    }
    if realtime:
        domains["rpu"] = ExecutionDomain("rpu", DomainKind.REALTIME_CORE, 0.1)
    region = (
        ReconfigurableRegion("pl0", FFT_BS, fab.RegionState.LOADED) if loaded else ReconfigurableRegion("pl0")
    )
    return FabricState(domains=domains, regions={"pl0": region}, catalog=(FFT_BS,))


@pytest.fixture
def fabric():
    return fab.deploy(make_fabric(), "fft0", "fft", "apu", 8)


@pytest.fixture
def loaded_fabric():
    return fab.deploy(make_fabric(loaded=True), "fft0", "fft", "apu", 1024)


@pytest.fixture
def policy():
    return default_policy()


@pytest.fixture
def power():
    return PowerModel.load()
