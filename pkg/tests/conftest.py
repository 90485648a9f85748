import pytest

from mcpgate.clock import VirtualClock
from mcpgate.harness import HarnessEnv, reference_environment
from mcpgate.registry import ToolManifest
from mcpgate.signing import SigningKey


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock(start=1_000_000.0)


@pytest.fixture
def env() -> HarnessEnv:
    return reference_environment()


@pytest.fixture
def signer() -> SigningKey:
    return SigningKey.generate("authority-1")


def make_manifest(**overrides) -> ToolManifest:
    base = dict(
        tool_id="get_weather",
        server_id="alpha",
        description="Returns current weather for a city.",
        parameters={"city": {"type": "string", "description": "City name"}},
        requested_scopes=("network:http.get",),
        category="network",
        version=1,
    )
    base.update(overrides)
    return ToolManifest(**base)


@pytest.fixture
def manifest() -> ToolManifest:
    return make_manifest()
