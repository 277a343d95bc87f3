from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hyperion.config import Config  # noqa: E402
from hyperion.ebpf import assemble, verify  # noqa: E402
from hyperion.server import Emulator  # noqa: E402
from hyperion.slots import Tenant  # noqa: E402

TOKEN_A = bytes(range(32))
TOKEN_B = bytes(range(100, 132))

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def vp_of(source: str):
    return verify(assemble(source))


def make_config(distribution: str = "uniform", seed: int = 0, **devices) -> Config:
    cfg = Config.from_dict({
        "sim": {"seed": seed},
        "latency": {"distribution": distribution},
        "devices": devices,
    })
    cfg.tenants += [Tenant(1, TOKEN_A), Tenant(2, TOKEN_B)]
    return cfg


@pytest.fixture
def emulator():
    emu = Emulator(make_config(), access_log=True, record_intervals=True, record_dispatch=True)
    yield emu
    emu.close()
