from __future__ import annotations

import ipaddress
import socket

import pytest

from safeplan.world import ObjectInstance, WorldState, default_places, tabletop_domain


class NetworkBlocked(OSError):
    pass


_real_connect = socket.socket.connect


def _loopback_only(self, address):
    host = address[0] if isinstance(address, tuple) else address
    if self.family in (socket.AF_INET, socket.AF_INET6):
        try:
            loopback = host == "localhost" or ipaddress.ip_address(host).is_loopback
        except ValueError:
            loopback = False
        if not loopback:
            raise NetworkBlocked(f"network access to {host} is blocked in tests")
    return _real_connect(self, address)


@pytest.fixture(autouse=True, scope="session")
def offline():
    """Every test runs with non-loopback connections refused."""
    socket.socket.connect = _loopback_only
    yield
    socket.socket.connect = _real_connect


@pytest.fixture
def domain():
    return tabletop_domain()


def make_world(*objects, robot=(0.5, 0.0), held=None) -> WorldState:
    """World from (name, radius, x, y) tuples with the default places."""
    objs = [ObjectInstance(n, r, x, y) for n, r, x, y in objects]
    return WorldState(objects=objs, robot=robot, held=held, places=default_places())


def three_in_a_row() -> WorldState:
    # spacing 0.115: inside the 0.08 grasp envelope + neighbour radius, too far for a chain after a 0.03 push
    return make_world(("left", 0.04, 0.385, 0.5), ("middle", 0.04, 0.5, 0.5), ("right", 0.04, 0.615, 0.5))


# --- acceptance report --------------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    def _report(number: int, title: str, ok: bool, detail: str) -> None:
        _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
