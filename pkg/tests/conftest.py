import math

import numpy as np
import pytest

from pseudobox.geometry import CameraModel


def look_transform(yaw: float, position=(0.0, 0.0, 0.0)) -> np.ndarray:
    """ego_from_camera for a level camera whose optical axis points along ``yaw``."""
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    T = np.eye(4)
    T[:3, 0] = right
    T[:3, 1] = down
    T[:3, 2] = fwd
    T[:3, 3] = position
    return T


def make_camera(name="cam", yaw=0.0, position=(0.0, 0.0, 0.0),
                fx=1000.0, fy=1000.0, cx=800.0, cy=450.0, width=1600, height=900):
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    return CameraModel(name, K, look_transform(yaw, position), width, height)


@pytest.fixture
def identity_camera():
    K = np.array([[1000.0, 0, 800.0], [0, 1000.0, 450.0], [0, 0, 1]])
    return CameraModel("identity", K, np.eye(4), 1600, 900)


@pytest.fixture
def front_camera():
    return make_camera("front")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ── acceptance report ────────────────────────────────────────────────────

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion; shown in the terminal summary."""
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
