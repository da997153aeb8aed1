import numpy as np
import pytest

from adpower.cli_io import load_system
from adpower.simulator import EventSchedule, run

DT = 0.005


@pytest.fixture(scope="session")
def smib():
    """Kundur SMIB without controllers."""
    return load_system("builtin:kundur_smib")


@pytest.fixture(scope="session")
def smib_pss():
    return load_system("builtin:kundur_smib_pss")


@pytest.fixture(scope="session")
def fault():
    return EventSchedule.short_circuit(0, 1.0, 1.05)


@pytest.fixture(scope="session")
def ref_speed(smib, fault):
    """Reference speed deviation at the true H over 10 s."""
    return run(smib, fault, 10.0, DT).values("G1.speed")[:, 0]


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))


# acceptance criteria report: one line per criterion after the test summary

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
