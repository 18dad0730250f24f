import pytest

from particle_world.episodes import generate_dataset
from particle_world.simulator import default_task_spec

# (criterion number, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


@pytest.fixture(scope="session")
def box_data():
    """A handful of short box-pushing episodes for fast unit tests."""
    return generate_dataset(default_task_spec("box_push"), 6, 8, seed=0)


@pytest.fixture
def criterion():
    """Call ``criterion(n, ok, detail)`` once per acceptance criterion; it prints and asserts."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append((number, bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
