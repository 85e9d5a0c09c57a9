import pytest

from imagine_nav.alignment import TrainConfig, generate_quadruples, train
from imagine_nav.environment import generate_world


@pytest.fixture(scope="session")
def quick_params():
    """A small PAF trained briefly at a high learning rate; enough to localise goals."""
    worlds = [generate_world(s) for s in range(10)]
    data = generate_quadruples(worlds, 1000, seed=0)
    return train(data, TrainConfig(lr=1e-2, epochs=6, seed=0)).params


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""
    def record(criterion: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
