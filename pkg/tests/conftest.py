from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line for an acceptance criterion, shown in the terminal summary."""
    lines = []

    def record(number: int, title: str, passed: bool, detail: str):
        line = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'} ({detail})"
        lines.append(line)
        ACCEPTANCE.append(line)
        print(line)
        return passed

    yield record
    if not lines:
        ACCEPTANCE.append(f"{request.node.name}: FAIL (raised before reporting)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1]) if s.startswith("criterion") else 99):
            terminalreporter.write_line(line)
