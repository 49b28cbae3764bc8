import json
from importlib import resources

import pytest

from optonet.core import Circuit, OpticalSchedule


def fig2() -> OpticalSchedule:
    """Four nodes, three slices: N0-N1 and N2-N3 at ts 0, N1-N3 at ts 1,
    N0-N3 and N1-N2 at ts 2."""
    return OpticalSchedule(
        (
            (Circuit(0, 1, 1, 3), Circuit(2, 1, 3, 3)),
            (Circuit(1, 2, 3, 2),),
            (Circuit(0, 3, 3, 1), Circuit(1, 1, 2, 3)),
        ),
        2000,
        200,
    )


@pytest.fixture
def fig2_schedule() -> OpticalSchedule:
    return fig2()


def shipped_scenario(name: str) -> dict:
    text = resources.files("optonet").joinpath("scenarios", name).read_text(encoding="utf-8")
    return json.loads(text)


@pytest.fixture
def scenario_dir():
    return resources.files("optonet").joinpath("scenarios")


# criterion number -> (title, passed, detail), filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
