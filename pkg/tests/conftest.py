import numpy as np
import pytest
import torch

from hsiproto.cubeio import HyperCube

torch.set_num_threads(1)

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE.append((criterion, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cube(rng, h=4, w=5, c=6, mask=True, bands=False):
    data = rng.normal(size=(h, w, c)).astype(np.float32)
    m = rng.random((h, w)) < 0.6 if mask else None
    bc = np.linspace(900.0, 1700.0, c) if bands else None
    return HyperCube(data, bc, m)
