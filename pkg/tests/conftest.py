import os

import numpy as np
import pytest

from qmcforce.chem.geometry import diatomic, linear_chain
from qmcforce.chem.integrals import compute_integrals
from qmcforce.hamiltonian import transform_to_mo
from qmcforce.scf import run_rhf

LONG = os.environ.get("QMCF_LONG_TESTS", "0") == "1"


class System:
    def __init__(self, geom):
        self.geom = geom
        self.ints = compute_integrals(geom)
        self.mos = run_rhf(self.ints)
        self.ham = transform_to_mo(self.ints, self.mos)


@pytest.fixture(scope="session")
def h2():
    return System(diatomic("H", 0.7414))


@pytest.fixture(scope="session")
def h4():
    return System(linear_chain("H", 4, 1.5))


@pytest.fixture(scope="session")
def n2():
    return System(diatomic("N", 1.2))


@pytest.fixture
def rng():
    return np.random.default_rng(20261018)


@pytest.fixture(scope="module")
def n2_module():
    return System(diatomic("N", 1.2))


# acceptance bookkeeping: one verdict line per criterion in the terminal summary
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        ok = all(p for p, _ in parts)
        tr.write_line(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'} ({sum(p for p, _ in parts)}/{len(parts)} checks)")
        for p, d in parts:
            tr.write_line(f"    [{'ok' if p else 'x '}] {d}")
