import numpy as np
import pytest

from ucgrid import network as nw

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def two_bus():
    return nw.load_grid(nw.data_path("two_bus.toml"))


@pytest.fixture(scope="session")
def ieee39():
    return nw.load_grid(nw.data_path("ieee39.toml"))


def radial_grid(n_bus=3, B=10.0, limits=None, bands=None, alpha=1.0, injection=None):
    """Small chain 1-2-...-n, bus 1 a generator and the rest loads."""
    injection = np.zeros(n_bus) if injection is None else injection
    bands = bands or {}
    buses = []
    for i in range(1, n_bus + 1):
        lo, hi = bands.get(i, (-1.0, 1.0))
        row = {"id": i, "kind": "generator" if i == 1 else "load", "D": 1.0, "alpha": alpha,
               "injection": float(injection[i - 1]), "p_min": lo, "p_max": hi}
        if i == 1:
            row.update(M=5.0, Tt=0.5, Tg=0.2)
        buses.append(row)
    lines = []
    for i in range(1, n_bus):
        lo, hi = (limits or {}).get((i, i + 1), (-5.0, 5.0))
        lines.append({"from": i, "to": i + 1, "B": B, "P_min": lo, "P_max": hi})
    return nw.grid_from_dict({"bus": buses, "line": lines}, name=f"radial{n_bus}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
