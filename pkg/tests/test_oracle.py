import numpy as np
import pytest

from ucgrid import controller as ctl
from ucgrid import network as nw
from ucgrid import oracle as orc
from ucgrid import stability as st
from ucgrid.dynamics import ClosedLoop, Disturbance


def chain(alphas, injection, limits, bands, B=10.0):
    """Buses 1..n in a chain; bus 1 is the only generator."""
    buses = []
    for i, (a, inj, (lo, hi)) in enumerate(zip(alphas, injection, bands), start=1):
        row = {"id": i, "kind": "generator" if i == 1 else "load", "D": 1.0, "alpha": a,
               "injection": inj, "p_min": lo, "p_max": hi}
        if i == 1:
            row.update(M=5.0, Tt=0.5, Tg=0.2)
        buses.append(row)
    lines = [{"from": i, "to": i + 1, "B": B, "P_min": lo, "P_max": hi}
             for i, (lo, hi) in enumerate(limits, start=1)]
    return nw.grid_from_dict({"bus": buses, "line": lines})


def grid_search_two_bus(grid, r, step=1e-3):
    a = grid.column("alpha")
    lo, hi = grid.p_min, grid.p_max
    p1 = np.arange(round(lo[0] / step), round(hi[0] / step) + 1) * step
    p2 = -r.sum() - p1
    flow = grid.injection[0] + r[0] + p1
    ok = (p2 >= lo[1] - 1e-12) & (p2 <= hi[1] + 1e-12)
    ok &= (flow <= grid.P_max[0] + 1e-12) & (flow >= grid.P_min[0] - 1e-12) & (np.abs(flow) < grid.B[0])
    obj = 0.5 * (a[0] * p1 ** 2 + a[1] * p2 ** 2)
    return np.min(obj[ok])


def grid_search_three_bus(grid, r, step=1e-3):
    a = grid.column("alpha")
    lo, hi = grid.p_min, grid.p_max
    ax = [np.arange(round(lo[k] / step), round(hi[k] / step) + 1) * step for k in (0, 1)]
    p1, p2 = np.meshgrid(*ax, indexing="ij")
    p3 = -r.sum() - p1 - p2
    f12 = grid.injection[0] + r[0] + p1
    f23 = f12 + grid.injection[1] + r[1] + p2
    ok = (p3 >= lo[2] - 1e-12) & (p3 <= hi[2] + 1e-12)
    for k, f in enumerate((f12, f23)):
        ok &= (f <= grid.P_max[k] + 1e-12) & (f >= grid.P_min[k] - 1e-12) & (np.abs(f) < grid.B[k])
    obj = 0.5 * (a[0] * p1 ** 2 + a[1] * p2 ** 2 + a[2] * p3 ** 2)
    return np.min(obj[ok])


def test_no_disturbance_is_trivial(two_bus):
    sol = orc.solve_dispatch(orc.DispatchProblem(two_bus, np.zeros(2)))
    _, flows0 = nw.solve_equilibrium(two_bus, two_bus.injection)
    assert sol.status == orc.OPTIMAL
    assert np.max(np.abs(sol.p)) < 1e-9 and abs(sol.objective) < 1e-12
    assert np.max(np.abs(sol.P - flows0)) < 1e-9


def test_two_bus_equal_sharing(two_bus):
    sol = orc.solve_dispatch(orc.DispatchProblem(two_bus, np.array([-0.5, 0.0])))
    assert np.allclose(sol.p, [0.25, 0.25], atol=1e-9)
    assert sol.kkt_residual < 1e-8


@pytest.mark.parametrize("alphas, r, limit", [
    ((1.0, 1.0), (-0.5, 0.0), (-2.0, 2.0)),
    ((1.0, 3.0), (0.0, -0.8), (-2.0, 2.0)),
    ((1.0, 1.0), (0.0, -0.5), (-2.0, 0.7)),      # line limit binds
    ((1.0, 1.0), (0.0, -0.6), (-2.0, 2.0)),      # load control limit binds
    ((2.0, 1.0), (0.0, -0.8), (-2.0, 0.9)),      # line and control limit bind together
])
def test_two_bus_matches_grid_search(alphas, r, limit):
    grid = chain(alphas, (0.5, -0.5), [limit], [(-1.0, 1.0), (-0.4, 0.4)])
    r = np.array(r)
    sol = orc.solve_dispatch(orc.DispatchProblem(grid, r))
    assert sol.status == orc.OPTIMAL
    assert sol.objective == pytest.approx(grid_search_two_bus(grid, r), abs=1e-6)
    assert sol.P[0] <= limit[1] + 1e-9


def test_binding_line_sits_on_facet():
    grid = chain((1.0, 1.0), (0.5, -0.5), [(-2.0, 0.7)], [(-1.0, 1.0), (-1.0, 1.0)])
    sol = orc.solve_dispatch(orc.DispatchProblem(grid, np.array([0.0, -0.8])))
    assert sol.active["P_max"][0]
    assert sol.P[0] == pytest.approx(0.7, abs=1e-9)
    assert sol.multipliers["mu_up"][0] > 0


@pytest.mark.parametrize("r, limits", [
    ((0.0, -0.3, -0.3), [(-3.0, 3.0), (-3.0, 3.0)]),
    ((0.0, 0.0, -0.8), [(-3.0, 3.0), (-3.0, 0.6)]),
    ((0.0, -0.6, -0.6), [(-3.0, 1.5), (-3.0, 0.36)]),
    ((0.0, -0.2, -0.9), [(-3.0, 3.0), (-3.0, 3.0)]),
])
def test_three_bus_matches_grid_search(r, limits):
    grid = chain((1.0, 2.0, 1.0), (0.6, -0.3, -0.3), limits, [(-1.0, 1.0), (-0.5, 0.5), (-0.6, 0.6)])
    r = np.array(r)
    sol = orc.solve_dispatch(orc.DispatchProblem(grid, r))
    assert sol.status == orc.OPTIMAL
    assert sol.objective == pytest.approx(grid_search_three_bus(grid, r), abs=1e-6)


def test_kkt_residuals_small(ieee39):
    grid = ieee39.with_lines(P_max={(19, 20): 2.0}, P_min={(19, 20): -2.0})
    r = np.zeros(39)
    r[grid.index(20)] = -0.5
    prob = orc.DispatchProblem(grid, r)
    sol = orc.solve_dispatch(prob)
    res = orc.kkt_residuals(prob, sol)
    assert sol.status == orc.OPTIMAL
    assert max(res.values()) < 1e-8
    assert sol.P[grid.line_index(19, 20)] <= 2.0 + 1e-9


def test_insufficient_capacity_is_infeasible(two_bus):
    sol = orc.solve_dispatch(orc.DispatchProblem(two_bus, np.array([0.0, -3.0])))
    assert sol.status == orc.INFEASIBLE


def test_opted_out_and_degenerate_buses_are_pinned(two_bus):
    prob = orc.DispatchProblem(two_bus, np.array([-0.5, 0.0]), fixed=np.array([False, True]))
    sol = orc.solve_dispatch(prob)
    assert sol.p[1] == 0.0 and sol.p[0] == pytest.approx(0.5, abs=1e-9)
    flat = two_bus.with_buses(p_min={2: 0.1}, p_max={2: 0.1})
    sol = orc.solve_dispatch(orc.DispatchProblem(flat, np.array([-0.5, 0.0])))
    assert sol.p[1] == pytest.approx(0.1) and sol.p[0] == pytest.approx(0.4, abs=1e-9)


def test_solution_json_round_trip(two_bus):
    sol = orc.solve_dispatch(orc.DispatchProblem(two_bus, np.array([-0.5, 0.0])))
    back = orc.DispatchSolution.from_json(sol.to_json())
    assert np.array_equal(back.p, sol.p) and np.array_equal(back.P, sol.P)
    assert back.status == sol.status and back.objective == sol.objective
    for key in sol.multipliers:
        assert np.array_equal(back.multipliers[key], sol.multipliers[key])


def test_balance_multiplier_maps_to_controller_price(ieee39):
    cfg = ctl.ControllerConfig(kind=ctl.UC, alpha=20.0, load_control=True)
    system = ClosedLoop(ieee39, cfg, disturbance=Disturbance([(0.0, 38, -2.0)]))
    x = st.analytic_equilibrium(system)
    sol = orc.solve_dispatch(orc.DispatchProblem.from_system(system))
    lam = orc.controller_price(sol, system.cfg.alpha)
    assert np.max(np.abs(lam - system.get(x, "lam"))) < 1e-8
    info = system.evaluate(np.inf, x)
    assert np.max(np.abs(info["p"] - sol.p)) < 1e-8


def test_verify_needs_settled_run(two_bus):
    sol = orc.solve_dispatch(orc.DispatchProblem(two_bus, np.array([-0.5, 0.0])))
    final = {"p": sol.p, "flows": sol.P, "omega": np.zeros(2), "settled": False}
    with pytest.raises(orc.NotSettledError):
        orc.verify_equilibrium(final, sol)
    report = orc.verify_equilibrium(dict(final, settled=True), sol)
    assert report.passed and "PASS" in str(report)
    report = orc.verify_equilibrium(dict(final, settled=True, p=sol.p + 0.01), sol)
    assert not report.passed


def test_bad_disturbance_vector(two_bus):
    with pytest.raises(ValueError):
        orc.DispatchProblem(two_bus, np.array([np.nan, 0.0]))
