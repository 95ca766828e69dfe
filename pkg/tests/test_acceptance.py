"""Acceptance criteria 1-9.

Each test prints one ``criterion N: PASS|FAIL`` line (shown with ``-s`` and
repeated in the terminal summary) and fails if the criterion or its runtime
budget is missed.  Run on its own with ``pytest tests/test_acceptance.py -s``
or ``python tests/test_acceptance.py``.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from test_oracle import chain, grid_search_two_bus
from ucgrid import controller as ctl
from ucgrid import experiments as ex
from ucgrid import network as nw
from ucgrid import oracle as orc
from ucgrid import stability as st
from ucgrid.dynamics import ClosedLoop, Disturbance, TurbineModel, integrate

# every simulated acceptance trajectory, for the invariant checks of criterion 9
RUNS = {}
SPECTRA = {}


def run(name, kind, **changes):
    key = (name, kind)
    if key not in RUNS:
        sc = ex.load_scenario(name).with_controller(kind=kind, **changes)
        RUNS[key] = ex.run_scenario(sc)
    return RUNS[key]


def report(k, ok, detail, start, budget):
    elapsed = time.perf_counter() - start
    on_time = elapsed < budget
    ok = bool(ok and on_time)
    detail = f"[{elapsed:.1f} s of {budget} s{'' if on_time else ', OVER BUDGET'}] {detail}"
    ACCEPTANCE[k] = (ok, detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_projection():
    t0 = time.perf_counter()
    values = (-np.inf, -7.5, -np.finfo(float).tiny, -0.0, 0.0, np.finfo(float).tiny, 3.25, np.inf)
    mismatches = 0
    for x, y in itertools.product(values, values):
        printed = x if (y > 0 or x > 0) else 0.0
        mismatches += ctl.project(x, y) != printed
    xs, ys = np.array(list(itertools.product(values, values))).T
    vec = ctl.project(xs, ys)
    mismatches += int(np.sum(vec != np.where((ys > 0) | (xs > 0), xs, 0.0)))
    report(1, mismatches == 0, f"{len(values) ** 2} sign/zero pairs, {mismatches} mismatches", t0, 1.0)


def test_criterion_2_jacobian():
    t0 = time.perf_counter()
    gains = dict(K_lambda=0.05, K_phi=10.0, K_rho_plus=0.01, K_rho_minus=0.01)
    grids = {"2-bus": (nw.load_grid(nw.data_path("two_bus.toml")), 2, -0.2),
             "39-bus": (nw.load_grid(nw.data_path("ieee39.toml")), 38, -2.0)}
    worst, where = 0.0, ""
    rng = np.random.default_rng(11)
    for name, (grid, bus, dr) in grids.items():
        for kind, turbine, loads in itertools.product(ctl.KINDS, TurbineModel, (True, False)):
            dist = Disturbance() if kind == ctl.DROOP else Disturbance([(0.0, bus, dr)])
            system = ClosedLoop(grid, ctl.ControllerConfig(kind=kind, load_control=loads, **gains), turbine, dist)
            x_eq = st.analytic_equilibrium(system)
            x_off = x_eq + 1e-3 * rng.standard_normal(system.size)
            for nm in ("rho_plus", "rho_minus"):
                if nm in system.slices:
                    x_off[system.slices[nm]] = np.where(np.isfinite(grid.P_max), 0.05, 0.0)
            for x in (x_eq, x_off):
                A, _ = st.jacobian(system, x)
                keep = st.retained_states(system, x)
                A = A[np.ix_(keep, keep)]
                A_fd = st.finite_difference_jacobian(system, x, step=1e-6, states=keep)
                err = np.linalg.norm(A - A_fd, np.inf) / np.linalg.norm(A, np.inf)
                if err > worst:
                    worst, where = err, f"{name} {kind} {turbine.value}"
    report(2, worst <= 1e-6, f"worst relative inf-norm error {worst:.2e} ({where}), "
                             "64 Jacobians over both fixtures", t0, 30.0)


def test_criterion_3_eigen_ordering():
    t0 = time.perf_counter()
    sc = ex.load_scenario("eigen39.toml")
    reports = ex.run_eigen_study(sc)
    SPECTRA.update(reports)
    a = {k: (r.abscissa if isinstance(r, st.EigenReport) else np.nan) for k, r in reports.items()}
    uc1 = a[(ctl.UC, TurbineModel.FIRST_ORDER)]
    uc2 = a[(ctl.UC, TurbineModel.SECOND_ORDER)]
    duc = a[(ctl.DUC, TurbineModel.SECOND_ORDER)]
    ok = uc1 < -1e-6 and uc2 > 1e-6 and duc < -1e-6
    report(3, ok, f"gain scale {sc.gain_scale}: UC/1st {uc1:+.3e}, UC/2nd {uc2:+.3e}, DUC/2nd {duc:+.3e}",
           t0, 60.0)


def test_criterion_4_fig4_oscillation():
    t0 = time.perf_counter()
    uc = run("fig4.toml", ctl.UC)
    duc = run("fig4.toml", ctl.DUC)
    f_uc, r_uc = uc.oscillation["lam[34]"]
    f_duc, r_duc = duc.oscillation["lam[34]"]
    ok = f_uc and not f_duc and duc.settled
    report(4, ok, f"lam[34] UC oscillating={f_uc} (ratio {r_uc:.3f}); DUC oscillating={f_duc} "
                  f"(ratio {r_duc:.3f}) settled={duc.settled}", t0, 120.0)


def test_criterion_5_frequency_restoration():
    t0 = time.perf_counter()
    res = {k: run("step_loss.toml", k) for k in (ctl.UC, ctl.DUC, ctl.AGC)}
    w = {k: r.stats["final_max_omega"] for k, r in res.items()}
    ts = {k: r.settling_time for k, r in res.items()}
    ok = all(v <= 1e-3 for v in w.values()) and ts[ctl.DUC] is not None and ts[ctl.AGC] is not None \
        and ts[ctl.DUC] < ts[ctl.AGC]
    detail = ", ".join(f"{k} max|w|={w[k]:.1e}" for k in res) + \
        f"; settling DUC {ts[ctl.DUC]} s < AGC {ts[ctl.AGC]} s"
    report(5, ok, detail, t0, 120.0)


def test_criterion_6_congestion():
    t0 = time.perf_counter()
    sc = ex.load_scenario("congested.toml")
    limit = sc.load_grid().P_max[sc.load_grid().line_index(19, 20)]
    flows = {k: run("congested.toml", k).series["flow[19-20]"][-1] for k in (ctl.UC, ctl.DUC, ctl.AGC)}
    ok = flows[ctl.UC] <= limit + 1e-3 and flows[ctl.DUC] <= limit + 1e-3 and flows[ctl.AGC] > limit
    detail = f"limit {limit}: " + ", ".join(f"{k} {v:.6f}" for k, v in flows.items())
    report(6, ok, detail, t0, 120.0)


def test_criterion_7_oracle_equivalence():
    t0 = time.perf_counter()
    worst, lines, ok = 0.0, [], True
    for name in ("uncongested.toml", "congested.toml", "limit_binding.toml"):
        sc = ex.load_scenario(name)
        system = sc.system()
        sol = orc.solve_dispatch(orc.DispatchProblem.from_system(system))
        for kind in (ctl.UC, ctl.DUC):
            res = run(name, kind)
            final = dict(res.final, settled=res.settled)
            try:
                rep = orc.verify_equilibrium(final, sol, tol=1e-3)
            except orc.NotSettledError:
                ok = False
                lines.append(f"{name[:-5]}/{kind} not settled")
                continue
            ok &= rep.p_error <= 1e-3 and rep.flow_error <= 1e-3
            worst = max(worst, rep.p_error, rep.flow_error)
    gaps = []
    for alphas, r, limit in [((1.0, 1.0), (-0.5, 0.0), (-2.0, 2.0)), ((1.0, 1.0), (0.0, -0.5), (-2.0, 0.7)),
                             ((2.0, 1.0), (0.0, -0.8), (-2.0, 0.9)), ((1.0, 3.0), (0.0, -0.8), (-2.0, 2.0))]:
        grid = chain(alphas, (0.5, -0.5), [limit], [(-1.0, 1.0), (-0.4, 0.4)])
        r = np.array(r)
        sol = orc.solve_dispatch(orc.DispatchProblem(grid, r))
        gaps.append(abs(sol.objective - grid_search_two_bus(grid, r)))
    ok &= max(gaps) <= 1e-6
    detail = f"UC/DUC on 3 scenarios: worst |p-p*|,|P-P*| = {worst:.1e}; " \
             f"2-bus grid search objective gap {max(gaps):.1e}" + ("; " + "; ".join(lines) if lines else "")
    report(7, ok, detail, t0, 180.0)


def test_criterion_8_robustness():
    t0 = time.perf_counter()
    sc = ex.load_scenario("robustness.toml")
    rows = {r["factor"]: r for r in ex.run_robustness_sweep(sc)}
    base = rows[1.0]
    ok = base["settled"] and not base["oscillating"]
    for f in (0.5, 2.0):
        r = rows[f]
        ok &= r["settled"] and r["oscillating"] is False and r["settling_time"] is not None
        ok &= r["settling_time"] > base["settling_time"] and r["overshoot"] > base["overshoot"]
    detail = "; ".join(f"f={f}: settle {r['settling_time']:.2f} s overshoot {r['overshoot']:.4f} "
                       f"osc={r['oscillating']}" for f, r in rows.items())
    report(8, ok, f"focus {sc.focus}, tol {sc.settling_tol:g}: {detail}", t0, 120.0)


def rk4_observed_order(system, x0, t0, T, h):
    def go(step):
        x, _, _ = system.advance(x0, t0, step, int(round(T / step)))
        return x
    ref = go(h / 16)
    return np.log2(np.max(np.abs(go(h) - ref)) / np.max(np.abs(go(h / 2) - ref)))


def test_criterion_9_invariants():
    t0 = time.perf_counter()
    if not RUNS:
        for name, kind in (("fig4.toml", ctl.UC), ("fig4.toml", ctl.DUC), ("congested.toml", ctl.UC)):
            run(name, kind)
    mult_min = min(r.stats["min_multiplier"] for r in RUNS.values())
    res_max = max(r.stats["max_load_residual"] for r in RUNS.values())
    # smooth segment: after the step, before any clipping changes
    grid = nw.load_grid(nw.data_path("ieee39.toml"))
    cfg = ctl.ControllerConfig(kind=ctl.DUC, K_lambda=0.0477, K_phi=37.6991, K_rho_plus=0.0013,
                               K_rho_minus=0.0013, alpha=20.0)
    system = ClosedLoop(grid, cfg, TurbineModel.SECOND_ORDER, Disturbance([(0.0, 38, -2.0)]))
    x0 = integrate(system, system.initial_state(), 0.0, 0.01, 1e-3)
    order = rk4_observed_order(system, x0, 0.01, 0.5, 2e-3)
    spectra = SPECTRA or ex.run_eigen_study(ex.load_scenario("eigen39.toml"))
    conj_gap = 0.0
    for rep in spectra.values():
        w = rep.eigenvalues
        for z in w[w.imag != 0]:
            conj_gap = max(conj_gap, np.min(np.abs(w - np.conj(z))))
    ok = mult_min >= 0.0 and res_max <= 1e-12 and order >= 3.5 and conj_gap <= 1e-9
    report(9, ok, f"{len(RUNS)} trajectories: min rho {mult_min:.1e}, max load residual {res_max:.1e}; "
                  f"RK4 order {order:.2f}; conjugate gap {conj_gap:.1e}", t0, 60.0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
