"""
Congestion-constrained dispatch: the optimization problem whose solution a
correctly working UC settles at.

    min  sum_i 1/2 alpha_i p_i^2
    s.t. c_i + p_i - sum_j P_ij = 0          (c = nominal injection + r)
         P_ij = B_ij sin(theta_i - theta_j)
         P_min <= P <= P_max,  p_min <= p <= p_max
         T P = schedule                      (only with area control)

Solved in two stages: SLSQP finds the active set, then Newton's method on
the KKT system of that active set drives every residual to round-off. A
multiplier of the wrong sign or a violated inactive constraint updates the
active set and the polish is repeated. Angle differences are kept below
pi/2 so that the solution lies in the usual stable region.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .network import line_flows, solve_equilibrium

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NOT_CONVERGED = "not-converged"


class NotSettledError(RuntimeError):
    """Equilibrium comparison requested for a run that did not settle."""


@dataclass
class DispatchProblem:
    grid: object
    r: np.ndarray
    area_control: bool = False
    schedule: np.ndarray = None
    fixed: np.ndarray = None        # buses whose p is pinned at 0 (opted-out loads)
    alpha: np.ndarray = None

    def __post_init__(self):
        grid = self.grid
        self.r = np.asarray(self.r, dtype=float)
        if self.r.shape != (grid.n,) or not np.all(np.isfinite(self.r)):
            raise ValueError("r must be a finite per-bus vector")
        self.alpha = grid.column("alpha") if self.alpha is None else \
            np.broadcast_to(np.asarray(self.alpha, dtype=float), (grid.n,)).copy()
        self.fixed = np.zeros(grid.n, dtype=bool) if self.fixed is None else np.asarray(self.fixed, dtype=bool)
        # opted-out buses sit at 0; a degenerate band pins p at its single value
        self.pinned = self.fixed | (grid.p_max <= grid.p_min)
        self.pinned_value = np.where(self.fixed, 0.0, np.where(self.pinned, grid.p_min, 0.0))
        if self.area_control and grid.areas and self.schedule is None:
            _, flows0 = solve_equilibrium(grid, grid.injection, tol=1e-12)
            pre = grid.tie_matrix() @ flows0
            self.schedule = np.array([pre[k] if a.schedule is None else a.schedule
                                      for k, a in enumerate(grid.areas)])
        self.area_control = bool(self.area_control and grid.areas)

    @classmethod
    def from_system(cls, system):
        """Problem matching a closed loop's final disturbance and participation."""
        cfg = system.cfg
        return cls(system.grid, system.disturbance.final(system.grid),
                   area_control=cfg.area_control, schedule=system.schedule if cfg.area_control else None,
                   fixed=~cfg.participates, alpha=cfg.alpha)


@dataclass
class DispatchSolution:
    p: np.ndarray
    theta: np.ndarray
    P: np.ndarray
    objective: float
    status: str
    active: dict = field(default_factory=dict)
    multipliers: dict = field(default_factory=dict)
    kkt_residual: float = np.nan
    message: str = ""

    def to_json(self, path=None):
        doc = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        for group in ("active", "multipliers"):
            doc[group] = {k: np.asarray(v).tolist() for k, v in getattr(self, group).items()}
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        for k in ("p", "theta", "P"):
            doc[k] = np.array(doc[k], dtype=float)
        doc["active"] = {k: np.array(v, dtype=bool) for k, v in doc["active"].items()}
        doc["multipliers"] = {k: np.array(v, dtype=float) for k, v in doc["multipliers"].items()}
        return cls(**doc)


class _Layout:
    """Index bookkeeping for the KKT system of one active set."""

    def __init__(self, prob, act):
        grid = prob.grid
        self.n, self.m = grid.n, grid.m
        self.ref = grid.ref_index
        self.free_theta = np.array([i for i in range(grid.n) if i != self.ref], dtype=int)
        # p is fixed at a bound, at zero for opted-out buses, or free
        self.p_fixed = prob.pinned | act["p_max"] | act["p_min"]
        self.p_free = np.flatnonzero(~self.p_fixed)
        self.up = np.flatnonzero(act["P_max"])
        self.lo = np.flatnonzero(act["P_min"])
        self.k = len(grid.areas) if prob.area_control else 0
        sizes = [("theta", len(self.free_theta)), ("p", len(self.p_free)), ("nu", self.n),
                 ("mu_up", len(self.up)), ("mu_lo", len(self.lo)), ("kappa", self.k)]
        self.sl, start = {}, 0
        for name, size in sizes:
            self.sl[name] = slice(start, start + size)
            start += size
        self.size = start


def _fixed_p(prob, act):
    grid = prob.grid
    p = np.zeros(grid.n)
    p[act["p_max"]] = grid.p_max[act["p_max"]]
    p[act["p_min"]] = grid.p_min[act["p_min"]]
    p[prob.pinned] = prob.pinned_value[prob.pinned]
    return p


def _unpack(prob, lay, act, z):
    theta = np.zeros(lay.n)
    theta[lay.free_theta] = z[lay.sl["theta"]]
    p = _fixed_p(prob, act)
    p[lay.p_free] = z[lay.sl["p"]]
    nu = z[lay.sl["nu"]]
    mu_up = np.zeros(lay.m)
    mu_lo = np.zeros(lay.m)
    mu_up[lay.up] = z[lay.sl["mu_up"]]
    mu_lo[lay.lo] = z[lay.sl["mu_lo"]]
    kappa = z[lay.sl["kappa"]]
    return theta, p, nu, mu_up, mu_lo, kappa


def _kkt(prob, lay, act, z):
    """Residual of the active-set KKT equations and their Jacobian."""
    grid = prob.grid
    C = grid.incidence
    theta, p, nu, mu_up, mu_lo, kappa = _unpack(prob, lay, act, z)
    d = theta[grid.src] - theta[grid.dst]
    P = grid.B * np.sin(d)
    cosw = grid.B * np.cos(d)
    F = cosw[:, None] * C.T                            # dP/dtheta
    T = grid.tie_matrix() if lay.k else np.zeros((0, grid.m))
    c = grid.injection + prob.r
    w = C.T @ nu + mu_up - mu_lo + T.T @ kappa          # per-line weight
    res = np.concatenate([
        (F.T @ w)[lay.free_theta],
        prob.alpha[lay.p_free] * p[lay.p_free] - nu[lay.p_free],
        c + p - C @ P,
        P[lay.up] - grid.P_max[lay.up],
        grid.P_min[lay.lo] - P[lay.lo],
        (T @ P - prob.schedule) if lay.k else np.zeros(0),
    ])
    J = np.zeros((lay.size, lay.size))
    s = lay.sl
    ft = lay.free_theta
    rows = np.arange(len(ft))
    # theta stationarity: d/dtheta (F^T w) with F depending on theta
    H = C @ ((-grid.B * np.sin(d) * w)[:, None] * C.T)
    J[np.ix_(rows, np.arange(s["theta"].start, s["theta"].stop))] = H[np.ix_(ft, ft)]
    J[np.ix_(rows, np.arange(s["nu"].start, s["nu"].stop))] = (F.T @ C.T)[ft]
    J[np.ix_(rows, np.arange(s["mu_up"].start, s["mu_up"].stop))] = F.T[np.ix_(ft, lay.up)]
    J[np.ix_(rows, np.arange(s["mu_lo"].start, s["mu_lo"].stop))] = -F.T[np.ix_(ft, lay.lo)]
    if lay.k:
        J[np.ix_(rows, np.arange(s["kappa"].start, s["kappa"].stop))] = (F.T @ T.T)[ft]
    r0 = len(ft)
    nf = len(lay.p_free)
    J[r0 + np.arange(nf), s["p"].start + np.arange(nf)] = prob.alpha[lay.p_free]
    J[r0 + np.arange(nf), s["nu"].start + lay.p_free] = -1.0
    r0 += nf
    CF = C @ F
    J[np.ix_(r0 + np.arange(lay.n), np.arange(s["theta"].start, s["theta"].stop))] = -CF[:, ft]
    J[r0 + lay.p_free, s["p"].start + np.arange(nf)] = 1.0
    r0 += lay.n
    J[np.ix_(r0 + np.arange(len(lay.up)), np.arange(s["theta"].start, s["theta"].stop))] = F[np.ix_(lay.up, ft)]
    r0 += len(lay.up)
    J[np.ix_(r0 + np.arange(len(lay.lo)), np.arange(s["theta"].start, s["theta"].stop))] = -F[np.ix_(lay.lo, ft)]
    r0 += len(lay.lo)
    if lay.k:
        J[np.ix_(r0 + np.arange(lay.k), np.arange(s["theta"].start, s["theta"].stop))] = (T @ F)[:, ft]
    return res, J


def _initial_multipliers(prob, lay, act, theta, p):
    """Least-squares multipliers from the stationarity rows at a primal point."""
    z = np.zeros(lay.size)
    z[lay.sl["theta"]] = (theta - theta[lay.ref])[lay.free_theta]
    z[lay.sl["p"]] = p[lay.p_free]
    dual = np.r_[np.arange(lay.sl["nu"].start, lay.size)]
    res, J = _kkt(prob, lay, act, z)
    rows = np.arange(len(lay.free_theta) + len(lay.p_free))
    sol, *_ = np.linalg.lstsq(J[np.ix_(rows, dual)], -res[rows], rcond=None)
    z[dual] = sol
    return z


def _newton(prob, lay, act, z, tol=1e-12, max_iter=50):
    for _ in range(max_iter):
        res, J = _kkt(prob, lay, act, z)
        if np.max(np.abs(res), initial=0.0) <= tol:
            return z, True
        try:
            dz = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            dz, *_ = np.linalg.lstsq(J, -res, rcond=None)
        step = 1.0
        norm = np.linalg.norm(res)
        while step > 1e-6:
            trial = z + step * dz
            if np.linalg.norm(_kkt(prob, lay, act, trial)[0]) < norm:
                break
            step /= 2
        z = z + step * dz
    res, _ = _kkt(prob, lay, act, z)
    return z, np.max(np.abs(res), initial=0.0) <= 1e-10


def _pack_theta_p(prob, x):
    n = prob.grid.n
    return x[:n], x[n:]


def _slsqp(prob, theta0):
    """Primal solve from the pre-disturbance angles; returns (theta, p, ok, message)."""
    grid = prob.grid
    n, C = grid.n, grid.incidence
    ref = grid.ref_index
    c = grid.injection + prob.r
    src, dst = grid.src, grid.dst

    def obj(x):
        _, p = _pack_theta_p(prob, x)
        return 0.5 * np.sum(prob.alpha * p * p)

    def obj_grad(x):
        _, p = _pack_theta_p(prob, x)
        return np.r_[np.zeros(n), prob.alpha * p]

    def balance(x):
        th, p = _pack_theta_p(prob, x)
        return c + p - C @ line_flows(grid, th)

    def balance_jac(x):
        th, _ = _pack_theta_p(prob, x)
        F = (grid.B * np.cos(th[src] - th[dst]))[:, None] * C.T
        return np.hstack([-C @ F, np.eye(n)])

    eqs = [{"type": "eq", "fun": balance, "jac": balance_jac},
           {"type": "eq", "fun": lambda x: np.array([x[ref] - theta0[ref]]),
            "jac": lambda x: np.eye(1, 2 * n, ref)}]
    if prob.area_control:
        T = grid.tie_matrix()

        def area(x):
            return T @ line_flows(grid, x[:n]) - prob.schedule

        def area_jac(x):
            th = x[:n]
            F = (grid.B * np.cos(th[src] - th[dst]))[:, None] * C.T
            return np.hstack([T @ F, np.zeros((len(T), n))])
        eqs.append({"type": "eq", "fun": area, "jac": area_jac})

    def lines(x):
        P = line_flows(grid, x[:n])
        return np.r_[grid.P_max - P, P - grid.P_min]

    def lines_jac(x):
        th = x[:n]
        F = (grid.B * np.cos(th[src] - th[dst]))[:, None] * C.T
        Z = np.zeros((grid.m, n))
        return np.vstack([np.hstack([-F, Z]), np.hstack([F, Z])])

    fin_up = np.isfinite(grid.P_max)
    fin_lo = np.isfinite(grid.P_min)
    ineqs = [{"type": "ineq", "fun": lambda x: lines(x)[np.r_[fin_up, fin_lo]],
              "jac": lambda x: lines_jac(x)[np.r_[fin_up, fin_lo]]}] if fin_up.any() or fin_lo.any() else []
    # angle differences stay inside (-pi/2, pi/2)
    ang = np.pi / 2 - 1e-3
    ineqs.append({"type": "ineq",
                  "fun": lambda x: np.r_[ang - (x[src] - x[dst]), ang + (x[src] - x[dst])],
                  "jac": lambda x: np.vstack([-np.hstack([C.T, np.zeros((grid.m, n))]),
                                              np.hstack([C.T, np.zeros((grid.m, n))])])})
    lo = np.where(prob.pinned, prob.pinned_value, grid.p_min)
    hi = np.where(prob.pinned, prob.pinned_value, grid.p_max)
    bounds = [(None, None)] * n + [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b)
                                   for a, b in zip(lo, hi)]
    x0 = np.r_[theta0, np.clip(np.zeros(n), lo, hi)]
    sol = optimize.minimize(obj, x0, jac=obj_grad, method="SLSQP", bounds=bounds,
                            constraints=eqs + ineqs, options={"maxiter": 500, "ftol": 1e-14})
    th, p = _pack_theta_p(prob, sol.x)
    return th, np.clip(p, lo, hi), sol.success, sol.message


def _classify(prob, theta, p, tol=1e-6):
    grid = prob.grid
    P = line_flows(grid, theta)
    free = ~prob.pinned
    return {
        "P_max": np.isfinite(grid.P_max) & (P >= grid.P_max - tol),
        "P_min": np.isfinite(grid.P_min) & (P <= grid.P_min + tol),
        "p_max": free & np.isfinite(grid.p_max) & (p >= grid.p_max - tol),
        "p_min": free & np.isfinite(grid.p_min) & (p <= grid.p_min + tol),
    }


def _bound_multipliers(prob, p, nu, act):
    """Multipliers of the active control limits from the p-stationarity rows."""
    g = prob.alpha * p - nu              # + eta_up - eta_lo = 0
    eta_up = np.where(act["p_max"] & ~prob.pinned, -g, 0.0)
    eta_lo = np.where(act["p_min"] & ~prob.pinned, g, 0.0)
    return eta_up, eta_lo


def kkt_residuals(prob, sol):
    """Stationarity, primal, dual and complementarity residuals of a solution."""
    grid = prob.grid
    C = grid.incidence
    mult = sol.multipliers
    nu, mu_up, mu_lo = mult["nu"], mult["mu_up"], mult["mu_lo"]
    eta_up, eta_lo = mult["eta_up"], mult["eta_lo"]
    kappa = mult.get("kappa", np.zeros(0))
    theta, p = sol.theta, sol.p
    d = theta[grid.src] - theta[grid.dst]
    P = grid.B * np.sin(d)
    F = (grid.B * np.cos(d))[:, None] * C.T
    T = grid.tie_matrix() if prob.area_control else np.zeros((0, grid.m))
    w = C.T @ nu + mu_up - mu_lo + T.T @ kappa
    stat_p = prob.alpha * p - nu + eta_up - eta_lo
    stat = np.r_[F.T @ w, stat_p[~prob.pinned]]
    finite = lambda v: np.where(np.isfinite(v), v, 0.0)  # noqa: E731
    primal = np.r_[grid.injection + prob.r + p - C @ P,
                   np.maximum(P - grid.P_max, 0), np.maximum(grid.P_min - P, 0),
                   np.maximum(p - grid.p_max, 0), np.maximum(grid.p_min - p, 0),
                   (T @ P - prob.schedule) if prob.area_control else np.zeros(0),
                   np.abs(p - prob.pinned_value)[prob.pinned]]
    dual = np.maximum(-np.r_[mu_up, mu_lo, eta_up, eta_lo], 0)
    comp = np.r_[mu_up * finite(P - grid.P_max), mu_lo * finite(grid.P_min - P),
                 eta_up * finite(p - grid.p_max), eta_lo * finite(grid.p_min - p)]
    return {"stationarity": float(np.max(np.abs(stat), initial=0.0)),
            "primal": float(np.max(np.abs(primal), initial=0.0)),
            "dual": float(np.max(dual, initial=0.0)),
            "complementarity": float(np.max(np.abs(comp), initial=0.0))}


def solve_dispatch(prob, tol=1e-8, max_rounds=30):
    """Solve the dispatch problem; the status is optimal, infeasible or not-converged."""
    grid = prob.grid
    grid.validate()
    theta0, _ = solve_equilibrium(grid, grid.injection)
    c = grid.injection + prob.r
    lo = np.where(prob.pinned, prob.pinned_value, grid.p_min)
    hi = np.where(prob.pinned, prob.pinned_value, grid.p_max)
    need = -c.sum()
    if need > hi.sum() + tol or need < lo.sum() - tol:
        return DispatchSolution(np.zeros(grid.n), theta0, line_flows(grid, theta0), np.nan, INFEASIBLE,
                                message=f"control capacity [{lo.sum():.4g}, {hi.sum():.4g}] "
                                        f"cannot cover imbalance {need:.4g}")
    theta, p, ok, msg = _slsqp(prob, theta0)
    act = _classify(prob, theta, p)
    seen = set()
    for _ in range(max_rounds):
        key = tuple(np.concatenate([act[k] for k in sorted(act)]))
        if key in seen:
            break
        seen.add(key)
        lay = _Layout(prob, act)
        z = _initial_multipliers(prob, lay, act, theta, p)
        z, converged = _newton(prob, lay, act, z)
        th, pp, nu, mu_up, mu_lo, kappa = _unpack(prob, lay, act, z)
        eta_up, eta_lo = _bound_multipliers(prob, pp, nu, act)
        P = line_flows(grid, th)
        # adjust the active set: release negative multipliers, add violated limits
        changed = False
        for name, mult in (("P_max", mu_up), ("P_min", mu_lo), ("p_max", eta_up), ("p_min", eta_lo)):
            neg = act[name] & (mult < -tol)
            if neg.any():
                act[name] = act[name] & ~neg
                changed = True
        for name, viol in (("P_max", P > grid.P_max + tol), ("P_min", P < grid.P_min - tol),
                           ("p_max", ~prob.pinned & (pp > grid.p_max + tol)),
                           ("p_min", ~prob.pinned & (pp < grid.p_min - tol))):
            if (viol & ~act[name]).any():
                act[name] = act[name] | viol
                changed = True
        if converged and not changed:
            theta, p = th, pp
            break
        if converged:
            theta, p = th, pp
    else:
        converged = False
    sol = DispatchSolution(
        p=pp, theta=th - th[grid.ref_index] + theta0[grid.ref_index], P=P,
        objective=float(0.5 * np.sum(prob.alpha * pp ** 2)), status=OPTIMAL,
        active={k: v.copy() for k, v in act.items()},
        multipliers={"nu": nu, "mu_up": mu_up, "mu_lo": mu_lo, "eta_up": eta_up, "eta_lo": eta_lo,
                     "kappa": kappa})
    res = kkt_residuals(prob, sol)
    sol.kkt_residual = max(res.values())
    if np.max(np.abs(th[grid.src] - th[grid.dst])) >= np.pi / 2:
        sol.status, sol.message = NOT_CONVERGED, "angle difference left the stable region"
    elif sol.kkt_residual > tol:
        if res["primal"] > 1e-4 and not ok:
            sol.status = INFEASIBLE
            sol.message = f"SLSQP: {msg}; largest violation {res['primal']:.3e}"
        else:
            sol.status = NOT_CONVERGED
            sol.message = f"KKT residual {sol.kkt_residual:.3e} ({res})"
    return sol


def controller_price(sol, alpha):
    """Balance multipliers mapped to the controller's sign and scale.

    The settled controller command ``-alpha lam`` equals ``nu / alpha`` at the
    optimum, hence ``lam = -nu / alpha**2``.
    """
    return -sol.multipliers["nu"] / np.asarray(alpha, dtype=float) ** 2


@dataclass
class EquilibriumReport:
    p_error: float
    flow_error: float
    max_omega: float
    tol: float
    passed: bool

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max|p-p*|={self.p_error:.3e} max|P-P*|={self.flow_error:.3e} "
                f"max|omega|={self.max_omega:.3e} (tol {self.tol:g})")


def verify_equilibrium(final, sol, tol=1e-3, require_settled=True):
    """Compare a simulation's final ``p``, flows and frequency with the optimum.

    ``final`` needs attributes or keys ``p``, ``flows``, ``omega`` and, when
    ``require_settled``, ``settled``.
    """
    get = final.get if isinstance(final, dict) else lambda k, d=None: getattr(final, k, d)
    if require_settled and not get("settled", False):
        raise NotSettledError("simulation did not meet the settling criterion")
    if sol.status != OPTIMAL:
        raise ValueError(f"oracle status is {sol.status}: {sol.message}")
    p_err = float(np.max(np.abs(np.asarray(get("p")) - sol.p)))
    f_err = float(np.max(np.abs(np.asarray(get("flows")) - sol.P), initial=0.0))
    w = float(np.max(np.abs(get("omega"))))
    return EquilibriumReport(p_err, f_err, w, tol, p_err <= tol and f_err <= tol and w <= tol)
