"""
Small-signal analysis of the closed loop.

The Jacobian is assembled analytically block by block: line flows
linearize to ``diag(B cos(theta_i - theta_j)) C^T``, clipped commands to a
gain of ``alpha`` inside their band and 0 on a limit, and projection gates
to their frozen branch. Load-bus frequencies are algebraic and are removed
with a Schur complement; the uniform angle shift of ``theta`` and ``phi``
is removed by measuring angles relative to the reference bus.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import controller as ctl
from .dynamics import ClosedLoop, TurbineModel, _load_omega_with_control
from .network import bus_outflow, line_flows, solve_equilibrium


class LinearizationError(ValueError):
    """The algebraic block cannot be eliminated or the point is not an equilibrium."""


class EigenSolverError(RuntimeError):
    """The dense eigensolver failed to converge."""


STABLE = "stable"
MARGINAL = "marginal"
UNSTABLE = "unstable"


@dataclass
class LinearModel:
    A: np.ndarray
    labels: list
    equilibrium: np.ndarray
    full_A: np.ndarray = field(repr=False, default=None)
    full_labels: list = field(repr=False, default=None)
    states: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self):
        return self.A.shape[0]


@dataclass
class EigenReport:
    eigenvalues: np.ndarray
    abscissa: float
    classification: str
    n_unstable: int
    tol: float = 1e-8

    def to_csv(self, path, label=""):
        with open(path, "w", newline="") as fh:
            fh.write(f"# {label} abscissa={self.abscissa!r} classification={self.classification} "
                     f"unstable={self.n_unstable}\n")
            w = csv.writer(fh)
            w.writerow(["re", "im"])
            for z in self.eigenvalues:
                w.writerow([repr(float(z.real)), repr(float(z.imag))])


# -- equilibria -------------------------------------------------------------

def _uniform_price(system, total):
    """Uniform lam* such that the settled commands cover ``total`` imbalance."""
    grid, cfg = system.grid, system.cfg
    part = cfg.participates.copy()
    alpha = cfg.alpha

    def supply(lam):
        return np.sum(np.where(part, np.clip(-alpha * lam, grid.p_min, grid.p_max), 0.0)) - total

    lo, hi = -1.0, 1.0
    while supply(lo) < 0 and lo > -1e6:
        lo *= 2
    while supply(hi) > 0 and hi < 1e6:
        hi *= 2
    return optimize.brentq(supply, lo, hi, xtol=1e-15, rtol=1e-15)


def analytic_equilibrium(system, t=np.inf):
    """Closed-loop equilibrium without binding line limits or area control.

    Frequency is zero, the multipliers ``lam`` are uniform and every
    participating bus settles at its clipped command.
    """
    grid, cfg = system.grid, system.cfg
    gen = grid.gen_idx
    r = system.disturbance.at(grid, t)
    total = -r.sum()
    x = np.zeros(system.size)
    p = np.zeros(grid.n)
    if cfg.kind in (ctl.UC, ctl.DUC):
        lam = _uniform_price(system, total)
        p = np.where(cfg.participates, np.clip(-cfg.alpha * lam, grid.p_min, grid.p_max), 0.0)
        x[system.slices["lam"]] = lam
    elif cfg.kind == ctl.AGC:
        R = cfg.agc_routing
        if R.shape[1] == 1:
            targets = [total]
        else:
            # with tie lines held at schedule, each area covers its own disturbance
            targets = [-sum(r[grid.index(b)] for b in a.buses) for a in grid.areas]
        s = np.zeros(R.shape[1])
        lo, hi = grid.p_min[gen], grid.p_max[gen]
        for k, target in enumerate(targets):
            mask = R[:, k] > 0
            s[k] = optimize.brentq(
                lambda sk: np.sum(np.clip(cfg.agc_share[mask] * sk, lo[mask], hi[mask])) - target,
                -1e6, 1e6, xtol=1e-15)
        x[system.slices["s"]] = s
        p[gen] = np.clip(cfg.agc_share * (R @ s), lo, hi)
    elif abs(total) > 1e-12:
        raise LinearizationError("droop-only control has no zero-frequency equilibrium after a disturbance")
    theta, _ = solve_equilibrium(grid, grid.injection + r + p, tol=1e-12)
    x[system.slices["theta"]] = theta
    x[system.slices["pm"]] = p[gen]
    for name in ("v", "pm_hat", "v_hat"):
        if name in system.slices:
            x[system.slices[name]] = p[gen]
    if "phi" in system.slices:
        x[system.slices["phi"]] = theta
    return x


def find_equilibrium(system, guess=None, t=np.inf, tol=1e-10):
    """Polish ``guess`` (default: the uncongested analytic point) to a root of the RHS.

    Multipliers that are zero in the guess stay pinned at zero.
    """
    x0 = analytic_equilibrium(system, t) if guess is None else np.array(guess, dtype=float)
    free = np.ones(system.size, dtype=bool)
    for name in ("rho_plus", "rho_minus"):
        if name in system.slices:
            sl = system.slices[name]
            free[sl] = x0[sl] > 0
    ref = system.grid.ref_index
    for name in ("theta", "phi"):
        if name in system.slices:
            free[system.slices[name].start + ref] = False
    idx = np.flatnonzero(free)

    def residual(z):
        x = x0.copy()
        x[idx] = z
        return system.rhs(t, x)[idx]

    sol = optimize.root(residual, x0[idx], method="hybr", options={"xtol": 1e-13})
    x = x0.copy()
    x[idx] = sol.x
    res = np.max(np.abs(system.rhs(t, x)))
    if res > tol:
        raise LinearizationError(f"equilibrium residual {res:.3e} exceeds {tol:.1e}")
    return x


# -- Jacobian ---------------------------------------------------------------

def _gain(value, lo, hi, alpha):
    """Slope of clip(value) w.r.t. its argument scaled by -alpha: alpha inside, 0 on a limit."""
    inside = (value > lo) & (value < hi)
    return np.where(inside, alpha, 0.0)


def jacobian(system, x, t=np.inf, active=None):
    """Analytic Jacobian of ``system.rhs`` at ``x`` (load frequencies eliminated).

    ``active`` maps ``"rho_plus"``/``"rho_minus"`` to boolean masks of lines
    whose projection gate is open; by default a gate is open where the
    multiplier is positive.
    """
    grid, cfg = system.grid, system.cfg
    sl = system.slices
    n, N = grid.n, system.size
    gen, load = grid.gen_idx, grid.load_idx
    g, nl = len(gen), len(load)
    C = grid.incidence
    r = system.disturbance.at(grid, t)
    theta = x[sl["theta"]]
    flows = line_flows(grid, theta)
    omega, p = system.commands(x, r, flows)
    lam = x[sl["lam"]] if "lam" in sl else np.zeros(n)

    F = (grid.B * np.cos(theta[grid.src] - theta[grid.dst]))[:, None] * C.T     # dP/dtheta
    Lt = C @ F                                                                     # d outflow / dtheta

    # the algebraic unknowns z = omega_L; J = [df/dx, df/dz], G = [dg/dx, dg/dz]
    fx = np.zeros((N, N))
    fz = np.zeros((N, nl))

    def cols(name):
        return sl[name]

    # command gains
    if cfg.kind == ctl.AGC:
        s = x[sl["s"]]
        raw = -cfg.alpha[gen] * omega[gen] + cfg.agc_share * (cfg.agc_routing @ s)
        kg = _gain(raw, grid.p_min[gen], grid.p_max[gen], 1.0)
        dp_domega = -cfg.alpha[gen] * kg
        dp_dlam = np.zeros(g)
        dp_ds = (cfg.agc_share * kg)[:, None] * cfg.agc_routing
    else:
        raw = -cfg.alpha[gen] * (omega[gen] + lam[gen])
        kg = _gain(raw, grid.p_min[gen], grid.p_max[gen], cfg.alpha[gen])
        dp_domega = -kg
        dp_dlam = -kg if "lam" in sl else np.zeros(g)
        dp_ds = None
    part_l = cfg.participates[load] & (cfg.kind != ctl.AGC)
    raw_l = -cfg.alpha[load] * (omega[load] + lam[load])
    kl = np.where(part_l, _gain(raw_l, grid.p_min[load], grid.p_max[load], cfg.alpha[load]), 0.0)

    def dp_gen_into(row_slice, scale):
        """Add scale * d(p_G) to rows ``row_slice``."""
        rows = np.arange(N)[row_slice]
        fx[rows, np.arange(N)[cols("omega")]] += scale * dp_domega
        if "lam" in sl:
            fx[rows, np.arange(N)[cols("lam")][gen]] += scale * dp_dlam
        if dp_ds is not None:
            fx[np.ix_(rows, np.arange(N)[cols("s")])] += scale[:, None] * dp_ds

    # mw_dot = (-D omega - outflow + inj + r)_G + pm ; rows as (g, N) and (g, nl)
    mw_x = np.zeros((g, N))
    mw_x[:, cols("theta")] = -Lt[gen]
    mw_x[np.arange(g), np.arange(N)[cols("omega")]] = -grid.D[gen]
    mw_x[np.arange(g), np.arange(N)[cols("pm")]] = 1.0

    # theta
    th = np.arange(N)[cols("theta")]
    fx[th[gen], np.arange(N)[cols("omega")]] = 1.0
    fz[th[load], np.arange(nl)] = 1.0
    # omega_G
    fx[cols("omega")] = mw_x / grid.M[:, None]
    # turbine / governor
    pm_rows = np.arange(N)[cols("pm")]
    if system.turbine is TurbineModel.SECOND_ORDER:
        v_rows = np.arange(N)[cols("v")]
        fx[pm_rows, v_rows] = 1.0 / grid.Tt
        fx[pm_rows, pm_rows] = -1.0 / grid.Tt
        fx[v_rows, v_rows] = -1.0 / grid.Tg
        dp_gen_into(cols("v"), 1.0 / grid.Tg)
    else:
        fx[pm_rows, pm_rows] = -1.0 / grid.Tt
        dp_gen_into(cols("pm"), 1.0 / grid.Tt)

    if cfg.kind in (ctl.UC, ctl.DUC):
        lam_rows = np.arange(N)[cols("lam")]
        phi_cols = np.arange(N)[cols("phi")]
        phi = x[sl["phi"]]
        Fh = (grid.B * np.cos(phi[grid.src] - phi[grid.dst]))[:, None] * C.T
        Kl = cfg.K_lambda
        # imbalance = D omega + outflow - outflow_hat (+ mw_dot at G) [+ DUC terms]
        imb_x = np.zeros((n, N))
        imb_z = np.zeros((n, nl))
        imb_x[gen, np.arange(N)[cols("omega")]] = grid.D[gen]
        imb_z[load, np.arange(nl)] = grid.D[load]
        imb_x[:, cols("theta")] += Lt
        imb_x[:, cols("phi")] -= C @ Fh
        imb_x[gen] += mw_x
        if cfg.kind == ctl.DUC:
            u_raw = -cfg.alpha * lam
            ku = np.where(cfg.participates, _gain(u_raw, grid.p_min, grid.p_max, cfg.alpha), 0.0)
            imb_x[np.arange(n), lam_rows] += -ku
            imb_x[gen, np.arange(N)[cols("pm_hat")]] -= 1.0
            # - p_L, with p_L = clip(-alpha (omega_L + lam_L))
            imb_z[load, np.arange(nl)] += kl
            imb_x[load, lam_rows[load]] += kl
        fx[lam_rows] = Kl[:, None] * imb_x
        fz[lam_rows] = Kl[:, None] * imb_z
        # phi
        W = C * grid.B[None, :]                                       # C diag(B)
        fx[np.ix_(phi_cols, lam_rows)] = cfg.K_phi[:, None] * (W @ C.T)
        if "rho_plus" in sl:
            masks = _active_masks(system, x, active)
            for name, sign in (("rho_plus", -1.0), ("rho_minus", 1.0)):
                rc = np.arange(N)[cols(name)]
                fx[np.ix_(phi_cols, rc)] = sign * cfg.K_phi[:, None] * W
                K = cfg.K_rho_plus if name == "rho_plus" else cfg.K_rho_minus
                open_ = masks[name]
                dsign = 1.0 if name == "rho_plus" else -1.0
                fx[np.ix_(rc[open_], phi_cols)] = dsign * K[open_, None] * Fh[open_]
        if "pi" in sl:
            pc = np.arange(N)[cols("pi")]
            T = grid.tie_matrix()
            fx[np.ix_(phi_cols, pc)] = -cfg.K_phi[:, None] * (W @ T.T)
            fx[np.ix_(pc, phi_cols)] = cfg.K_pi[:, None] * (T @ Fh)
        if cfg.kind == ctl.DUC:
            ph = np.arange(N)[cols("pm_hat")]
            vh = np.arange(N)[cols("v_hat")]
            fx[ph, vh] = 1.0 / cfg.Tt_hat
            fx[ph, ph] = -1.0 / cfg.Tt_hat
            fx[vh, vh] = -1.0 / cfg.Tg_hat
            dp_gen_into(cols("v_hat"), 1.0 / cfg.Tg_hat)
    elif cfg.kind == ctl.AGC:
        sc = np.arange(N)[cols("s")]
        R = cfg.agc_routing
        fx[np.ix_(sc, np.arange(N)[cols("omega")])] = -cfg.K_agc * (cfg.agc_bias / R.sum(axis=0))[:, None] * R.T
        if cfg.area_control:
            fx[np.ix_(sc, np.arange(N)[cols("theta")])] = -cfg.K_agc * (grid.tie_matrix() @ F)

    # algebraic block: g = -D_L z - outflow_L + p_L + inj + r
    gx = np.zeros((nl, N))
    gx[:, cols("theta")] = -Lt[load]
    gz = np.diag(-grid.D[load] - kl)
    if "lam" in sl:
        gx[np.arange(nl), np.arange(N)[cols("lam")][load]] += -kl
    if nl:
        try:
            A = fx - fz @ np.linalg.solve(gz, gx)
        except np.linalg.LinAlgError as exc:
            raise LinearizationError("load-bus block is singular (zero damping at a load bus?)") from exc
        if not np.all(np.isfinite(A)):
            raise LinearizationError("load-bus block is singular (zero damping at a load bus?)")
    else:
        A = fx
    return A, (fx, fz, gx, gz)


def _active_masks(system, x, active):
    masks = {}
    for name in ("rho_plus", "rho_minus"):
        if active is not None and name in active:
            masks[name] = np.asarray(active[name], dtype=bool)
        else:
            masks[name] = x[system.slices[name]] > 0
    return masks


def retained_states(system, x, active=None):
    """Indices kept in the linear model: everything except closed projection gates."""
    keep = np.ones(system.size, dtype=bool)
    if "rho_plus" in system.slices:
        masks = _active_masks(system, x, active)
        for name in ("rho_plus", "rho_minus"):
            keep[system.slices[name]] = masks[name]
    return np.flatnonzero(keep)


def reference_reduction(system, states):
    """Maps (P, E) with ``A_red = P A E`` removing the reference angle modes."""
    ref = system.grid.ref_index
    refs = [system.slices[nm].start + ref for nm in ("theta", "phi") if nm in system.slices]
    kept = [i for i in states if i not in refs]
    pos = {s: k for k, s in enumerate(states)}
    P = np.zeros((len(kept), len(states)))
    E = np.zeros((len(states), len(kept)))
    for k, i in enumerate(kept):
        P[k, pos[i]] = 1.0
        E[pos[i], k] = 1.0
    for nm in ("theta", "phi"):
        if nm not in system.slices:
            continue
        sl = system.slices[nm]
        r0 = sl.start + ref
        for k, i in enumerate(kept):
            if sl.start <= i < sl.stop:
                P[k, pos[r0]] = -1.0
    return P, E, kept


def linearize(system, equilibrium, active=None, t=np.inf, tol=1e-8):
    """Linear model of the closed loop about ``equilibrium``."""
    x = np.asarray(equilibrium, dtype=float)
    res = np.max(np.abs(system.rhs(t, x)))
    if res > tol:
        raise LinearizationError(f"not an equilibrium: residual {res:.3e} > {tol:.1e}")
    A_full, _ = jacobian(system, x, t, active)
    states = retained_states(system, x, active)
    A_kept = A_full[np.ix_(states, states)]
    P, E, kept = reference_reduction(system, states)
    return LinearModel(P @ A_kept @ E, [system.labels[i] for i in kept], x,
                       full_A=A_kept, full_labels=[system.labels[i] for i in states], states=states)


def finite_difference_jacobian(system, x, t=np.inf, step=1e-6, states=None):
    """Central-difference Jacobian of ``system.rhs`` restricted to ``states``."""
    x = np.asarray(x, dtype=float)
    states = np.arange(system.size) if states is None else np.asarray(states)
    J = np.zeros((len(states), len(states)))
    for k, i in enumerate(states):
        e = np.zeros(system.size)
        e[i] = step
        J[:, k] = (system.rhs(t, x + e)[states] - system.rhs(t, x - e)[states]) / (2 * step)
    return J


# -- spectra ----------------------------------------------------------------

def eigenvalues(model, tol=1e-8):
    A = model.A if isinstance(model, LinearModel) else np.asarray(model, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("system matrix has non-finite entries")
    try:
        w = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(str(exc)) from exc
    w = w[np.lexsort((w.imag, -w.real))]
    abscissa = float(np.max(w.real)) if len(w) else -np.inf
    if abscissa > tol:
        kind = UNSTABLE
    elif abscissa >= -tol:
        kind = MARGINAL
    else:
        kind = STABLE
    return EigenReport(w, abscissa, kind, int(np.sum(w.real > tol)), tol)


def spectrum(grid, config, turbine=TurbineModel.SECOND_ORDER, disturbance=None):
    """Eigen-report of the closed loop about its uncongested equilibrium."""
    system = ClosedLoop(grid, config, turbine, disturbance)
    x = analytic_equilibrium(system)
    return eigenvalues(linearize(system, x))


def gain_sweep(grid, config, scales, turbine=TurbineModel.SECOND_ORDER, disturbance=None):
    """Spectral abscissa of the closed loop with every controller gain scaled.

    Returns a list of ``(scale, abscissa)`` in increasing scale order.
    """
    scales = sorted(float(s) for s in scales)
    if any(s <= 0 for s in scales):
        raise ValueError("gain scales must be positive")
    return [(s, spectrum(grid, config.scaled(s), turbine, disturbance).abscissa) for s in scales]


def plant_only_abscissa(grid, turbine=TurbineModel.SECOND_ORDER, alpha=None):
    """Abscissa of the plant with frozen multipliers (pure droop feedback)."""
    cfg = ctl.ControllerConfig(kind=ctl.DROOP, alpha=alpha)
    return spectrum(grid, cfg, turbine).abscissa
