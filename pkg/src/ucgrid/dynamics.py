"""
Physical plant (swing equations with turbine-governor lags) and its joint
integration with a controller.

Generator buses carry ``(theta, omega, p_M, v)``; load buses carry only
``theta``, their frequency being fixed at every instant by the algebraic
power balance, which is linear in ``omega`` and is solved in closed form.
``p``, ``p_M`` and ``v`` are deviations from the pre-disturbance dispatch;
the pre-disturbance injection lives in ``GridModel.injection``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import controller as ctl
from .network import bus_outflow, line_flows, solve_equilibrium


class TurbineModel(enum.Enum):
    SECOND_ORDER = "second-order"
    FIRST_ORDER = "first-order"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


class NumericalError(FloatingPointError):
    """A state variable became NaN or infinite during integration."""


@dataclass
class PhysicalState:
    theta: np.ndarray
    omega: np.ndarray
    pm: np.ndarray
    v: np.ndarray


@dataclass
class Disturbance:
    """Step changes ``(time, bus id, delta r)``; steps are right-continuous."""

    steps: list = field(default_factory=list)

    def __post_init__(self):
        self.steps = sorted((float(t), b, float(dr)) for t, b, dr in self.steps)
        if any(t < 0 for t, _, _ in self.steps):
            raise ValueError("disturbance times must be nonnegative")

    def at(self, grid, t):
        r = np.zeros(grid.n)
        for ts, bus, dr in self.steps:
            if ts <= t:
                r[grid.index(bus)] += dr
        return r

    def final(self, grid):
        return self.at(grid, np.inf)

    @property
    def times(self):
        return sorted({t for t, _, _ in self.steps})


def physical_rhs(grid, state, p, r, kind=TurbineModel.SECOND_ORDER):
    """Derivatives of ``(theta, omega_G, p_M, v)``.

    ``state.omega`` holds every bus and must already satisfy the load-bus
    balance; ``p`` and ``r`` are per-bus vectors.
    """
    gen = grid.gen_idx
    out = bus_outflow(grid, line_flows(grid, state.theta))
    d_theta = np.array(state.omega, dtype=float)
    mw_dot = (-grid.D * state.omega - out + grid.injection + r)[gen] + state.pm
    d_omega = mw_dot / grid.M
    if kind is TurbineModel.SECOND_ORDER:
        d_pm = (state.v - state.pm) / grid.Tt
        d_v = (p[gen] - state.v) / grid.Tg
    else:
        d_pm = (p[gen] - state.pm) / grid.Tt
        d_v = np.zeros(len(state.v))
    return d_theta, d_omega, d_pm, d_v


def solve_load_buses(grid, theta, p, r):
    """Load-bus frequencies from ``0 = -D w - outflow + p + r`` (plus nominal injection)."""
    load = grid.load_idx
    D = grid.D[load]
    if np.any(D <= 0):
        bad = [grid.buses[i].id for i in load[D <= 0]]
        raise ValueError(f"load buses {bad} have zero damping; their balance cannot fix omega")
    out = bus_outflow(grid, line_flows(grid, theta))
    return ((-out + grid.injection + r + p)[load]) / D


def _load_omega_with_control(D, alpha, lam, c, lo, hi):
    """Solve ``0 = -D w + c + clip(-alpha (w + lam), lo, hi)`` for w.

    The right-hand side is strictly decreasing in w, so the root is the
    unclipped one unless its command leaves the band.
    """
    w = (c - alpha * lam) / (D + alpha)
    p = -alpha * (w + lam)
    high, low = p > hi, p < lo
    w = np.where(high, (c + hi) / D, np.where(low, (c + lo) / D, w))
    p = np.where(high, hi, np.where(low, lo, p))
    return w, p


class ClosedLoop:
    """Plant plus controller as one ODE on a flat state vector.

    The layout depends on the turbine model (``v`` only for second order)
    and the controller kind; ``labels`` names every entry.
    """

    def __init__(self, grid, config, turbine=TurbineModel.SECOND_ORDER, disturbance=None):
        self.grid = grid
        self.config = config
        self.cfg = config.resolve(grid) if isinstance(config, ctl.ControllerConfig) else config
        self.turbine = TurbineModel.parse(turbine)
        self.disturbance = disturbance or Disturbance()
        self.theta0, self.flows0 = solve_equilibrium(grid, grid.injection, tol=1e-12)
        self.schedule = self._schedule()
        self._build_layout()
        self._build_kernel()

    def _schedule(self):
        grid = self.grid
        if not grid.areas:
            return np.zeros(0)
        pre = grid.tie_matrix() @ self.flows0
        return np.array([pre[k] if a.schedule is None else a.schedule for k, a in enumerate(grid.areas)])

    def _build_layout(self):
        grid, cfg = self.grid, self.cfg
        n, m, g = grid.n, grid.m, len(grid.gen_idx)
        ids = grid.bus_ids
        gen_ids = [ids[i] for i in grid.gen_idx]
        names = [l.name for l in grid.lines]
        blocks = [("theta", [f"theta[{i}]" for i in ids]),
                  ("omega", [f"omega[{i}]" for i in gen_ids]),
                  ("pm", [f"pm[{i}]" for i in gen_ids])]
        if self.turbine is TurbineModel.SECOND_ORDER:
            blocks.append(("v", [f"v[{i}]" for i in gen_ids]))
        if cfg.kind in (ctl.UC, ctl.DUC):
            blocks += [("lam", [f"lam[{i}]" for i in ids]), ("phi", [f"phi[{i}]" for i in ids])]
            if cfg.congestion:
                blocks += [("rho_plus", [f"rho+[{e}]" for e in names]),
                           ("rho_minus", [f"rho-[{e}]" for e in names])]
            if cfg.area_control:
                blocks.append(("pi", [f"pi[{a.id}]" for a in grid.areas]))
            if cfg.kind == ctl.DUC:
                blocks += [("pm_hat", [f"pm_hat[{i}]" for i in gen_ids]),
                           ("v_hat", [f"v_hat[{i}]" for i in gen_ids])]
        elif cfg.kind == ctl.AGC:
            blocks.append(("s", [f"s[{k}]" for k in range(len(cfg.agc_bias))]))
        self.slices = {}
        self.labels = []
        start = 0
        for name, labels in blocks:
            self.slices[name] = slice(start, start + len(labels))
            self.labels += labels
            start += len(labels)
        self.size = start
        del n, m, g

    # -- packing -----------------------------------------------------------
    def get(self, x, name):
        sl = self.slices.get(name)
        return x[sl] if sl is not None else np.zeros(0)

    def initial_state(self):
        """Pre-disturbance equilibrium: zero deviations, virtual angles = physical."""
        x = np.zeros(self.size)
        x[self.slices["theta"]] = self.theta0
        if "phi" in self.slices:
            x[self.slices["phi"]] = self.theta0
        return x

    def controller_state(self, x):
        return ctl.ControllerState(
            lam=self.get(x, "lam") if "lam" in self.slices else np.zeros(self.grid.n),
            phi=self.get(x, "phi") if "phi" in self.slices else np.zeros(self.grid.n),
            rho_plus=self.get(x, "rho_plus") if "rho_plus" in self.slices else np.zeros(self.grid.m),
            rho_minus=self.get(x, "rho_minus") if "rho_minus" in self.slices else np.zeros(self.grid.m),
            pi=self.get(x, "pi"),
            pm_hat=self.get(x, "pm_hat"),
            v_hat=self.get(x, "v_hat"),
            s=self.get(x, "s"),
        )

    def pack(self, physical, ctrl):
        """Flat vector from a physical state (generator omega taken) and controller state."""
        x = np.zeros(self.size)
        x[self.slices["theta"]] = physical.theta
        x[self.slices["omega"]] = np.asarray(physical.omega)[self.grid.gen_idx] \
            if len(physical.omega) == self.grid.n else physical.omega
        x[self.slices["pm"]] = physical.pm
        if "v" in self.slices:
            x[self.slices["v"]] = physical.v
        for name in ("lam", "phi", "rho_plus", "rho_minus", "pi", "pm_hat", "v_hat", "s"):
            if name in self.slices:
                x[self.slices[name]] = getattr(ctrl, name)
        return x

    # -- evaluation -------------------------------------------------------------
    def commands(self, x, r, flows):
        """Per-bus frequency and applied commands at state ``x``."""
        grid, cfg = self.grid, self.cfg
        gen, load = grid.gen_idx, grid.load_idx
        omega = np.empty(grid.n)
        omega[gen] = x[self.slices["omega"]]
        p = np.zeros(grid.n)
        c = (grid.injection + r - bus_outflow(grid, flows))[load]
        lam = self.get(x, "lam") if "lam" in self.slices else np.zeros(grid.n)
        if cfg.kind == ctl.AGC:
            p[gen] = ctl.agc_commands(grid, cfg, omega, self.get(x, "s"))
        else:
            p[gen] = ctl.control_command(cfg.alpha[gen], omega[gen], lam[gen],
                                         grid.p_min[gen], grid.p_max[gen])
        D = grid.D[load]
        part = cfg.participates[load] & (cfg.kind != ctl.AGC)
        w, pl = _load_omega_with_control(D, cfg.alpha[load], lam[load], c,
                                         grid.p_min[load], grid.p_max[load])
        omega[load] = np.where(part, w, c / D)
        p[load] = np.where(part, pl, 0.0)
        return omega, p

    def evaluate(self, t, x):
        """All intermediate quantities and the state derivative at ``(t, x)``."""
        grid, cfg = self.grid, self.cfg
        gen = grid.gen_idx
        r = self.disturbance.at(grid, t)
        theta = x[self.slices["theta"]]
        flows = line_flows(grid, theta)
        omega, p = self.commands(x, r, flows)
        pm = x[self.slices["pm"]]
        v = self.get(x, "v")
        out = bus_outflow(grid, flows)
        mw_dot = (-grid.D * omega - out + grid.injection + r)[gen] + pm
        dx = np.zeros(self.size)
        dx[self.slices["theta"]] = omega
        dx[self.slices["omega"]] = mw_dot / grid.M
        if self.turbine is TurbineModel.SECOND_ORDER:
            dx[self.slices["pm"]] = (v - pm) / grid.Tt
            dx[self.slices["v"]] = (p[gen] - v) / grid.Tg
        else:
            dx[self.slices["pm"]] = (p[gen] - pm) / grid.Tt
        info = dict(t=t, r=r, omega=omega, p=p, flows=flows, mw_dot=mw_dot, dx=dx)
        if cfg.kind in (ctl.UC, ctl.DUC):
            ctrl = self.controller_state(x)
            meas = ctl.Measurements(omega, flows, mw_dot, p)
            if cfg.kind == ctl.UC:
                parts = ctl.uc_rhs(grid, cfg, ctrl, meas, self.schedule)
                names = ("lam", "phi", "rho_plus", "rho_minus", "pi")
            else:
                parts = ctl.duc_rhs(grid, cfg, ctrl, meas, self.schedule)
                names = ("lam", "phi", "rho_plus", "rho_minus", "pi", "pm_hat", "v_hat")
            for name, d in zip(names, parts):
                if name in self.slices:
                    dx[self.slices[name]] = d
            info["P_hat"] = ctl.virtual_flows(grid, ctrl.phi)
        elif cfg.kind == ctl.AGC:
            d_s, _ = ctl.agc_rhs(grid, cfg, omega, flows, self.get(x, "s"), self.schedule)
            dx[self.slices["s"]] = d_s
        return info

    def rhs(self, t, x):
        """State derivative; same result as ``evaluate(t, x)["dx"]`` on a lean path."""
        k = self._k
        r = self._r_at(t)
        theta = x[k.theta]
        flows = k.B * np.sin(theta[k.src] - theta[k.dst])
        out = k.C @ flows
        omega = np.empty(k.n)
        omega[k.gen] = x[k.omega]
        lam = x[k.lam] if k.lam is not None else k.zeros_n
        c = (k.inj + r - out)[k.load]
        if k.agc:
            p_gen = ctl.agc_commands(self.grid, self.cfg, omega, x[k.s])
        else:
            p_gen = np.clip(-k.alpha_g * (omega[k.gen] + lam[k.gen]), k.pmin_g, k.pmax_g)
        w, pl = _load_omega_with_control(k.D_l, k.alpha_l, lam[k.load], c, k.pmin_l, k.pmax_l)
        omega[k.load] = np.where(k.part_l, w, c * k.invD_l)
        p_load = np.where(k.part_l, pl, 0.0)
        pm = x[k.pm]
        mw_dot = (k.inj + r - k.D * omega - out)[k.gen] + pm
        dx = np.empty(self.size)
        dx[k.theta] = omega
        dx[k.omega] = mw_dot * k.invM
        if k.second:
            v = x[k.v]
            dx[k.pm] = (v - pm) * k.invTt
            dx[k.v] = (p_gen - v) * k.invTg
        else:
            dx[k.pm] = (p_gen - pm) * k.invTt
        if k.agc:
            dx[k.s], _ = ctl.agc_rhs(self.grid, self.cfg, omega, flows, x[k.s], self.schedule)
            return dx
        if k.lam is None:
            return dx
        phi = x[k.phi]
        P_hat = k.B * np.sin(phi[k.src] - phi[k.dst])
        mult = k.CT @ lam
        if k.rho_plus is not None:
            rp, rm = x[k.rho_plus], x[k.rho_minus]
            mult = mult - rp + rm
            a = P_hat - k.Pmax
            dx[k.rho_plus] = k.Krp * np.where((rp > 0) | (a > 0), a, 0.0)
            b = k.Pmin - P_hat
            dx[k.rho_minus] = k.Krm * np.where((rm > 0) | (b > 0), b, 0.0)
        if k.pi is not None:
            mult = mult - k.TT @ x[k.pi]
            dx[k.pi] = k.Kpi * (k.T @ P_hat - self.schedule)
        dx[k.phi] = k.Kphi * (k.C @ (k.B * mult))
        imbalance = k.D * omega + out - k.C @ P_hat
        imbalance[k.gen] += mw_dot
        if k.duc:
            pm_hat, v_hat = x[k.pm_hat], x[k.v_hat]
            u = np.where(k.part, np.clip(-k.alpha * lam, k.pmin, k.pmax), 0.0)
            imbalance += u
            imbalance[k.gen] -= pm_hat
            imbalance[k.load] -= p_load
            dx[k.pm_hat] = (v_hat - pm_hat) * k.invTt_hat
            dx[k.v_hat] = (p_gen - v_hat) * k.invTg_hat
        dx[k.lam] = k.Klam * imbalance
        return dx

    def _r_at(self, t):
        i = np.searchsorted(self._r_times, t, side="right")
        return self._r_table[i]

    def _build_kernel(self):
        grid, cfg = self.grid, self.cfg
        sl = self.slices
        gen, load = grid.gen_idx, grid.load_idx
        k = SimpleNamespace(
            n=grid.n, gen=gen, load=load, src=grid.src, dst=grid.dst, B=grid.B,
            C=np.ascontiguousarray(grid.incidence), CT=np.ascontiguousarray(grid.incidence.T),
            inj=grid.injection, D=grid.D, D_l=grid.D[load], invD_l=1.0 / grid.D[load],
            invM=1.0 / grid.M, invTt=1.0 / grid.Tt, invTg=1.0 / grid.Tg,
            alpha=cfg.alpha, alpha_g=cfg.alpha[gen], alpha_l=cfg.alpha[load],
            pmin=grid.p_min, pmax=grid.p_max, pmin_g=grid.p_min[gen], pmax_g=grid.p_max[gen],
            pmin_l=grid.p_min[load], pmax_l=grid.p_max[load],
            part=cfg.participates, part_l=cfg.participates[load] & (cfg.kind != ctl.AGC),
            Pmin=grid.P_min, Pmax=grid.P_max, T=grid.tie_matrix(), TT=grid.tie_matrix().T,
            Klam=cfg.K_lambda, Kphi=cfg.K_phi, Krp=cfg.K_rho_plus, Krm=cfg.K_rho_minus, Kpi=cfg.K_pi,
            invTt_hat=1.0 / cfg.Tt_hat, invTg_hat=1.0 / cfg.Tg_hat,
            second=self.turbine is TurbineModel.SECOND_ORDER,
            agc=cfg.kind == ctl.AGC, duc=cfg.kind == ctl.DUC, zeros_n=np.zeros(grid.n))
        for name in ("theta", "omega", "pm", "v", "lam", "phi", "rho_plus", "rho_minus", "pi",
                     "pm_hat", "v_hat", "s"):
            setattr(k, name, sl.get(name))
        self._k = k
        times = self.disturbance.times
        self._r_times = np.array(times)
        self._r_table = np.array([self.disturbance.at(grid, -1.0)] +
                                 [self.disturbance.at(grid, t) for t in times])
        self._compiled = None

    def _compiled_args(self):
        if self._compiled is None:
            from . import _kernel
            grid, cfg, k = self.grid, self.cfg, self._k
            off = np.array([sl.start if sl is not None and sl.stop > sl.start else -1
                            for sl in (self.slices.get(b) for b in _kernel.BLOCKS)], dtype=np.int64)
            kind = {ctl.DROOP: _kernel.DROOP, ctl.UC: _kernel.UC, ctl.DUC: _kernel.DUC,
                    ctl.AGC: _kernel.AGC}[cfg.kind]
            f = np.ascontiguousarray
            route = cfg.agc_routing
            params = (f(k.gen, dtype=np.int64), f(k.load, dtype=np.int64), f(k.src, dtype=np.int64),
                      f(k.dst, dtype=np.int64), f(k.B), f(k.inj), f(k.D), f(k.invM), f(k.invTt), f(k.invTg),
                      f(k.alpha), f(k.pmin), f(k.pmax), f(k.part), f(k.Pmin), f(k.Pmax),
                      f(k.T.reshape(len(self.schedule), grid.m)), f(self.schedule, dtype=float),
                      f(k.Klam), f(k.Kphi), f(k.Krp), f(k.Krm), f(k.Kpi, dtype=float),
                      f(k.invTt_hat), f(k.invTg_hat), f(cfg.agc_share), f(route),
                      f(cfg.agc_bias / route.sum(axis=0)), float(cfg.K_agc))
            times = np.array(self.disturbance.times, dtype=float)
            self._compiled = (_kernel, off, kind, self.turbine is TurbineModel.SECOND_ORDER, params,
                              bool(cfg.area_control), times, f(self._r_table))
        return self._compiled

    def compiled_rhs(self, t, x):
        """``rhs`` evaluated by the compiled kernel."""
        kern, off, kind, second, params, area, times, table = self._compiled_args()
        return kern.rhs(float(t), np.asarray(x, dtype=float), off, kind, second, params, area, times, table)

    @property
    def monitor_size(self):
        return 2 * self.grid.n + self.grid.m

    def advance(self, x, t0, h, nsteps, extrema=None):
        """``nsteps`` compiled RK4 steps from ``t0``.

        ``extrema`` is an optional ``(xmin, xmax, mmin, mmax)`` tuple updated
        in place with the full-resolution range of the state and of the
        monitor vector ``[omega, p, flows]``. Returns ``(x, max load-bus
        residual, smallest line multiplier)``.
        """
        if not h > 0:
            raise ValueError("step size must be positive")
        kern, off, kind, second, params, area, times, table = self._compiled_args()
        if extrema is None:
            extrema = (np.full(self.size, np.inf), np.full(self.size, -np.inf),
                       np.full(self.monitor_size, np.inf), np.full(self.monitor_size, -np.inf))
        x = np.array(x, dtype=float)
        x, done, res, mult = kern.advance(x, float(t0), float(h), int(nsteps), off, kind, second, params,
                                          area, times, table, *extrema)
        if done < nsteps:
            self.check_finite(x, t0 + (done + 1) * h)
        return x, res, mult

    def physical_state(self, x, t=0.0):
        r = self.disturbance.at(self.grid, t)
        theta = x[self.slices["theta"]]
        omega, _ = self.commands(x, r, line_flows(self.grid, theta))
        return PhysicalState(theta.copy(), omega, x[self.slices["pm"]].copy(), self.get(x, "v").copy())

    def load_residual(self, t, x):
        """Residual of the load-bus power balance at ``(t, x)``."""
        grid = self.grid
        info = self.evaluate(t, x)
        res = -grid.D * info["omega"] - bus_outflow(grid, info["flows"]) + info["p"] + grid.injection + info["r"]
        return res[grid.load_idx]

    def enforce(self, x):
        """Re-assert multiplier nonnegativity after a step."""
        for name in ("rho_plus", "rho_minus"):
            if name in self.slices:
                sl = self.slices[name]
                np.maximum(x[sl], 0.0, out=x[sl])
        return x

    def check_finite(self, x, t):
        if not np.all(np.isfinite(x)):
            k = int(np.flatnonzero(~np.isfinite(x))[0])
            raise NumericalError(f"non-finite value in {self.labels[k]} at t = {t:.6g} s")


def rk4_step(system, x, t, h):
    """One classical Runge-Kutta step of the closed loop, with projection and NaN guard."""
    if not h > 0:
        raise ValueError("step size must be positive")
    f = system.rhs
    k1 = f(t, x)
    k2 = f(t + h / 2, x + h / 2 * k1)
    k3 = f(t + h / 2, x + h / 2 * k2)
    k4 = f(t + h, x + h * k3)
    x_new = system.enforce(x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
    system.check_finite(x_new, t + h)
    return x_new


def step(system, physical, ctrl, t, h):
    """Advance ``(PhysicalState, ControllerState)`` from ``t`` to ``t + h``."""
    x = rk4_step(system, system.pack(physical, ctrl), t, h)
    return system.physical_state(x, t + h), system.controller_state(x)


def integrate(system, x0, t0, t1, h, callback=None):
    """Fixed-step RK4 from ``t0`` to ``t1``; ``callback(k, t, x)`` after every step."""
    n_steps = int(round((t1 - t0) / h))
    x = np.array(x0, dtype=float)
    for k in range(1, n_steps + 1):
        t = t0 + (k - 1) * h
        x = rk4_step(system, x, t, h)
        if callback is not None:
            callback(k, t0 + k * h, x)
    return x
