"""
Unified controller (UC), its decoupled variant (DUC) and baseline AGC/droop.

Every controller here is a pure function of the measured physical quantities
and its own state. Sums over lines are written with the bus-line incidence
matrix ``C`` (+1 at the from-bus, -1 at the to-bus), so the virtual-angle
update reads ``C diag(B) (C^T lam - rho_plus + rho_minus - T^T pi)``, where
``T`` is the signed area/tie-line matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .network import bus_outflow, line_flows

UC = "UC"
DUC = "DUC"
AGC = "AGC"
DROOP = "droop"
KINDS = (UC, DUC, AGC, DROOP)


def project(x, y):
    """Projection gate: ``x`` if ``y > 0`` or ``x > 0``, otherwise 0.

    Keeps a nonnegative multiplier ``y`` from being driven below zero.
    Works elementwise on arrays.
    """
    x = np.asarray(x, dtype=float)
    out = np.where((np.asarray(y) > 0) | (x > 0), x, 0.0)
    return out if out.ndim else float(out)


def virtual_flows(grid, phi):
    """Flows the controller computes from its virtual angles ``phi``."""
    return line_flows(grid, phi)


def control_command(alpha, omega, lam, p_min=-np.inf, p_max=np.inf):
    """Power command ``-alpha (omega + lam)`` clipped to the control limits."""
    return np.clip(-np.asarray(alpha) * (np.asarray(omega) + np.asarray(lam)), p_min, p_max)


@dataclass
class ControllerConfig:
    """Gains and switches of a controller.

    Scalars are broadcast to the bus/line/area/generator they belong to.
    ``alpha``, ``Tt_hat`` and ``Tg_hat`` default to the grid's own values;
    ``participation`` marks the load buses whose demand is actually
    controlled (generators always follow their command).
    """

    kind: str = UC
    K_lambda: object = 1.0
    K_phi: object = 1.0
    K_rho_plus: object = 1.0
    K_rho_minus: object = 1.0
    K_pi: object = 1.0
    alpha: object = None
    Tt_hat: object = None
    Tg_hat: object = None
    area_control: bool = False
    congestion: bool = True
    load_control: bool = True
    K_agc: float = 0.1
    agc_share: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}, expected one of {KINDS}")

    def scaled(self, factor):
        """Copy with every UC/DUC gain multiplied by ``factor``."""
        return replace(self, **{k: np.asarray(getattr(self, k), dtype=float) * factor
                                for k in ("K_lambda", "K_phi", "K_rho_plus", "K_rho_minus", "K_pi")})

    def resolve(self, grid):
        return ResolvedConfig.build(self, grid)


def _broadcast(value, size, name, default=None):
    if value is None:
        if default is None:
            raise ValueError(f"{name} is required")
        value = default
    arr = np.broadcast_to(np.asarray(value, dtype=float), (size,)).copy()
    if not np.all(arr > 0):
        raise ValueError(f"{name} must be strictly positive")
    return arr


@dataclass
class ResolvedConfig:
    """ControllerConfig with every parameter expanded to a vector."""

    kind: str
    K_lambda: np.ndarray
    K_phi: np.ndarray
    K_rho_plus: np.ndarray
    K_rho_minus: np.ndarray
    K_pi: np.ndarray
    alpha: np.ndarray
    Tt_hat: np.ndarray
    Tg_hat: np.ndarray
    participates: np.ndarray
    area_control: bool
    congestion: bool
    K_agc: float
    agc_share: np.ndarray
    agc_bias: np.ndarray
    agc_routing: np.ndarray
    source: ControllerConfig = field(repr=False)

    @classmethod
    def build(cls, cfg, grid):
        n, m, g = grid.n, grid.m, len(grid.gen_idx)
        participates = np.ones(n, dtype=bool)
        if not cfg.load_control:
            participates[grid.load_idx] = False
        alpha = _broadcast(cfg.alpha, n, "alpha", grid.column("alpha"))
        if cfg.agc_share is None:
            share = np.maximum(grid.p_max[grid.gen_idx], 0.0)
            share = share if share.sum() > 0 and np.all(np.isfinite(share)) else np.ones(g)
        else:
            share = np.broadcast_to(np.asarray(cfg.agc_share, dtype=float), (g,)).copy()
        # frequency bias per area: natural response of droop plus damping
        areas = grid.areas or ()
        if cfg.area_control and areas:
            bias = np.array([sum(alpha[grid.index(b)] * participates[grid.index(b)] + grid.D[grid.index(b)]
                                 for b in a.buses) for a in areas])
            routing = np.zeros((g, len(areas)))
            gen_ids = [grid.buses[i].id for i in grid.gen_idx]
            for k, a in enumerate(areas):
                members = set(a.buses)
                routing[[j for j, b in enumerate(gen_ids) if b in members], k] = 1.0
            if np.any(routing.sum(axis=0) == 0):
                raise ValueError("every area needs at least one generator for AGC")
        else:
            bias = np.array([np.sum(alpha * participates) + np.sum(grid.D)])
            routing = np.ones((g, 1))
        # shares sum to one within each area
        share = share / (routing @ (routing.T @ share))
        if not cfg.K_agc > 0:
            raise ValueError("K_agc must be strictly positive")
        return cls(
            kind=cfg.kind,
            K_lambda=_broadcast(cfg.K_lambda, n, "K_lambda"),
            K_phi=_broadcast(cfg.K_phi, n, "K_phi"),
            K_rho_plus=_broadcast(cfg.K_rho_plus, m, "K_rho_plus"),
            K_rho_minus=_broadcast(cfg.K_rho_minus, m, "K_rho_minus"),
            K_pi=_broadcast(cfg.K_pi, len(grid.areas), "K_pi") if grid.areas else np.zeros(0),
            alpha=alpha,
            Tt_hat=_broadcast(cfg.Tt_hat, g, "Tt_hat", grid.Tt),
            Tg_hat=_broadcast(cfg.Tg_hat, g, "Tg_hat", grid.Tg),
            participates=participates,
            area_control=bool(cfg.area_control and grid.areas),
            congestion=cfg.congestion,
            K_agc=float(cfg.K_agc),
            agc_share=share,
            agc_bias=bias,
            agc_routing=routing,
            source=cfg,
        )


@dataclass
class ControllerState:
    """Internal variables of UC/DUC/AGC. Unused fields stay empty arrays."""

    lam: np.ndarray
    phi: np.ndarray
    rho_plus: np.ndarray
    rho_minus: np.ndarray
    pi: np.ndarray
    pm_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    s: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def initial(cls, grid, cfg, theta0, p0=None):
        """Pre-disturbance controller state.

        Multipliers start at zero; the virtual angles start at the physical
        equilibrium angles so that virtual and physical flows agree.
        """
        g = len(grid.gen_idx)
        p0 = np.zeros(grid.n) if p0 is None else np.asarray(p0, dtype=float)
        n_areas = len(grid.areas) if cfg.area_control else 0
        return cls(
            lam=np.zeros(grid.n),
            phi=np.array(theta0, dtype=float),
            rho_plus=np.zeros(grid.m),
            rho_minus=np.zeros(grid.m),
            pi=np.zeros(n_areas),
            pm_hat=p0[grid.gen_idx].copy() if cfg.kind == DUC else np.zeros(0),
            v_hat=p0[grid.gen_idx].copy() if cfg.kind == DUC else np.zeros(0),
            s=np.zeros(len(cfg.agc_bias)) if cfg.kind == AGC else np.zeros(0),
        )


@dataclass
class Measurements:
    """Local quantities the controller agents observe.

    ``mw_dot`` is the generator net-torque term ``M_i d(omega_i)/dt``;
    ``p`` the commands actually applied.
    """

    omega: np.ndarray
    flows: np.ndarray
    mw_dot: np.ndarray
    p: np.ndarray


def _network_terms(grid, cfg, ctrl, schedule):
    """Virtual flows and the shared (phi, rho, pi) derivatives of UC and DUC."""
    P_hat = virtual_flows(grid, ctrl.phi)
    mult = grid.incidence.T @ ctrl.lam
    if cfg.congestion:
        mult = mult - ctrl.rho_plus + ctrl.rho_minus
        d_rho_plus = cfg.K_rho_plus * project(P_hat - grid.P_max, ctrl.rho_plus)
        d_rho_minus = cfg.K_rho_minus * project(grid.P_min - P_hat, ctrl.rho_minus)
    else:
        d_rho_plus = np.zeros(grid.m)
        d_rho_minus = np.zeros(grid.m)
    if cfg.area_control:
        ties = grid.tie_matrix()
        mult = mult - ties.T @ ctrl.pi
        d_pi = cfg.K_pi * (ties @ P_hat - schedule)
    else:
        d_pi = np.zeros(len(ctrl.pi))
    d_phi = cfg.K_phi * (grid.incidence @ (grid.B * mult))
    return P_hat, d_phi, d_rho_plus, d_rho_minus, d_pi


def uc_rhs(grid, cfg, ctrl, meas, schedule=None):
    """Time derivatives of the UC state ``(lam, phi, rho+, rho-, pi)``."""
    P_hat, d_phi, d_rp, d_rm, d_pi = _network_terms(grid, cfg, ctrl, schedule)
    imbalance = grid.D * meas.omega + bus_outflow(grid, meas.flows - P_hat)
    imbalance[grid.gen_idx] += meas.mw_dot
    d_lam = cfg.K_lambda * imbalance
    return d_lam, d_phi, d_rp, d_rm, d_pi


def virtual_command(cfg, grid, lam):
    """Command the DUC assumes each bus settles at, ``-alpha lam`` clipped.

    Buses that do not follow their command (opted-out loads) contribute 0.
    """
    u = np.clip(-cfg.alpha * lam, grid.p_min, grid.p_max)
    return np.where(cfg.participates, u, 0.0)


def duc_rhs(grid, cfg, ctrl, meas, schedule=None):
    """Time derivatives of the DUC state ``(lam, phi, rho+, rho-, pi, pm_hat, v_hat)``.

    Relative to UC, the multiplier update subtracts the virtual command and
    the emulated mechanical power (generators) or applied command (loads),
    which leaves only the disturbance estimate as the link to the plant.
    """
    P_hat, d_phi, d_rp, d_rm, d_pi = _network_terms(grid, cfg, ctrl, schedule)
    gen, load = grid.gen_idx, grid.load_idx
    u = virtual_command(cfg, grid, ctrl.lam)
    imbalance = grid.D * meas.omega + bus_outflow(grid, meas.flows - P_hat) + u
    imbalance[gen] += meas.mw_dot - ctrl.pm_hat
    imbalance[load] -= meas.p[load]
    d_lam = cfg.K_lambda * imbalance
    d_pm_hat = (ctrl.v_hat - ctrl.pm_hat) / cfg.Tt_hat
    d_v_hat = (meas.p[gen] - ctrl.v_hat) / cfg.Tg_hat
    return d_lam, d_phi, d_rp, d_rm, d_pi, d_pm_hat, d_v_hat


def estimate_disturbance(grid, omega, flows, p, side, mw_dot=None):
    """Disturbance seen from local measurements.

    ``side="load"`` returns ``D omega + outflow - p`` (the disturbance at a
    load bus, on top of its nominal injection). ``side="generator"`` returns
    the lumped ``r + p_M`` term ``M omega_dot + D omega + outflow``. The
    nominal injection is removed in both cases.
    """
    out = bus_outflow(grid, flows)
    base = grid.D * omega + out - grid.injection
    if side == "load":
        idx = grid.load_idx
        return (base - p)[idx]
    if side == "generator":
        if mw_dot is None:
            raise ValueError("generator-side estimate needs the M*omega_dot measurement")
        return base[grid.gen_idx] + mw_dot
    raise ValueError(f"side must be 'load' or 'generator', got {side!r}")


def agc_commands(grid, cfg, omega, s):
    """Generator commands of the AGC baseline: droop plus a share of the integral."""
    gen = grid.gen_idx
    p = -cfg.alpha[gen] * omega[gen] + cfg.agc_share * (cfg.agc_routing @ s)
    return np.clip(p, grid.p_min[gen], grid.p_max[gen])


def agc_rhs(grid, cfg, omega, flows, s, schedule=None):
    """Integral of the area control error and the resulting generator commands.

    ACE is the frequency bias term ``beta * mean(omega)`` over each area's
    generators, plus the tie-line deviation when area control is enabled.
    """
    gen = grid.gen_idx
    R = cfg.agc_routing
    ace = cfg.agc_bias * (R.T @ omega[gen]) / R.sum(axis=0)
    if cfg.area_control:
        ace = ace + grid.tie_matrix() @ flows - schedule
    d_s = -cfg.K_agc * ace
    return d_s, agc_commands(grid, cfg, omega, s)
