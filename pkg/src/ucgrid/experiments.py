"""
Scenario files, time-domain runs, robustness sweeps and eigen-studies.

A scenario is a TOML file::

    name = "step-loss"
    grid = "ieee39.toml"        # next to the scenario, or a packaged data file
    turbine = "second-order"
    horizon = 150.0
    step = 0.001
    record = 0.01               # recording interval, a multiple of step
    settling_tol = 1e-3
    outputs = ["lam[34]", "omega[*]", "flow[16-19]"]

    [controller]
    kind = "DUC"
    K_lambda = 0.0477
    ...

    [[disturbance]]
    t = 1.0
    bus = 38
    dr = -7.35

Optional tables: ``[[line_limit]]`` (``line = [i, j]``, ``P_max``,
``P_min``) overrides limits of the grid file, ``[eigen]`` holds the gain
scale and variants of an eigen-study, ``[sweep]`` the emulator factors of a
robustness sweep.
"""

from __future__ import annotations

import math
import os
import re
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import controller as ctl
from . import oracle as orc
from . import stability as st
from .dynamics import ClosedLoop, Disturbance, NumericalError, TurbineModel
from .network import GridError, data_path, line_flows, load_grid

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MIN_RECORD = 0.01


class ScenarioError(ValueError):
    """A scenario file is malformed or inconsistent with its grid."""


@dataclass
class Scenario:
    grid_file: str
    controller: ctl.ControllerConfig
    disturbance: Disturbance = field(default_factory=Disturbance)
    turbine: TurbineModel = TurbineModel.SECOND_ORDER
    horizon: float = 60.0
    step: float = 1e-3
    record: float = MIN_RECORD
    outputs: list = field(default_factory=lambda: ["omega[*]"])
    focus: str = None
    settling_tol: float = 1e-3
    oscillation_window: float = 5.0
    oscillation_ratio: float = 0.8
    oscillation_factor: float = 10.0
    emulator_factors: tuple = (1.0, 1.0)
    line_limits: dict = field(default_factory=dict)
    all_generator: bool = False
    gain_scale: float = 1.0
    variants: list = field(default_factory=list)
    sweep_factors: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    name: str = "scenario"

    def __post_init__(self):
        self.turbine = TurbineModel.parse(self.turbine)
        self.validate()

    def validate(self):
        for attr in ("horizon", "step", "record", "settling_tol", "oscillation_window"):
            value = getattr(self, attr)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ScenarioError(f"{attr} must be a positive number, got {value!r}")
        if self.step > self.horizon / 100:
            raise ScenarioError(f"step {self.step} exceeds horizon/100 = {self.horizon / 100}")
        if self.record < MIN_RECORD - 1e-12:
            raise ScenarioError(f"record interval must be at least {MIN_RECORD} s")
        ratio = self.record / self.step
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ScenarioError("record interval must be a multiple of step")
        if any(f <= 0 for f in self.emulator_factors) or len(self.emulator_factors) != 2:
            raise ScenarioError("emulator_factors needs two positive multipliers (Tt, Tg)")
        if not self.outputs:
            raise ScenarioError("at least one output is required")
        if self.gain_scale <= 0:
            raise ScenarioError("gain_scale must be positive")

    def with_controller(self, **changes):
        """Copy with controller fields replaced (e.g. ``kind="DUC"``)."""
        return replace(self, controller=replace(self.controller, **changes))

    def load_grid(self):
        grid = load_grid(self.grid_file)
        if self.line_limits:
            try:
                grid = grid.with_lines(P_max={k: v[1] for k, v in self.line_limits.items()},
                                       P_min={k: v[0] for k, v in self.line_limits.items()})
            except KeyError as exc:
                raise ScenarioError(f"line_limit refers to an unknown line: {exc}") from exc
        if self.all_generator:
            grid = grid.all_generator()
        return grid

    def resolved_controller(self, grid):
        """Controller with the emulator factors applied to the grid's time constants."""
        cfg = self.controller
        ft, fg = self.emulator_factors
        if cfg.kind == ctl.DUC and (ft, fg) != (1.0, 1.0):
            base_t = grid.Tt if cfg.Tt_hat is None else np.asarray(cfg.Tt_hat, dtype=float)
            base_g = grid.Tg if cfg.Tg_hat is None else np.asarray(cfg.Tg_hat, dtype=float)
            cfg = replace(cfg, Tt_hat=base_t * ft, Tg_hat=base_g * fg)
        return cfg

    def system(self):
        grid = self.load_grid()
        for _, bus, _ in self.disturbance.steps:
            try:
                grid.index(bus)
            except (KeyError, ValueError) as exc:
                raise ScenarioError(f"disturbance at unknown bus {bus}") from exc
        try:
            return ClosedLoop(grid, self.resolved_controller(grid), self.turbine, self.disturbance)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc


def _resolve_path(value, base):
    path = Path(value)
    if not path.is_absolute() and base is not None and (Path(base) / path).exists():
        return str(Path(base) / path)
    if path.exists():
        return str(path)
    packaged = data_path(value)
    if not packaged.exists():
        raise ScenarioError(f"grid file {value!r} not found")
    return str(packaged)


def scenario_from_dict(doc, base=None):
    doc = dict(doc)
    known = {"name", "grid", "turbine", "horizon", "step", "record", "outputs", "focus", "settling_tol",
             "oscillation_window", "oscillation_ratio", "oscillation_factor", "emulator_factors",
             "all_generator", "controller", "disturbance", "line_limit", "eigen", "sweep"}
    unknown = set(doc) - known
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    if "grid" not in doc:
        raise ScenarioError("scenario needs a grid file")
    cdoc = dict(doc.get("controller", {}))
    try:
        cfg = ctl.ControllerConfig(**cdoc)
    except TypeError as exc:
        raise ScenarioError(f"bad controller table: {exc}") from exc
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    try:
        steps = [(float(d["t"]), int(d["bus"]), float(d["dr"])) for d in doc.get("disturbance", [])]
        dist = Disturbance(steps)
    except (KeyError, ValueError, TypeError) as exc:
        raise ScenarioError(f"bad disturbance entry: {exc}") from exc
    limits = {}
    for entry in doc.get("line_limit", []):
        try:
            a, b = entry["line"]
            limits[(int(a), int(b))] = (float(entry.get("P_min", -entry["P_max"])), float(entry["P_max"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ScenarioError(f"bad line_limit entry: {exc}") from exc
    eigen = doc.get("eigen", {})
    sweep = doc.get("sweep", {})
    kwargs = {k: doc[k] for k in ("horizon", "step", "record", "outputs", "focus", "settling_tol",
                                  "oscillation_window", "oscillation_ratio", "oscillation_factor",
                                  "all_generator", "name") if k in doc}
    if "emulator_factors" in doc:
        kwargs["emulator_factors"] = tuple(float(f) for f in doc["emulator_factors"])
    try:
        return Scenario(
            grid_file=_resolve_path(doc["grid"], base), controller=cfg, disturbance=dist,
            turbine=doc.get("turbine", "second-order"), line_limits=limits,
            gain_scale=float(eigen.get("gain_scale", 1.0)),
            variants=[(k, TurbineModel.parse(t)) for k, t in eigen.get("variants", [])],
            sweep_factors=[float(f) for f in sweep.get("factors", [0.5, 1.0, 2.0])],
            **kwargs)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path):
    path = Path(path)
    if not path.exists():
        packaged = data_path(str(Path("scenarios") / path.name))
        if not packaged.exists():
            raise ScenarioError(f"scenario file {str(path)!r} not found")
        path = packaged
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    doc.setdefault("name", path.stem)
    return scenario_from_dict(doc, base=path.parent)


# -- output selection --------------------------------------------------------

_SELECTOR = re.compile(r"^(\w+[+-]?)\[(.+)\]$")
_MONITOR = ("omega", "p", "flow")
_STATE_BLOCKS = ("theta", "pm", "v", "lam", "phi", "rho+", "rho-", "pi", "pm_hat", "v_hat", "s")


def resolve_outputs(system, selectors):
    """Map selectors like ``lam[34]``, ``flow[16-19]`` or ``omega[*]`` to
    ``(label, source, index)`` with source ``"x"`` (state), ``"mon"``
    (frequency, command, flow) or ``"nan"`` (state absent in this layout)."""
    grid = system.grid
    n = grid.n
    ids = grid.bus_ids
    lines = [l.name for l in grid.lines]
    out = []
    for sel in selectors:
        m = _SELECTOR.match(sel.strip())
        if not m:
            raise ScenarioError(f"bad output selector {sel!r}")
        name, arg = m.group(1), m.group(2).strip()
        if name in _MONITOR:
            keys = lines if name == "flow" else [str(i) for i in ids]
            offset = {"omega": 0, "p": n, "flow": 2 * n}[name]
            wanted = keys if arg == "*" else [arg]
            for key in wanted:
                if key not in keys:
                    raise ScenarioError(f"output {sel!r}: no such {'line' if name == 'flow' else 'bus'} {key}")
                out.append((f"{name}[{key}]", "mon", offset + keys.index(key)))
            continue
        labels = [l for l in system.labels if l.startswith(name + "[")]
        if not labels:
            if name in _STATE_BLOCKS:
                # block of another controller or plant order: keep the column, fill with NaN
                out.append((sel.strip(), "nan", -1))
                continue
            raise ScenarioError(f"output {sel!r}: unknown variable {name!r}")
        wanted = labels if arg == "*" else [f"{name}[{arg}]"]
        for label in wanted:
            if label not in system.labels:
                raise ScenarioError(f"output {sel!r}: no state {label}")
            out.append((label, "x", system.labels.index(label)))
    return out


# -- metrics -----------------------------------------------------------------

def detect_oscillation(t, y, window, tol, ratio_threshold=0.8, factor=10.0):
    """Peak-to-peak amplitude of the last window against the one before.

    Returns ``(oscillating, ratio)``; oscillating iff the ratio exceeds
    ``ratio_threshold`` and the last amplitude exceeds ``factor * tol``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) != len(y) or len(t) < 3 or t[-1] - t[0] < 2 * window:
        raise ValueError("series shorter than two oscillation windows")
    end = t[-1]
    last = y[t > end - window]
    prev = y[(t > end - 2 * window) & (t <= end - window)]
    a_last = float(np.ptp(last))
    a_prev = float(np.ptp(prev))
    if a_prev == 0.0:
        ratio = 0.0 if a_last == 0.0 else np.inf
    else:
        ratio = a_last / a_prev
    return bool(ratio > ratio_threshold and a_last > factor * tol), ratio


def overshoot(y, y0=None, y_final=None):
    """Largest excursion past the final value, relative to the total move."""
    y = np.asarray(y, dtype=float)
    y0 = y[0] if y0 is None else y0
    y_final = y[-1] if y_final is None else y_final
    move = y_final - y0
    if move == 0:
        return 0.0
    return float(max(0.0, np.max((y - y_final) * np.sign(move))) / abs(move))


def settling_time(t, lower, upper, target, tol):
    """First time after which ``[lower, upper]`` stays within ``target +- tol``.

    ``lower``/``upper`` are per-interval extrema ending at ``t``; returns
    ``t[0]`` if always inside and ``None`` if never settled.
    """
    t = np.asarray(t, dtype=float)
    outside = (np.asarray(upper) > target + tol) | (np.asarray(lower) < target - tol)
    if not outside.any():
        return float(t[0])
    k = int(np.flatnonzero(outside)[-1])
    return None if k == len(t) - 1 else float(t[k])


@dataclass
class RunResult:
    name: str
    t: np.ndarray
    series: dict
    lower: dict
    upper: dict
    settled: bool
    settling_time: float
    oscillation: dict
    final: dict
    stats: dict
    error: str = None

    def series_settling_time(self, label, tol):
        return settling_time(self.t, self.lower[label], self.upper[label], self.series[label][-1], tol)

    def overshoot(self, label):
        return overshoot(np.r_[self.series[label], self.lower[label], self.upper[label]],
                         y0=self.series[label][0], y_final=self.series[label][-1])

    def to_csv(self, path):
        header = ["t"] + list(self.series)
        rows = np.column_stack([self.t] + [self.series[k] for k in self.series])
        lines = [",".join(header)]
        lines += [",".join(repr(float(v)) for v in row) for row in rows]
        if self.error:
            lines.append(f"# ERROR: {self.error}")
        atomic_write(path, "\n".join(lines) + "\n")


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _snapshot(system, x, t):
    grid = system.grid
    r = system.disturbance.at(grid, t)
    flows = line_flows(grid, x[system.slices["theta"]])
    omega, p = system.commands(x, r, flows)
    return {"t": t, "x": x.copy(), "omega": omega, "p": p, "flows": flows}


def run_scenario(scenario, system=None):
    """Integrate the scenario; metrics use full-resolution extrema between records."""
    system = system or scenario.system()
    outputs = resolve_outputs(system, scenario.outputs)
    labels = [o[0] for o in outputs]
    xi = np.array([o[2] for o in outputs if o[1] == "x"], dtype=int)
    mi = np.array([o[2] for o in outputs if o[1] == "mon"], dtype=int)
    is_x = np.array([o[1] == "x" for o in outputs])
    is_m = np.array([o[1] == "mon" for o in outputs])
    n = system.grid.n
    h = scenario.step
    per_record = int(round(scenario.record / h))
    n_steps = int(math.ceil(scenario.horizon / h - 1e-9))
    n_rec = int(math.ceil(n_steps / per_record))

    def sample(x, mon):
        v = np.full(len(outputs), np.nan)
        v[is_x] = x[xi]
        v[is_m] = mon[mi]
        return v

    x = system.initial_state()
    snap = _snapshot(system, x, 0.0)
    mon0 = np.r_[snap["omega"], snap["p"], snap["flows"]]
    t = np.zeros(n_rec + 1)
    vals = np.zeros((n_rec + 1, len(outputs)))
    lo = np.zeros_like(vals)
    hi = np.zeros_like(vals)
    wmax = np.zeros(n_rec + 1)
    vals[0] = lo[0] = hi[0] = sample(x, mon0)
    wmax[0] = np.max(np.abs(snap["omega"]))
    res_max, mult_min = 0.0, np.inf
    error = None
    done = 0
    k = 0
    for k in range(1, n_rec + 1):
        steps = min(per_record, n_steps - done)
        ext = (np.full(system.size, np.inf), np.full(system.size, -np.inf),
               np.full(system.monitor_size, np.inf), np.full(system.monitor_size, -np.inf))
        try:
            x, res, mult = system.advance(x, done * h, h, steps, ext)
        except NumericalError as exc:
            error = str(exc)
            k -= 1
            break
        done += steps
        res_max = max(res_max, res)
        mult_min = min(mult_min, mult)
        t[k] = done * h
        snap = _snapshot(system, x, t[k])
        vals[k] = sample(x, np.r_[snap["omega"], snap["p"], snap["flows"]])
        lo[k] = sample(ext[0], ext[2])
        hi[k] = sample(ext[1], ext[3])
        wmax[k] = max(np.max(np.abs(ext[2][:n])), np.max(np.abs(ext[3][:n])))
    t, vals, lo, hi, wmax = t[:k + 1], vals[:k + 1], lo[:k + 1], hi[:k + 1], wmax[:k + 1]
    tol = scenario.settling_tol
    tail = t > t[-1] - 0.1 * scenario.horizon
    real = is_x | is_m
    drift = (hi[tail][:, real].max(axis=0) - lo[tail][:, real].min(axis=0)) if tail.any() else np.zeros(0)
    settled = error is None and bool(np.all(wmax[tail] <= tol)) and bool(np.all(drift <= tol))
    freq_ok = wmax > tol
    settle_t = float(t[0]) if not freq_ok.any() else (
        None if freq_ok[-1] else float(t[np.flatnonzero(freq_ok)[-1]]))
    osc = {}
    if error is None and t[-1] - t[0] >= 2 * scenario.oscillation_window:
        for j, label in enumerate(labels):
            if not real[j]:
                continue
            osc[label] = detect_oscillation(t, vals[:, j], scenario.oscillation_window, tol,
                                            scenario.oscillation_ratio, scenario.oscillation_factor)
    series = {label: vals[:, j] for j, label in enumerate(labels)}
    return RunResult(
        name=scenario.name, t=t, series=series,
        lower={label: lo[:, j] for j, label in enumerate(labels)},
        upper={label: hi[:, j] for j, label in enumerate(labels)},
        settled=settled, settling_time=settle_t, oscillation=osc, final=snap,
        stats={"max_load_residual": res_max, "min_multiplier": mult_min,
               "final_max_omega": float(np.max(np.abs(snap["omega"]))), "tail_drift": float(np.max(drift, initial=0.0))},
        error=error)


# -- studies -----------------------------------------------------------------

def run_robustness_sweep(base, factors=None, focus=None):
    """DUC runs with both emulator time constants scaled by each factor.

    Returns one summary dict per factor; a failing run is recorded and the
    sweep continues.
    """
    if base.controller.kind != ctl.DUC:
        raise ScenarioError("robustness sweep needs a DUC scenario")
    if base.turbine is not TurbineModel.SECOND_ORDER:
        raise ScenarioError("robustness sweep needs the second-order plant")
    factors = base.sweep_factors if factors is None else factors
    label = focus or base.focus or base.outputs[0]
    outputs = base.outputs if label in base.outputs else list(base.outputs) + [label]
    rows = []
    for f in factors:
        row = {"factor": float(f)}
        try:
            res = run_scenario(replace(base, outputs=outputs, emulator_factors=(float(f), float(f))))
            if label not in res.series:
                raise ScenarioError(f"focus {label!r} must name a single series")
            flag, ratio = res.oscillation.get(label, (False, np.nan))
            row.update(settled=res.settled, settling_time=res.series_settling_time(label, base.settling_tol),
                       overshoot=res.overshoot(label), oscillating=flag, ratio=ratio, error=res.error)
        except (ValueError, NumericalError) as exc:
            row.update(settled=False, settling_time=None, overshoot=np.nan, oscillating=None,
                       ratio=np.nan, error=str(exc))
        rows.append(row)
    return rows


def run_eigen_study(scenario, variants=None, outdir=None):
    """Spectra of each (controller kind, turbine) variant about its equilibrium.

    The controller gains are scaled by ``scenario.gain_scale``. Returns
    ``{(kind, turbine): EigenReport or error message}``; with ``outdir``
    writes one ``re,im`` CSV per variant and a ``summary.csv``.
    """
    variants = variants or scenario.variants or [(ctl.UC, TurbineModel.FIRST_ORDER),
                                                 (ctl.UC, TurbineModel.SECOND_ORDER),
                                                 (ctl.DUC, TurbineModel.SECOND_ORDER)]
    grid = scenario.load_grid()
    out = {}
    for kind, turbine in variants:
        turbine = TurbineModel.parse(turbine)
        try:
            cfg = scenario.resolved_controller(grid)
            cfg = replace(cfg, kind=kind).scaled(scenario.gain_scale)
            system = ClosedLoop(grid, cfg, turbine, scenario.disturbance)
            x = st.analytic_equilibrium(system)
            if cfg.area_control or cfg.congestion:
                x = st.find_equilibrium(system, guess=x)
            out[(kind, turbine)] = st.eigenvalues(st.linearize(system, x))
        except (ValueError, RuntimeError) as exc:
            out[(kind, turbine)] = f"{type(exc).__name__}: {exc}"
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        lines = ["kind,turbine,abscissa,classification,unstable,error"]
        for (kind, turbine), rep in out.items():
            tag = f"{kind}_{turbine.value}"
            if isinstance(rep, st.EigenReport):
                rep.to_csv(outdir / f"eigen_{tag}.csv", label=f"{kind} {turbine.value}")
                lines.append(f"{kind},{turbine.value},{rep.abscissa!r},{rep.classification},{rep.n_unstable},")
            else:
                lines.append(f"{kind},{turbine.value},,,,{rep}")
        atomic_write(outdir / "summary.csv", "\n".join(lines) + "\n")
    return out


def verify_scenario(scenario, tol=1e-3):
    """Run the scenario and compare its final state with the dispatch optimum."""
    system = scenario.system()
    sol = orc.solve_dispatch(orc.DispatchProblem.from_system(system))
    res = run_scenario(scenario, system)
    final = dict(res.final, settled=res.settled)
    return res, sol, orc.verify_equilibrium(final, sol, tol)


__all__ = ["Scenario", "ScenarioError", "RunResult", "load_scenario", "scenario_from_dict", "run_scenario",
           "detect_oscillation", "overshoot", "settling_time", "run_robustness_sweep", "run_eigen_study",
           "verify_scenario", "resolve_outputs", "GridError"]
