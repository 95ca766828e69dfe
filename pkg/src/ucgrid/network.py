"""
Grid data model, grid-file loading and the lossless power-flow solve.

All powers are per unit on the grid base (default 100 MVA), angles in
radians, frequency deviations in per unit of nominal angular frequency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


GENERATOR = "generator"
LOAD = "load"


class GridError(ValueError):
    """Raised for malformed or inconsistent grid data."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solve hits its iteration cap."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    D: float
    alpha: float = 1.0
    injection: float = 0.0
    p_min: float = -np.inf
    p_max: float = np.inf
    M: float | None = None
    Tt: float | None = None
    Tg: float | None = None

    @property
    def is_generator(self):
        return self.kind == GENERATOR

    def validate(self):
        if self.kind not in (GENERATOR, LOAD):
            raise GridError(f"bus {self.id}: unknown kind {self.kind!r}")
        if self.is_generator:
            for name in ("M", "Tt", "Tg"):
                value = getattr(self, name)
                if value is None or not value > 0:
                    raise GridError(f"bus {self.id}: generator needs {name} > 0, got {value}")
        if not self.D >= 0:
            raise GridError(f"bus {self.id}: damping D must be >= 0, got {self.D}")
        if not self.alpha > 0:
            raise GridError(f"bus {self.id}: alpha must be > 0, got {self.alpha}")
        if self.p_min > self.p_max:
            raise GridError(f"bus {self.id}: p_min {self.p_min} > p_max {self.p_max}")


@dataclass(frozen=True)
class Line:
    src: int
    dst: int
    B: float
    P_min: float = -np.inf
    P_max: float = np.inf

    @property
    def name(self):
        return f"{self.src}-{self.dst}"

    def validate(self):
        if self.src == self.dst:
            raise GridError(f"line {self.name}: self loop")
        if not self.B > 0:
            raise GridError(f"line {self.name}: susceptance must be > 0, got {self.B}")
        if self.P_min > self.P_max:
            raise GridError(f"line {self.name}: P_min {self.P_min} > P_max {self.P_max}")


@dataclass(frozen=True)
class AreaSpec:
    """A control area given by its member buses.

    ``ties`` holds ``(line index, sign)`` pairs; sign is +1 when the line's
    from-bus lies inside the area so that positive values mean export.
    ``schedule`` is the scheduled net export; ``None`` means "keep the
    pre-disturbance value".
    """

    id: int
    buses: tuple
    ties: tuple = ()
    schedule: float | None = None


@dataclass(frozen=True, eq=False)
class GridModel:
    buses: tuple
    lines: tuple
    areas: tuple = ()
    base_mva: float = 100.0
    reference: int | None = None
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    # -- structure -----------------------------------------------------
    @property
    def n(self):
        return len(self.buses)

    @property
    def m(self):
        return len(self.lines)

    @property
    def bus_ids(self):
        return [b.id for b in self.buses]

    def index(self, bus_id):
        """Position of ``bus_id`` in the bus ordering."""
        try:
            return self._bus_index[bus_id]
        except KeyError:
            raise GridError(f"unknown bus {bus_id}") from None

    def line_index(self, src, dst):
        """Position of the line joining ``src`` and ``dst`` (either orientation)."""
        for k, line in enumerate(self.lines):
            if {line.src, line.dst} == {src, dst}:
                return k
        raise GridError(f"no line between {src} and {dst}")

    @property
    def _bus_index(self):
        if "bus_index" not in self._cache:
            self._cache["bus_index"] = {b.id: i for i, b in enumerate(self.buses)}
        return self._cache["bus_index"]

    @property
    def gen_idx(self):
        return self._array("gen_idx", lambda: np.array(
            [i for i, b in enumerate(self.buses) if b.is_generator], dtype=int))

    @property
    def load_idx(self):
        return self._array("load_idx", lambda: np.array(
            [i for i, b in enumerate(self.buses) if not b.is_generator], dtype=int))

    @property
    def src(self):
        return self._array("src", lambda: np.array([self.index(l.src) for l in self.lines], dtype=int))

    @property
    def dst(self):
        return self._array("dst", lambda: np.array([self.index(l.dst) for l in self.lines], dtype=int))

    @property
    def incidence(self):
        """Bus-by-line incidence matrix, +1 at the from-bus, -1 at the to-bus."""
        def build():
            C = np.zeros((self.n, self.m))
            C[self.src, np.arange(self.m)] = 1.0
            C[self.dst, np.arange(self.m)] = -1.0
            return C
        return self._array("incidence", build)

    @property
    def ref_index(self):
        return self.index(self.reference)

    def _array(self, key, build):
        if key not in self._cache:
            arr = build()
            arr.setflags(write=False)
            self._cache[key] = arr
        return self._cache[key]

    def column(self, name, fill=np.nan):
        """Per-bus parameter vector (``fill`` where the field is absent)."""
        values = [getattr(b, name) for b in self.buses]
        return np.array([fill if v is None else v for v in values], dtype=float)

    def line_column(self, name):
        return np.array([getattr(l, name) for l in self.lines], dtype=float)

    # per-bus / per-line vectors used in the numerical kernels
    @property
    def B(self):
        return self._array("B", lambda: self.line_column("B"))

    @property
    def D(self):
        return self._array("D", lambda: self.column("D"))

    @property
    def M(self):
        return self._array("M", lambda: self.column("M")[self.gen_idx])

    @property
    def Tt(self):
        return self._array("Tt", lambda: self.column("Tt")[self.gen_idx])

    @property
    def Tg(self):
        return self._array("Tg", lambda: self.column("Tg")[self.gen_idx])

    @property
    def injection(self):
        return self._array("injection", lambda: self.column("injection"))

    @property
    def p_min(self):
        return self._array("p_min", lambda: self.column("p_min"))

    @property
    def p_max(self):
        return self._array("p_max", lambda: self.column("p_max"))

    @property
    def P_min(self):
        return self._array("P_min", lambda: self.line_column("P_min"))

    @property
    def P_max(self):
        return self._array("P_max", lambda: self.line_column("P_max"))

    def tie_matrix(self):
        """Area-by-line matrix of signed tie-line membership."""
        def build():
            A = np.zeros((len(self.areas), self.m))
            for k, area in enumerate(self.areas):
                for e, sign in area.ties:
                    A[k, e] = sign
            return A
        return self._array("ties", build)

    # -- validation ----------------------------------------------------
    def validate(self):
        if not self.buses:
            raise GridError("grid has no buses")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate bus ids")
        for b in self.buses:
            b.validate()
        known = set(ids)
        pairs = set()
        for line in self.lines:
            line.validate()
            for end in (line.src, line.dst):
                if end not in known:
                    raise GridError(f"line {line.name}: undeclared bus {end}")
            pair = frozenset((line.src, line.dst))
            if pair in pairs:
                raise GridError(f"line {line.name}: parallel line, aggregate it in the data file")
            pairs.add(pair)
        if not is_connected(ids, [(l.src, l.dst) for l in self.lines]):
            raise GridError("line graph is not connected")
        if self.reference is None:
            gens = sorted(b.id for b in self.buses if b.is_generator)
            object.__setattr__(self, "reference", gens[0] if gens else min(ids))
        elif self.reference not in known:
            raise GridError(f"reference bus {self.reference} is not declared")
        for area in self.areas:
            members = set(area.buses)
            if not members <= known:
                raise GridError(f"area {area.id}: undeclared buses {sorted(members - known)}")
            for e, sign in area.ties:
                line = self.lines[e]
                inside = (line.src in members, line.dst in members)
                if inside[0] == inside[1]:
                    raise GridError(f"area {area.id}: line {line.name} is not a tie line")
                if sign != (1 if inside[0] else -1):
                    raise GridError(f"area {area.id}: line {line.name} has wrong orientation")

    def with_buses(self, **changes):
        """Copy of the grid with per-bus field overrides ``name={bus_id: value}``."""
        buses = []
        for b in self.buses:
            kw = {k: v[b.id] for k, v in changes.items() if b.id in v}
            buses.append(_replace(b, **kw))
        return GridModel(tuple(buses), self.lines, self.areas, self.base_mva, self.reference, self.name)

    def with_lines(self, **changes):
        """Copy of the grid with per-line overrides ``name={(src, dst): value}``."""
        lines = list(self.lines)
        for name, mapping in changes.items():
            for (a, b), value in mapping.items():
                k = self.line_index(a, b)
                line = lines[k]
                if (line.src, line.dst) != (a, b) and name in ("P_min", "P_max"):
                    # limits given for the reversed orientation
                    name_r = "P_max" if name == "P_min" else "P_min"
                    lines[k] = _replace(line, **{name_r: -value})
                else:
                    lines[k] = _replace(line, **{name: value})
        return GridModel(self.buses, tuple(lines), self.areas, self.base_mva, self.reference, self.name)

    def all_generator(self, M_load=0.1, Tt=None, Tg=None):
        """Variant where every load bus becomes a generator.

        Converted buses get inertia ``M_load``, the median generator
        turbine/governor time constants unless ``Tt``/``Tg`` are given, and
        an unbounded control band.
        """
        Tt = float(np.median(self.Tt)) if Tt is None else Tt
        Tg = float(np.median(self.Tg)) if Tg is None else Tg
        buses = tuple(
            b if b.is_generator else _replace(b, kind=GENERATOR, M=M_load, Tt=Tt, Tg=Tg,
                                              p_min=-np.inf, p_max=np.inf)
            for b in self.buses)
        return GridModel(buses, self.lines, self.areas, self.base_mva, self.reference, self.name + "/all-gen")


def _replace(obj, **kw):
    from dataclasses import replace
    return replace(obj, **kw)


def is_connected(nodes, edges):
    nodes = list(nodes)
    adj = {v: [] for v in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(nodes)


# -- file loading ---------------------------------------------------------

_BUS_KEYS = {"id", "kind", "M", "D", "Tt", "Tg", "p_min", "p_max", "alpha", "injection"}
_LINE_KEYS = {"from", "to", "B", "P_min", "P_max"}


def load_grid(path):
    """Read and validate a grid file.

    The file is TOML with ``[grid]`` settings and ``[[bus]]``, ``[[line]]``
    and ``[[area]]`` tables (see ``data/two_bus.toml``).
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise GridError(f"{path}: parse error: {exc}") from exc
    return grid_from_dict(doc, name=path.stem)


def grid_from_dict(doc, name=""):
    settings = doc.get("grid", {})
    buses = []
    for k, row in enumerate(doc.get("bus", [])):
        extra = set(row) - _BUS_KEYS
        if extra:
            raise GridError(f"bus entry {k}: unknown fields {sorted(extra)}")
        if "id" not in row or "kind" not in row or "D" not in row:
            raise GridError(f"bus entry {k}: id, kind and D are required")
        kw = dict(row)
        kw.setdefault("p_min", -np.inf)
        kw.setdefault("p_max", np.inf)
        if kw["kind"] == LOAD:
            for key in ("M", "Tt", "Tg"):
                kw.pop(key, None)
        buses.append(Bus(**{k: (float(v) if k not in ("id", "kind") else v) for k, v in kw.items()}))
    lines = []
    for k, row in enumerate(doc.get("line", [])):
        extra = set(row) - _LINE_KEYS
        if extra:
            raise GridError(f"line entry {k}: unknown fields {sorted(extra)}")
        try:
            lines.append(Line(src=row["from"], dst=row["to"], B=float(row["B"]),
                              P_min=float(row.get("P_min", -np.inf)),
                              P_max=float(row.get("P_max", np.inf))))
        except KeyError as exc:
            raise GridError(f"line entry {k}: missing field {exc}") from None
    areas = []
    for row in doc.get("area", []):
        members = set(row["buses"])
        ties = []
        for e, line in enumerate(lines):
            a, b = line.src in members, line.dst in members
            if a != b:
                ties.append((e, 1 if a else -1))
        schedule = row.get("schedule")
        areas.append(AreaSpec(row["id"], tuple(row["buses"]), tuple(ties),
                              None if schedule is None else float(schedule)))
    return GridModel(tuple(buses), tuple(lines), tuple(areas),
                     float(settings.get("base_mva", 100.0)), settings.get("reference"), name)


def data_path(name):
    """Path of a grid or scenario file shipped with the package."""
    return Path(__file__).parent / "data" / name


# -- power flow ------------------------------------------------------------

def line_flows(grid, theta):
    """Lossless flows ``B_ij sin(theta_i - theta_j)``, oriented from -> to."""
    theta = np.asarray(theta, dtype=float)
    return grid.B * np.sin(theta[grid.src] - theta[grid.dst])


def bus_outflow(grid, flows):
    """Net power leaving each bus through its lines."""
    return np.bincount(grid.src, flows, grid.n) - np.bincount(grid.dst, flows, grid.n)


def flow_jacobian(grid, theta):
    """d(flows)/d(theta), shape (m, n)."""
    theta = np.asarray(theta, dtype=float)
    w = grid.B * np.cos(theta[grid.src] - theta[grid.dst])
    return w[:, None] * grid.incidence.T


def solve_equilibrium(grid, injections, reference=None, tol=1e-9, max_iter=50, balance_tol=1e-8):
    """Newton solve of ``injection_i = sum_j B_ij sin(theta_i - theta_j)``.

    Flat start, reference angle pinned to zero. Returns ``(theta, flows)``.
    """
    p = np.asarray(injections, dtype=float)
    if p.shape != (grid.n,):
        raise GridError(f"expected {grid.n} injections, got shape {p.shape}")
    imbalance = p.sum()
    if abs(imbalance) > balance_tol:
        raise GridError(f"injections do not balance: sum = {imbalance:.3e} pu")
    ref = grid.ref_index if reference is None else grid.index(reference)
    keep = np.delete(np.arange(grid.n), ref)
    theta = np.zeros(grid.n)
    for _ in range(max_iter + 1):
        mismatch = (p - bus_outflow(grid, line_flows(grid, theta)))[keep]
        if np.max(np.abs(mismatch), initial=0.0) <= tol:
            return theta, line_flows(grid, theta)
        J = (grid.incidence @ flow_jacobian(grid, theta))[np.ix_(keep, keep)]
        theta[keep] += np.linalg.solve(J, mismatch)
    raise ConvergenceError(f"power flow did not converge in {max_iter} iterations "
                           f"(mismatch {np.max(np.abs(mismatch)):.3e} pu)")
