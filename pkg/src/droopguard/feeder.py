"""Radial feeder model and balanced positive-sequence power flow.

The feeder is a tree of buses rooted at the slack bus (the feeder head).
Power flow is solved with a backward/forward sweep: backward accumulation of
branch currents from the leaves, forward propagation of voltage drops from
the slack. All quantities are per-unit on a common system base.

Feeder file grammar (line-oriented, ``#`` starts a comment)::

    [slack]
    <bus-id> <source-voltage-pu>
    [bus]
    <bus-id> <p-load-pu> <q-load-pu>      # one line per bus
    [line]
    <from-id> <to-id> <r-pu> <x-pu>       # one line per series branch
    [inverter]
    <bus-id> <capacity-s-pu>              # optional section

Sections may appear in any order. Bus ids are arbitrary tokens; internally
buses are indexed 0..n-1 with the slack bus at index 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FeederError(Exception):
    """Base class for feeder loading and solving failures."""


class FeederFormatError(FeederError):
    """Malformed feeder file; message carries the file path and line number."""


class FeederTopologyError(FeederError):
    """Feeder graph is not a tree rooted at the slack bus."""


class PowerFlowError(FeederError):
    """Power-flow sweep failed to converge or produced a degenerate state."""


@dataclass(frozen=True)
class Bus:
    ident: str
    p_load: float
    q_load: float


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: float
    x: float


@dataclass(frozen=True)
class InverterSite:
    bus: str
    s: float  # apparent-power capacity, pu


class FeederModel:
    """Validated radial network. Treat instances as immutable.

    Buses are reordered so the slack bus has index 0; ``index_of`` maps the
    file's bus ids to internal indices. ``parent``/``z_to_parent``/``levels``
    are the precomputed tree structure used by the sweep solver.
    """

    def __init__(self, buses, lines, inverters, slack_bus, source_voltage=1.0):
        if not buses:
            raise FeederTopologyError("feeder has no buses")
        idents = [b.ident for b in buses]
        dupes = {i for i in idents if idents.count(i) > 1}
        if dupes:
            raise FeederTopologyError(f"duplicate bus id {sorted(dupes)[0]!r}")
        if slack_bus not in idents:
            raise FeederTopologyError(f"slack bus {slack_bus!r} is not a declared bus")

        # slack first, remaining buses in declaration order
        ordered = sorted(buses, key=lambda b: b.ident != slack_bus)
        self.buses = tuple(ordered)
        self.lines = tuple(lines)
        self.inverters = tuple(inverters)
        self.slack_bus = slack_bus
        self.source_voltage = float(source_voltage)
        self.index_of = {b.ident: i for i, b in enumerate(self.buses)}
        self.n_bus = len(self.buses)

        if len(lines) != self.n_bus - 1:
            raise FeederTopologyError(
                f"{len(lines)} lines for {self.n_bus} buses; a radial feeder needs exactly "
                f"{self.n_bus - 1}"
            )
        for ln in lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in self.index_of:
                    raise FeederTopologyError(
                        f"line {ln.from_bus}-{ln.to_bus} references unknown bus {end!r}"
                    )
            if ln.r < 0.0 or ln.x < 0.0:
                raise FeederTopologyError(
                    f"line {ln.from_bus}-{ln.to_bus} has negative impedance"
                )
        if not any(ln.r > 0.0 or ln.x > 0.0 for ln in lines):
            raise FeederTopologyError("all line impedances are zero")
        for inv in inverters:
            if inv.bus not in self.index_of:
                raise FeederTopologyError(f"inverter references unknown bus {inv.bus!r}")
            if inv.s <= 0.0:
                raise FeederTopologyError(f"inverter at bus {inv.bus!r} has capacity s <= 0")

        self._build_tree()

        self.p_load = np.array([b.p_load for b in self.buses])
        self.q_load = np.array([b.q_load for b in self.buses])
        self.inverter_bus_idx = np.array(
            [self.index_of[inv.bus] for inv in self.inverters], dtype=np.intp
        )
        self.inverter_s = np.array([inv.s for inv in self.inverters])

    def _build_tree(self):
        adj = {i: [] for i in range(self.n_bus)}
        for ln in self.lines:
            a, b = self.index_of[ln.from_bus], self.index_of[ln.to_bus]
            adj[a].append((b, ln))
            adj[b].append((a, ln))

        parent = np.full(self.n_bus, -1, dtype=np.intp)
        z_to_parent = np.zeros(self.n_bus, dtype=complex)
        depth = np.full(self.n_bus, -1, dtype=np.intp)
        depth[0] = 0
        frontier = [0]
        seen_lines = set()
        while frontier:
            nxt = []
            for u in frontier:
                for v, ln in adj[u]:
                    if id(ln) in seen_lines:
                        continue
                    seen_lines.add(id(ln))
                    if depth[v] >= 0:
                        raise FeederTopologyError(
                            f"line {ln.from_bus}-{ln.to_bus} closes a cycle"
                        )
                    parent[v] = u
                    z_to_parent[v] = complex(ln.r, ln.x)
                    depth[v] = depth[u] + 1
                    nxt.append(v)
            frontier = nxt
        if (depth < 0).any():
            orphan = self.buses[int(np.nonzero(depth < 0)[0][0])].ident
            raise FeederTopologyError(f"bus {orphan!r} is not connected to the slack bus")

        self.parent = parent
        self.z_to_parent = z_to_parent
        self.depth = depth
        # bus indices grouped by depth, shallow to deep (level 0 is the slack alone)
        self.levels = [
            np.nonzero(depth == d)[0] for d in range(int(depth.max()) + 1)
        ]

    def __repr__(self):
        return (
            f"FeederModel({self.n_bus} buses, {len(self.lines)} lines, "
            f"{len(self.inverters)} inverters, slack={self.slack_bus!r})"
        )


@dataclass(frozen=True)
class PowerFlowSolution:
    voltages: np.ndarray  # complex, per bus
    iterations: int
    residual: float  # max per-bus apparent-power mismatch, pu

    @property
    def magnitudes(self):
        return np.abs(self.voltages)

    @property
    def angles(self):
        return np.angle(self.voltages)


def load_feeder(path) -> FeederModel:
    """Parse and validate a feeder file (grammar in the module docstring)."""
    path = Path(path)
    buses, lines, inverters = [], [], []
    slack_bus, source_voltage = None, 1.0
    section = None
    try:
        text = path.read_text()
    except OSError as exc:
        raise FeederFormatError(f"{path}: cannot read feeder file: {exc}") from exc

    def fail(lineno, msg):
        raise FeederFormatError(f"{path}:{lineno}: {msg}")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("slack", "bus", "line", "inverter"):
                fail(lineno, f"unknown section [{section}]")
            continue
        tokens = line.split()
        if section is None:
            fail(lineno, "data before any section header")
        try:
            if section == "slack":
                if len(tokens) != 2:
                    fail(lineno, "[slack] entry needs: <bus-id> <voltage-pu>")
                slack_bus, source_voltage = tokens[0], float(tokens[1])
            elif section == "bus":
                if len(tokens) != 3:
                    fail(lineno, "[bus] entry needs: <id> <p-load> <q-load>")
                buses.append(Bus(tokens[0], float(tokens[1]), float(tokens[2])))
            elif section == "line":
                if len(tokens) != 4:
                    fail(lineno, "[line] entry needs: <from> <to> <r> <x>")
                lines.append(Line(tokens[0], tokens[1], float(tokens[2]), float(tokens[3])))
            elif section == "inverter":
                if len(tokens) != 2:
                    fail(lineno, "[inverter] entry needs: <bus-id> <s-pu>")
                inverters.append(InverterSite(tokens[0], float(tokens[1])))
        except ValueError:
            fail(lineno, f"non-numeric field in {line!r}")

    if slack_bus is None:
        raise FeederFormatError(f"{path}: missing [slack] section")
    return FeederModel(buses, lines, inverters, slack_bus, source_voltage)


def solve_power_flow(
    model: FeederModel,
    injections,
    source_v: float | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    v_init=None,
) -> PowerFlowSolution:
    """Backward/forward sweep solve for per-bus complex voltages.

    ``injections`` is the net complex power injected at each bus (generation
    positive, load negative), indexed like ``model.buses``; the slack entry is
    ignored. ``v_init`` optionally warm-starts the sweep (e.g. the previous
    timestep's solution); the converged result does not depend on it.

    Raises PowerFlowError if the max apparent-power mismatch is still above
    ``tol`` after ``max_iter`` sweeps.
    """
    if source_v is None:
        source_v = model.source_voltage
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")

    s_inj = np.asarray(injections, dtype=complex)
    if s_inj.shape != (model.n_bus,):
        raise ValueError(f"injections must have shape ({model.n_bus},)")

    parent = model.parent
    z = model.z_to_parent
    levels = model.levels

    if v_init is not None:
        v = np.asarray(v_init, dtype=complex).copy()
    else:
        v = np.full(model.n_bus, complex(source_v), dtype=complex)
    v[0] = complex(source_v)

    s_cons = -s_inj.copy()
    s_cons[0] = 0.0  # slack balances the system; no load equation there

    branch = np.zeros(model.n_bus, dtype=complex)  # current parent -> bus
    for it in range(1, max_iter + 1):
        # backward: accumulate load currents up the tree
        branch[:] = np.conj(s_cons / v)
        branch[0] = 0.0
        for nodes in reversed(levels[1:]):
            np.add.at(branch, parent[nodes], branch[nodes])
        # forward: drop voltages down the tree
        v[0] = complex(source_v)
        for nodes in levels[1:]:
            v[nodes] = v[parent[nodes]] - z[nodes] * branch[nodes]
        if not np.isfinite(v).all():
            raise PowerFlowError("degenerate network state: non-finite voltage in sweep")

        residual = _mismatch(model, v, branch, s_inj)
        if residual <= tol:
            return PowerFlowSolution(voltages=v, iterations=it, residual=residual)

    raise PowerFlowError(
        f"power flow did not converge in {max_iter} sweeps (residual {residual:.3e} pu)"
    )


def _mismatch(model, v, branch, s_inj):
    """Max |S_computed - S_specified| over non-slack buses, from voltages.

    Line currents are recomputed from the voltage profile so the residual is
    an independent check on v, except across zero-impedance lines where the
    sweep branch current is used (the voltage difference carries no
    information there).
    """
    z = model.z_to_parent
    parent = model.parent
    i_line = np.zeros(model.n_bus, dtype=complex)  # current flowing parent -> bus
    nz = np.abs(z) > 0.0
    nz[0] = False
    i_line[nz] = (v[parent[nz]] - v[nz]) / z[nz]
    zero_z = ~nz
    zero_z[0] = False
    i_line[zero_z] = branch[zero_z]

    child_sum = np.zeros(model.n_bus, dtype=complex)
    np.add.at(child_sum, parent[1:], i_line[1:])
    i_absorbed = i_line - child_sum
    s_cons_computed = v * np.conj(i_absorbed)
    mism = np.abs(s_cons_computed + s_inj)  # specified consumption is -s_inj
    return float(mism[1:].max()) if model.n_bus > 1 else 0.0
