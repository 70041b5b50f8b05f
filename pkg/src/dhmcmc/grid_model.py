"""Steady-state district heating grid: topology, state layout and grid equations.

Units throughout: kg/s, degC, bar, kW; ``cp`` in kJ/(kg K), pipe heat-loss
coefficients in W/(m K).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

#: total inflow below which a node's mixing equation is replaced by T_i = T_a
STAGNANT_FLOW = 1e-9
#: floor on |mdot| in the derivative of k*mdot*|mdot|
MIN_FLOW_SLOPE = 1e-6


class TopologyError(ValueError):
    """Raised when a topology violates its structural invariants.

    ``violations`` lists every problem that was found, not just the first.
    """

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid grid topology:\n  - " + "\n  - ".join(self.violations))


@dataclass(frozen=True)
class Pipe:
    frm: str
    to: str
    length: float  # m
    k: float  # bar / (kg/s)^2
    lam: float  # W / (m K)
    name: str = ""


@dataclass(frozen=True)
class ActiveEdge:
    """Demand or source: heat exchanger with a fixed outlet temperature setpoint."""

    frm: str
    to: str
    t_set: float
    name: str = ""


@dataclass(frozen=True)
class SlackEdge:
    frm: str  # return side
    to: str  # supply side
    t_set: float
    p_supply: float
    p_return: float
    name: str = "slack"


def _edge_name(edge) -> str:
    return edge.name or f"{edge.frm}-{edge.to}"


@dataclass(frozen=True)
class GridTopology:
    """Immutable grid graph with physical parameters and control setpoints.

    Edges are stored once with a canonical orientation; reverse flow shows up
    as a negative mass flow. The edge order used by every vector is passive
    edges, demands, sources, then the slack edge.
    """

    nodes: tuple[str, ...]
    passive_edges: tuple[Pipe, ...]
    demand_edges: tuple[ActiveEdge, ...]
    source_edges: tuple[ActiveEdge, ...]
    slack_edge: SlackEdge
    ambient_temperature: float = 10.0
    cp: float = 4.18
    node_roles: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(
            self, "passive_edges",
            tuple(Pipe(e.frm, e.to, float(e.length), float(e.k), float(e.lam), _edge_name(e))
                  for e in self.passive_edges))
        for attr in ("demand_edges", "source_edges"):
            edges = tuple(ActiveEdge(e.frm, e.to, float(e.t_set), _edge_name(e))
                          for e in getattr(self, attr))
            object.__setattr__(self, attr, edges)
        s = self.slack_edge
        object.__setattr__(self, "slack_edge", SlackEdge(
            s.frm, s.to, float(s.t_set), float(s.p_supply), float(s.p_return), _edge_name(s)))
        problems = self._violations()
        if problems:
            raise TopologyError(problems)

    def _violations(self) -> list[str]:
        problems = []
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            problems.append("duplicate node ids")
        if self.cp <= 0:
            problems.append(f"cp must be > 0, got {self.cp}")
        names = [e.name for e in self.edges]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            problems.append(f"duplicate edge names: {dupes}")
        for e in self.edges:
            for end in (e.frm, e.to):
                if end not in node_set:
                    problems.append(f"edge {e.name!r} references unknown node {end!r}")
            if e.frm == e.to:
                problems.append(f"edge {e.name!r} is a self-loop")
        for p in self.passive_edges:
            if not p.k > 0:
                problems.append(f"pipe {p.name!r}: k must be > 0, got {p.k}")
            if not p.length > 0:
                problems.append(f"pipe {p.name!r}: length must be > 0, got {p.length}")
            if not p.lam >= 0:
                problems.append(f"pipe {p.name!r}: lambda must be >= 0, got {p.lam}")
        if problems:
            return problems
        if len(_components(self.nodes, [(e.frm, e.to) for e in self.edges])) > 1:
            problems.append("graph is not connected")
        anchors = {self.slack_edge.frm, self.slack_edge.to}
        for comp in _components(self.nodes, [(p.frm, p.to) for p in self.passive_edges]):
            if not comp & anchors:
                problems.append(
                    f"pressure level of nodes {sorted(comp)} is not anchored by the slack edge")
        return problems

    @property
    def edges(self) -> tuple:
        return (*self.passive_edges, *self.demand_edges, *self.source_edges, self.slack_edge)

    @property
    def active_edges(self) -> tuple[ActiveEdge, ...]:
        """Edges carrying a heat exchange, in HeatExchangeVector order."""
        return (*self.demand_edges, *self.source_edges)

    @property
    def heat_exchange_names(self) -> list[str]:
        return [e.name for e in self.active_edges]

    @property
    def heat_exchange_signs(self) -> np.ndarray:
        """+1 for demands (consumption), -1 for sources (injection)."""
        return np.array([1.0] * len(self.demand_edges) + [-1.0] * len(self.source_edges))

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.nodes)}

    @cached_property
    def edge_index(self) -> dict[str, int]:
        return {e.name: i for i, e in enumerate(self.edges)}

    @cached_property
    def supply_nodes(self) -> frozenset[str]:
        """Nodes hydraulically connected (through pipes) to the slack outlet."""
        for comp in _components(self.nodes, [(p.frm, p.to) for p in self.passive_edges]):
            if self.slack_edge.to in comp:
                return frozenset(comp)
        return frozenset()

    @cached_property
    def layout(self) -> "StateLayout":
        return StateLayout(self)

    @cached_property
    def equations(self) -> "GridEquations":
        return GridEquations(self)

    def to_dict(self) -> dict:
        s = self.slack_edge
        nodes = [
            {"id": n, "role": self.node_roles[n]} if n in self.node_roles else n
            for n in self.nodes
        ]
        return {
            "cp": self.cp,
            "ambient_temperature": self.ambient_temperature,
            "nodes": nodes,
            "passive_edges": [
                {"name": p.name, "from": p.frm, "to": p.to, "length_m": p.length,
                 "k_bar_per_kgps2": p.k, "lambda_w_per_mk": p.lam}
                for p in self.passive_edges
            ],
            "demand_edges": [{"name": e.name, "from": e.frm, "to": e.to, "t_set_c": e.t_set}
                             for e in self.demand_edges],
            "source_edges": [{"name": e.name, "from": e.frm, "to": e.to, "t_set_c": e.t_set}
                             for e in self.source_edges],
            "slack_edge": {"name": s.name, "from": s.frm, "to": s.to, "t_set_c": s.t_set,
                           "p_set_supply_bar": s.p_supply, "p_set_return_bar": s.p_return},
        }


def _components(nodes: Iterable[str], links: Iterable[tuple[str, str]]) -> list[set[str]]:
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for a, b in links:
        if a in parent and b in parent:
            parent[find(a)] = find(b)
    comps: dict[str, set[str]] = {}
    for n in parent:
        comps.setdefault(find(n), set()).add(n)
    return list(comps.values())


# -- topology documents -------------------------------------------------------

def topology_from_dict(doc: dict) -> GridTopology:
    """Build a topology from its JSON document, collecting every violation."""
    problems = []
    for key in ("cp", "nodes", "passive_edges", "slack_edge"):
        if key not in doc:
            problems.append(f"missing key {key!r}")
    slack = doc.get("slack_edge")
    if isinstance(slack, list):
        if len(slack) != 1:
            problems.append(f"exactly one slack edge required, found {len(slack)}")
        slack = slack[0] if slack else None
    if problems:
        raise TopologyError(problems)

    nodes, roles = [], {}
    for n in doc["nodes"]:
        if isinstance(n, dict):
            nodes.append(str(n["id"]))
            if "role" in n:
                roles[str(n["id"])] = n["role"]
        else:
            nodes.append(str(n))

    def active(items):
        return tuple(ActiveEdge(str(e["from"]), str(e["to"]), e["t_set_c"], e.get("name", ""))
                     for e in items)

    try:
        pipes = tuple(
            Pipe(str(p["from"]), str(p["to"]), p["length_m"], p["k_bar_per_kgps2"],
                 p["lambda_w_per_mk"], p.get("name", ""))
            for p in doc["passive_edges"]
        )
        slack_edge = SlackEdge(str(slack["from"]), str(slack["to"]), slack["t_set_c"],
                               slack["p_set_supply_bar"], slack["p_set_return_bar"],
                               slack.get("name", "slack"))
        return GridTopology(
            nodes=tuple(nodes),
            passive_edges=pipes,
            demand_edges=active(doc.get("demand_edges", [])),
            source_edges=active(doc.get("source_edges", [])),
            slack_edge=slack_edge,
            ambient_temperature=float(doc.get("ambient_temperature", 10.0)),
            cp=float(doc["cp"]),
            node_roles=roles,
        )
    except KeyError as exc:
        raise TopologyError([f"missing field {exc.args[0]!r}"]) from None


def load_topology(path_or_doc) -> GridTopology:
    if isinstance(path_or_doc, dict):
        return topology_from_dict(path_or_doc)
    with open(path_or_doc) as fh:
        doc = json.load(fh)
    return topology_from_dict(doc)


def save_topology(topo: GridTopology, path, provenance: dict | None = None) -> None:
    doc = topo.to_dict()
    if provenance is not None:
        doc = {"provenance": provenance, **doc}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# -- state layout ---------------------------------------------------------------

class StateLayout:
    """Index map of the full state vector ``[T (nodes), p (nodes), mdot (edges), Tend (edges)]``.

    FIXED entries are the outlet temperatures of demands, sources and the
    slack, plus the two slack pressures; everything else is FREE.
    """

    GROUPS = ("T", "mdot", "p", "Tend")

    def __init__(self, topo: GridTopology):
        n, e = len(topo.nodes), len(topo.edges)
        self.n_nodes, self.n_edges = n, e
        self.size = 2 * n + 2 * e
        self.T = np.arange(n)
        self.p = np.arange(n, 2 * n)
        self.mdot = np.arange(2 * n, 2 * n + e)
        self.Tend = np.arange(2 * n + e, 2 * n + 2 * e)
        self.names = (
            [f"T[{v}]" for v in topo.nodes]
            + [f"p[{v}]" for v in topo.nodes]
            + [f"mdot[{x.name}]" for x in topo.edges]
            + [f"Tend[{x.name}]" for x in topo.edges]
        )
        self.index = {name: i for i, name in enumerate(self.names)}

        fixed = np.zeros(self.size, dtype=bool)
        values = np.zeros(self.size)
        n_pipes = len(topo.passive_edges)
        for k, edge in enumerate(topo.edges[n_pipes:], start=n_pipes):
            fixed[self.Tend[k]] = True
            values[self.Tend[k]] = edge.t_set
        s = topo.slack_edge
        for node, p_set in ((s.to, s.p_supply), (s.frm, s.p_return)):
            idx = self.p[topo.node_index[node]]
            fixed[idx] = True
            values[idx] = p_set
        self.fixed_mask = fixed
        self.fixed_idx = np.flatnonzero(fixed)
        self.free_idx = np.flatnonzero(~fixed)
        self.fixed_values = values[fixed]
        self.n_free = len(self.free_idx)

    def group_of(self, i: int) -> str:
        return self.names[i].split("[", 1)[0]

    def group_indices(self, group: str, free_only: bool = False) -> np.ndarray:
        idx = getattr(self, group)
        if free_only:
            idx = idx[~self.fixed_mask[idx]]
        return idx

    def embed(self, free_values: np.ndarray) -> np.ndarray:
        """Full state(s) from FREE entries, with FIXED entries set from the setpoints."""
        free_values = np.asarray(free_values, dtype=float)
        out = np.empty(free_values.shape[:-1] + (self.size,))
        out[..., self.free_idx] = free_values
        out[..., self.fixed_idx] = self.fixed_values
        return out

    def lookup(self, names: Iterable[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.index]
        if missing:
            raise KeyError(f"unknown state names: {missing}")
        return np.array([self.index[n] for n in names], dtype=int)


@dataclass(frozen=True)
class GridState:
    """Full state vector bound to a topology layout."""

    values: np.ndarray
    layout: StateLayout = field(repr=False)

    @property
    def node_temperature(self) -> np.ndarray:
        return self.values[self.layout.T]

    @property
    def node_pressure(self) -> np.ndarray:
        return self.values[self.layout.p]

    @property
    def edge_massflow(self) -> np.ndarray:
        return self.values[self.layout.mdot]

    @property
    def edge_end_temperature(self) -> np.ndarray:
        return self.values[self.layout.Tend]

    @property
    def free(self) -> np.ndarray:
        return self.values[self.layout.free_idx]

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.layout.index[name]])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.layout.names, self.values.tolist()))


# -- grid equations -------------------------------------------------------------

class GridEquations:
    """Residual operator e(x, q, eta) and its analytic Jacobian, vectorised over a batch.

    Equation order: mass conservation (all nodes but the slack inlet, whose
    balance is implied by the others), mixing (every node), pipe pressure
    drop, pipe heat loss, heat exchange of demands and sources.
    """

    def __init__(self, topo: GridTopology):
        self.topo = topo
        lay = self.layout = topo.layout
        nidx = topo.node_index
        N, E = lay.n_nodes, lay.n_edges
        P = len(topo.passive_edges)
        A = len(topo.active_edges)
        edges = topo.edges
        self.frm = np.array([nidx[e.frm] for e in edges])
        self.to = np.array([nidx[e.to] for e in edges])
        self.n_pipes, self.n_active = P, A
        pipes = topo.passive_edges
        self.k = np.array([p.k for p in pipes])
        # exponent constant of the pipe heat loss, l*lambda/(1000 cp) in kg/s
        self.decay = np.array([p.length * p.lam for p in pipes]) / (1000.0 * topo.cp)
        self.cp = topo.cp
        self.t_amb = topo.ambient_temperature
        self.pipe_idx = np.arange(P)
        self.active_idx = np.arange(P, P + A)

        inc = np.zeros((N, E))
        inc[self.frm, np.arange(E)] += 1.0
        inc[self.to, np.arange(E)] -= 1.0
        self.mass_node = np.array([i for i in range(N) if i != nidx[topo.slack_edge.frm]])
        self.incidence = inc[self.mass_node]
        self.into = np.zeros((N, E))
        self.into[self.to, np.arange(E)] = 1.0
        self.outof = np.zeros((N, E))
        self.outof[self.frm, np.arange(E)] = 1.0

        n_mass = len(self.mass_node)
        self.rows = {
            "mass": np.arange(n_mass),
            "mix": n_mass + np.arange(N),
            "pipe_p": n_mass + N + np.arange(P),
            "pipe_T": n_mass + N + P + np.arange(P),
            "q": n_mass + N + 2 * P + np.arange(A),
        }
        self.n_eq = n_mass + N + 2 * P + A
        if self.n_eq != lay.n_free:
            raise TopologyError([f"{self.n_eq} equations for {lay.n_free} free states"])
        self.equation_names = (
            [f"mass[{topo.nodes[i]}]" for i in self.mass_node]
            + [f"mix[{v}]" for v in topo.nodes]
            + [f"pressure[{p.name}]" for p in pipes]
            + [f"heatloss[{p.name}]" for p in pipes]
            + [f"exchange[{e.name}]" for e in topo.active_edges]
        )
        self._build_pattern()

    def _build_pattern(self):
        """Sparsity pattern of de/dx over FULL columns; values filled per call."""
        lay, r = self.layout, self.rows
        e_all = np.arange(lay.n_edges)
        pp, aa = self.pipe_idx, self.active_idx
        inc_nz = np.nonzero(self.incidence)
        blocks = [
            # mass conservation: constant +-1 on mdot
            (r["mass"][inc_nz[0]], lay.mdot[inc_nz[1]]),
            # mixing: diagonal T_i, Tend at receiving node (both ends), mdot at both ends
            (r["mix"], lay.T),
            (r["mix"][self.to], lay.Tend[e_all]),
            (r["mix"][self.frm], lay.Tend[e_all]),
            (r["mix"][self.to], lay.mdot[e_all]),
            (r["mix"][self.frm], lay.mdot[e_all]),
            # pipe pressure
            (r["pipe_p"], lay.p[self.frm[pp]]),
            (r["pipe_p"], lay.p[self.to[pp]]),
            (r["pipe_p"], lay.mdot[pp]),
            # pipe heat loss
            (r["pipe_T"], lay.Tend[pp]),
            (r["pipe_T"], lay.T[self.frm[pp]]),
            (r["pipe_T"], lay.T[self.to[pp]]),
            (r["pipe_T"], lay.mdot[pp]),
            # heat exchange
            (r["q"], lay.mdot[aa]),
            (r["q"], lay.T[self.frm[aa]]),
        ]
        rows = np.concatenate([b[0] for b in blocks])
        cols = np.concatenate([b[1] for b in blocks])
        self._mass_vals = self.incidence[inc_nz]
        free_pos = np.full(lay.size, -1)
        free_pos[lay.free_idx] = np.arange(lay.n_free)
        keep = free_pos[cols] >= 0
        self._keep = keep
        self._rows = rows[keep]
        self._cols_free = free_pos[cols[keep]]
        self._rows_all, self._cols_all = rows, cols

    # -- pieces shared by residual and Jacobian
    def _split(self, X):
        lay = self.layout
        return X[:, lay.T], X[:, lay.p], X[:, lay.mdot], X[:, lay.Tend]

    def _pipe_attenuation(self, m_pipe):
        """exp(-decay/|mdot|) and its derivative w.r.t. mdot; both 0 at mdot = 0."""
        am = np.abs(m_pipe)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            att = np.where(am > 0, np.exp(-self.decay / am), 0.0)
            d_att = np.where(att > 0, att * self.decay / (m_pipe * am), 0.0)
        return att, d_att

    def residual(self, X: np.ndarray, Q: np.ndarray) -> np.ndarray:
        """Residuals of the FREE equations for a batch of full states ``X`` (B, n)."""
        X = np.atleast_2d(X)
        Q = np.atleast_2d(Q)
        T, p, m, Te = self._split(X)
        P = self.n_pipes
        out = np.empty((X.shape[0], self.n_eq))
        r = self.rows
        out[:, r["mass"]] = m @ self.incidence.T

        w_in = np.maximum(m, 0.0)
        w_out = np.maximum(-m, 0.0)
        inflow = w_in @ self.into.T + w_out @ self.outof.T
        heat_in = (w_in * Te) @ self.into.T + (w_out * Te) @ self.outof.T
        stagnant = inflow < STAGNANT_FLOW
        out[:, r["mix"]] = np.where(stagnant, T - self.t_amb, T * inflow - heat_in)

        mp = m[:, :P]
        Tf, Tt = T[:, self.frm[:P]], T[:, self.to[:P]]
        out[:, r["pipe_p"]] = p[:, self.frm[:P]] - p[:, self.to[:P]] - self.k * mp * np.abs(mp)
        att, _ = self._pipe_attenuation(mp)
        t_up = np.where(mp >= 0, Tf, Tt)
        out[:, r["pipe_T"]] = Te[:, :P] - (t_up - self.t_amb) * att - self.t_amb

        a = self.active_idx
        out[:, r["q"]] = m[:, a] * self.cp * (T[:, self.frm[a]] - Te[:, a]) - Q
        return out

    def _jacobian_values(self, X):
        T, p, m, Te = self._split(X)
        B = X.shape[0]
        P = self.n_pipes
        fr, to = self.frm, self.to
        pos, neg = m > 0, m < 0
        w_in = np.maximum(m, 0.0)
        w_out = np.maximum(-m, 0.0)
        inflow = w_in @ self.into.T + w_out @ self.outof.T
        stagnant = inflow < STAGNANT_FLOW
        live_to = ~stagnant[:, to]
        live_fr = ~stagnant[:, fr]

        mp = m[:, :P]
        att, d_att = self._pipe_attenuation(mp)
        Tf, Tt = T[:, fr[:P]], T[:, to[:P]]
        up_is_from = mp >= 0
        t_up = np.where(up_is_from, Tf, Tt)
        a = self.active_idx
        vals = [
            np.broadcast_to(self._mass_vals, (B, len(self._mass_vals))),
            np.where(stagnant, 1.0, inflow),
            -w_in * live_to,
            -w_out * live_fr,
            (T[:, to] - Te) * pos * live_to,
            -(T[:, fr] - Te) * neg * live_fr,
            np.ones((B, P)),
            -np.ones((B, P)),
            -2.0 * self.k * np.maximum(np.abs(mp), MIN_FLOW_SLOPE),
            np.ones((B, P)),
            -att * up_is_from,
            -att * ~up_is_from,
            -(t_up - self.t_amb) * d_att,
            self.cp * (T[:, fr[a]] - Te[:, a]),
            m[:, a] * self.cp,
        ]
        return np.concatenate(vals, axis=1)

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        """de/dx restricted to FREE columns, shape (B, n_eq, n_free)."""
        X = np.atleast_2d(X)
        vals = self._jacobian_values(X)[:, self._keep]
        J = np.zeros((X.shape[0], self.n_eq, self.layout.n_free))
        J[:, self._rows, self._cols_free] = vals
        return J

    def jacobian_full(self, X: np.ndarray) -> np.ndarray:
        """de/dx over all state columns, shape (B, n_eq, n_state)."""
        X = np.atleast_2d(X)
        vals = self._jacobian_values(X)
        J = np.zeros((X.shape[0], self.n_eq, self.layout.size))
        J[:, self._rows_all, self._cols_all] = vals
        return J

    def implied_heat_exchange(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        T, _, m, Te = self._split(X)
        a = self.active_idx
        return m[:, a] * self.cp * (T[:, self.frm[a]] - Te[:, a])


# -- convenience wrappers on single states -----------------------------------------

def _values(state) -> np.ndarray:
    return state.values if isinstance(state, GridState) else np.asarray(state, dtype=float)


def residual(state, q, topo: GridTopology) -> np.ndarray:
    """Residual vector of the grid equations at one state (one entry per FREE equation)."""
    x = _values(state)
    q = np.asarray(q, dtype=float)
    lay = topo.layout
    if x.shape != (lay.size,):
        raise ValueError(f"state has shape {x.shape}, layout expects ({lay.size},)")
    if q.shape != (len(topo.active_edges),):
        raise ValueError(f"q has shape {q.shape}, topology has {len(topo.active_edges)} exchanges")
    return topo.equations.residual(x[None], q[None])[0]


def implied_heat_exchange(state, topo: GridTopology) -> np.ndarray:
    """q_ij = mdot_ij cp (T_i - Tend_ij) for every demand and source edge."""
    return topo.equations.implied_heat_exchange(_values(state)[None])[0]


def pipe_outlet_temperature(t_in, mdot, length, lam, cp, t_amb) -> float:
    """Steady-state outlet temperature of a pipe for flow |mdot| > 0."""
    return (t_in - t_amb) * np.exp(-length * lam / (1000.0 * cp * abs(mdot))) + t_amb


# -- reference grids ----------------------------------------------------------------

LOOP_K = 0.028
LOOP_LAMBDA = 0.2325
LOOP_RETURN_TEMPERATURES = {"A": 50.0, "B": 60.0, "C": 55.0, "D": 40.0}


def make_loop_grid(ambient_temperature: float = 10.0, cp: float = 4.18) -> GridTopology:
    """The 18-node ring grid: one heating plant and demands A-D on a four-node loop.

    The plant feeds loop node c; the loop runs c-a-b-d-c with each demand
    hanging off its loop node through a 70 m service pipe. Loop and plant
    pipes are 300 m. The return network mirrors the supply network.
    """
    pipes = []

    def pair(a, b, length):
        pipes.append(Pipe(f"s_{a}", f"s_{b}", length, LOOP_K, LOOP_LAMBDA))
        pipes.append(Pipe(f"r_{b}", f"r_{a}", length, LOOP_K, LOOP_LAMBDA))

    pair("hp", "c", 300.0)
    for a, b in (("c", "a"), ("a", "b"), ("d", "b"), ("c", "d")):
        pair(a, b, 300.0)
    for d in "abcd":
        pair(d, d.upper(), 70.0)
    # supply pipes first, then return pipes, for a readable layout
    pipes = pipes[0::2] + pipes[1::2]
    demands = tuple(ActiveEdge(f"s_{d}", f"r_{d}", t, name=d)
                    for d, t in LOOP_RETURN_TEMPERATURES.items())
    sites = ["hp", "a", "b", "c", "d", "A", "B", "C", "D"]
    nodes = tuple(f"s_{s}" for s in sites) + tuple(f"r_{s}" for s in sites)
    roles = {n: ("supply" if n.startswith("s_") else "return") for n in nodes}
    return GridTopology(
        nodes=nodes,
        passive_edges=tuple(pipes),
        demand_edges=demands,
        source_edges=(),
        slack_edge=SlackEdge("r_hp", "s_hp", 120.0, 6.5, 3.0, name="hp"),
        ambient_temperature=ambient_temperature,
        cp=cp,
        node_roles=roles,
    )


def make_tree_grid(n_demands: int, seed: int = 0) -> GridTopology:
    """Deterministic random radial grid with ``n_demands`` consumers.

    Defaults: distribution pipes 100-400 m, service pipes 20-80 m,
    lambda in [0.2, 0.3] W/(m K), demand return setpoints in [40, 60] degC,
    plant at 120 degC with 6.5 / 3.0 bar. The pressure-loss coefficient of a
    pipe is 0.028 bar/(kg/s)^2 per 300 m, divided by the squared number of
    downstream consumers (so larger trunks are proportionally wider) and
    jittered by +-20 %. ``n_demands == 1`` gives the minimal two-pipe grid.
    """
    if n_demands < 1:
        raise ValueError(f"n_demands must be >= 1, got {n_demands}")
    rng = np.random.default_rng(seed)
    n_junctions = 0 if n_demands == 1 else (n_demands + 1) // 2
    parent = {}
    for j in range(1, n_junctions):
        parent[f"j{j}"] = f"j{int(rng.integers(j))}"
    if n_junctions:
        parent["j0"] = "hp"
    for d in range(n_demands):
        home = d if d < n_junctions else int(rng.integers(n_junctions)) if n_junctions else None
        parent[f"d{d + 1}"] = f"j{home}" if home is not None else "hp"

    downstream = {name: 0 for name in parent}
    for name in parent:
        if name.startswith("d"):
            node = name
            while node in parent:
                node = parent[node]
                if node in downstream:
                    downstream[node] += 1
    pipes_s, pipes_r = [], []
    for child, par in parent.items():
        service = child.startswith("d")
        length = float(rng.uniform(20, 80) if service else rng.uniform(100, 400))
        if n_demands == 1:
            length = 300.0
        n_down = 1 if service else max(downstream[child], 1)
        k = LOOP_K * (length / 300.0) / n_down**2 * float(rng.uniform(0.8, 1.2))
        lam = float(rng.uniform(0.2, 0.3))
        pipes_s.append(Pipe(f"s_{par}", f"s_{child}", length, k, lam))
        pipes_r.append(Pipe(f"r_{child}", f"r_{par}", length, k, lam))
    demands = tuple(
        ActiveEdge(f"s_d{d}", f"r_d{d}", float(rng.uniform(40, 60)), name=f"D{d}")
        for d in range(1, n_demands + 1)
    )
    sites = ["hp"] + [f"j{j}" for j in range(n_junctions)] + [f"d{d}" for d in range(1, n_demands + 1)]
    nodes = tuple(f"s_{s}" for s in sites) + tuple(f"r_{s}" for s in sites)
    return GridTopology(
        nodes=nodes,
        passive_edges=tuple(pipes_s + pipes_r),
        demand_edges=demands,
        source_edges=(),
        slack_edge=SlackEdge("r_hp", "s_hp", 120.0, 6.5, 3.0, name="hp"),
        ambient_temperature=10.0,
        cp=4.18,
        node_roles={n: ("supply" if n.startswith("s_") else "return") for n in nodes},
    )
