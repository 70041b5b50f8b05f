"""How far can a steady-state supply temperature be off right after a load step?

Pipe transport delay and the dynamic outlet temperature of a pipe, and the
bound obtained by freezing the mass flows at their post-step value: after an
instantaneous demand change the flows jump while temperatures still hold
their old values; the flow at that instant brackets the flow during the
whole transition, so the temperatures it produces bound the transient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from . import nr_solver
from .grid_model import GridTopology
from .inference import TruncatedNormalPrior

WATER_DENSITY = 960.0  # kg/m^3 at ~100 degC
DEFAULT_AREA = np.pi * 0.08**2 / 4  # m^2, DN80


@dataclass(frozen=True)
class PipeDynamicsParams:
    length: float  # m
    lam: float  # W/(m K)
    cp: float  # kJ/(kg K)
    rho: float = WATER_DENSITY
    area: float = DEFAULT_AREA
    t_amb: float = 10.0

    def __post_init__(self):
        if not (self.rho > 0 and self.area > 0 and self.length > 0 and self.cp > 0):
            raise ValueError("rho, area, length and cp must be > 0")

    @property
    def fluid_mass(self) -> float:
        """Mass of water in the pipe, A l rho [kg]."""
        return self.area * self.length * self.rho

    @property
    def decay_rate(self) -> float:
        """lambda / (cp rho A) in 1/s."""
        return self.lam / (1000.0 * self.cp * self.rho * self.area)


def delay_tau(t_edges, mdot, fluid_mass: float) -> float:
    """Transport delay at the end of a piecewise-constant mass-flow history.

    ``mdot[k]`` is the flow on ``[t_edges[k], t_edges[k+1])``. Solves
    int_{t-tau}^{t} |mdot| dt' = fluid_mass for tau, walking back from
    ``t = t_edges[-1]``.
    """
    t_edges = np.asarray(t_edges, dtype=float)
    mdot = np.abs(np.asarray(mdot, dtype=float))
    if len(t_edges) != len(mdot) + 1 or np.any(np.diff(t_edges) < 0):
        raise ValueError("need increasing segment edges, one more than flow values")
    need = float(fluid_mass)
    tau = 0.0
    for k in range(len(mdot) - 1, -1, -1):
        dt = t_edges[k + 1] - t_edges[k]
        moved = mdot[k] * dt
        if moved >= need:
            return tau + need / mdot[k]
        need -= moved
        tau += dt
    raise ValueError(f"history too short: {fluid_mass - need:.6g} of {fluid_mass:.6g} kg passed the pipe")


def delay_tau_fn(mdot_fn, t: float, fluid_mass: float, t_start: float) -> float:
    """Transport delay for a general flow history ``mdot_fn(t)`` by root-finding on the cumulative mass."""
    def passed(tau):
        return integrate.quad(lambda s: abs(mdot_fn(s)), t - tau, t, limit=200)[0] - fluid_mass

    span = t - t_start
    if span <= 0 or passed(span) < 0:
        raise ValueError("history too short for the pipe's fluid mass")
    return optimize.brentq(passed, 0.0, span, xtol=1e-12, rtol=1e-12)


def dynamic_outlet_temperature(t_inlet, tau: float, params: PipeDynamicsParams, t: float | None = None) -> float:
    """T_out(t) = (T_in(t - tau) - T_a) exp(-lambda tau / (cp rho A)) + T_a.

    ``t_inlet`` is either the inlet temperature that entered ``tau`` ago or a
    callable history evaluated at ``t - tau``.
    """
    t_in = t_inlet(t - tau) if callable(t_inlet) else float(t_inlet)
    return (t_in - params.t_amb) * np.exp(-params.decay_rate * tau) + params.t_amb


def pipe_params(topo: GridTopology, rho: float = WATER_DENSITY, area=DEFAULT_AREA) -> dict[str, PipeDynamicsParams]:
    """Per-pipe dynamics parameters; ``area`` is a scalar or a dict by pipe name."""
    out = {}
    for p in topo.passive_edges:
        a = area.get(p.name, DEFAULT_AREA) if isinstance(area, dict) else area
        out[p.name] = PipeDynamicsParams(p.length, p.lam, topo.cp, rho, a, topo.ambient_temperature)
    return out


def frozen_flow_temperatures(topo: GridTopology, x_before, q_after, params: dict | None = None,
                             cfg: nr_solver.SolverConfig | None = None) -> np.ndarray:
    """State right after the step, with flows frozen at that instant and temperatures relaxed.

    Flows and pressures satisfy the new heat exchanges at the pre-step
    temperatures; every pipe outlet then follows the dynamic outlet equation
    with the delay of that constant flow.
    """
    X, psi = nr_solver.solve_hydraulics(x_before, q_after, topo, cfg)
    if not psi[0] <= 1e-10:
        raise nr_solver.SolverError(f"hydraulic solve after the step did not converge (psi={psi[0]:.3g})")
    X = nr_solver.solve_thermal(X, q_after, topo)[0]
    if params is not None:
        # at constant flow the dynamic pipe equation is the steady one; make that explicit
        lay = topo.layout
        for k, pipe in enumerate(topo.passive_edges):
            m = X[lay.mdot[k]]
            if abs(m) < 1e-9:
                continue
            up = pipe.frm if m > 0 else pipe.to
            pp = params[pipe.name]
            tau = pp.fluid_mass / abs(m)
            expect = dynamic_outlet_temperature(X[lay.T[topo.node_index[up]]], tau, pp)
            if abs(expect - X[lay.Tend[k]]) > 1e-8 * max(1.0, abs(expect)):
                raise AssertionError(f"pipe {pipe.name}: dynamic and steady outlet temperatures differ")
    return X


@dataclass
class BoundResult:
    demand_names: list[str]
    gap: np.ndarray  # bound - new steady supply temperature, per demand
    t_bound: np.ndarray
    t_steady_after: np.ndarray
    t_steady_before: np.ndarray


def step_response_bound(topo: GridTopology, q_before, scale_factor: float,
                        cfg: nr_solver.SolverConfig | None = None, params: dict | None = None) -> BoundResult:
    """Bound temperature minus new steady-state temperature at each demand's supply node."""
    q_before = np.asarray(q_before, dtype=float)
    q_after = scale_factor * q_before
    before, rep0 = nr_solver.solve(q_before, topo, cfg)
    after, rep1 = nr_solver.solve(q_after, topo, cfg)
    if not (rep0.converged and rep1.converged):
        raise nr_solver.SolverError("steady-state solve before or after the step did not converge")
    X = frozen_flow_temperatures(topo, before.values, q_after, params, cfg)
    lay = topo.layout
    inlet = lay.T[[topo.node_index[e.frm] for e in topo.demand_edges]]
    t_bound = X[inlet]
    t_after = after.values[inlet]
    return BoundResult([e.name for e in topo.demand_edges], t_bound - t_after, t_bound, t_after,
                       before.values[inlet])


@dataclass
class BoundExperiment:
    scales: list[float]
    demand_names: list[str]
    gaps: dict = field(default_factory=dict)  # scale -> (n_samples, n_demands) signed gaps
    rho: float = WATER_DENSITY
    area: float = DEFAULT_AREA

    def summary(self) -> dict:
        out = {"rho_kg_per_m3": self.rho, "area_m2": self.area, "scales": {}}
        for s in self.scales:
            g = np.abs(self.gaps[s])
            out["scales"][f"{s:g}"] = {
                name: {"mean": float(g[:, k].mean()), "std": float(g[:, k].std(ddof=1)) if len(g) > 1 else 0.0}
                for k, name in enumerate(self.demand_names)
            }
        return out

    def markdown(self) -> str:
        summ = self.summary()["scales"]
        head = "| demand | " + " | ".join(f"{float(s):.0%}" for s in summ) + " |"
        lines = [head, "|---|" + "---|" * len(summ)]
        for name in self.demand_names:
            cells = [f"({summ[s][name]['mean']:.3f} +- {summ[s][name]['std']:.3f}) degC" for s in summ]
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def bound_experiment(topo: GridTopology, prior: TruncatedNormalPrior, scales=(0.7, 1.3), n_samples: int = 50,
                     seed: int = 0, cfg: nr_solver.SolverConfig | None = None, rho: float = WATER_DENSITY,
                     area: float = DEFAULT_AREA) -> BoundExperiment:
    """Bound gaps for ``n_samples`` prior draws, every draw scaled by each factor in ``scales``."""
    rng = np.random.default_rng([seed, 4])
    Q = prior.sample(n_samples, rng)
    params = pipe_params(topo, rho, area)
    exp = BoundExperiment(list(scales), [e.name for e in topo.demand_edges], rho=rho, area=area)
    for s in scales:
        exp.gaps[s] = np.array([step_response_bound(topo, q, s, cfg, params).gap for q in Q])
    return exp
