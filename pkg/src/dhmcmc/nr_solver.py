"""Exact map q -> x: alternating hydraulic/thermal presolver followed by damped Newton-Raphson.

Everything runs on batches of heat-exchange vectors; ``solve`` is the
single-sample convenience wrapper.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.linalg

from .grid_model import GridState, GridTopology

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class DegenerateInputError(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    psi_tol: float = 1e-5
    max_iter: int = 50
    presolve_precision: float = 1.0  # stop sweeping once psi < this
    presolve_gain: float = 1e-2  # ... or once the relative psi improvement drops below this
    backtrack: float = 0.5
    max_halvings: int = 10
    max_presolve_sweeps: int = 50
    hydraulic_tol: float = 1e-14
    presolve_min_dt: float = 5.0  # K; floor on inlet - setpoint in the hydraulic sweep
    polish_steps: int = 2  # extra Newton steps once psi_tol is met
    rescue: bool = True  # retry stalled samples by flow flipping and continuation in q
    rescue_flow: float = 0.01  # kg/s; pipe flows below this are candidates for flipping
    batch_size: int = 256

    def __post_init__(self):
        for name in ("psi_tol", "presolve_precision", "presolve_gain", "backtrack", "hydraulic_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SolverConfig.{name} must be > 0")
        if not 0 < self.backtrack < 1:
            raise ValueError("SolverConfig.backtrack must lie in (0, 1)")
        if self.polish_steps < 0:
            raise ValueError("SolverConfig.polish_steps must be >= 0")
        if self.max_iter < 1 or self.batch_size < 1:
            raise ValueError("SolverConfig.max_iter and batch_size must be >= 1")


#: termination used for the coarse timing comparison
LOOSE = SolverConfig(psi_tol=10.0)


@dataclass
class SolveReport:
    converged: bool
    psi: float
    presolve_iterations: int
    nr_iterations: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchSolution:
    states: np.ndarray  # (B, n_state)
    converged: np.ndarray
    psi: np.ndarray
    presolve_iterations: np.ndarray
    nr_iterations: np.ndarray

    def report(self, i: int) -> SolveReport:
        return SolveReport(bool(self.converged[i]), float(self.psi[i]),
                           int(self.presolve_iterations[i]), int(self.nr_iterations[i]))


def initial_state(Q: np.ndarray, topo: GridTopology) -> np.ndarray:
    """Setpoint temperatures, side pressures from the slack and 0.1 kg/s everywhere."""
    lay = topo.layout
    s = topo.slack_edge
    t_ret = np.mean([e.t_set for e in topo.demand_edges]) if topo.demand_edges else s.t_set
    supply = np.array([n in topo.supply_nodes for n in topo.nodes])
    x = np.empty(lay.size)
    x[lay.T] = np.where(supply, s.t_set, t_ret)
    x[lay.p] = np.where(supply, s.p_supply, s.p_return)
    x[lay.mdot] = 0.1
    x[lay.Tend] = x[lay.T][topo.equations.frm]
    x[lay.fixed_idx] = lay.fixed_values
    return np.repeat(x[None], len(Q), axis=0)


def _singular_equation(J: np.ndarray, names: list[str], rows: np.ndarray) -> str:
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = scipy.linalg.lu_factor(J, check_finite=False)
    perm = np.arange(len(J))
    for i, p in enumerate(piv):
        perm[i], perm[p] = perm[p], perm[i]
    diag = np.abs(np.diag(lu))
    k = int(np.argmin(diag))
    return names[rows[perm[k]]]


def _solve_linear(J, rhs, eq_names, rows, on_singular):
    """Batched J dx = rhs; singular systems raise or come back as NaN."""
    try:
        return np.linalg.solve(J, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.full(rhs.shape, np.nan)
        for b in range(len(J)):
            try:
                out[b] = np.linalg.solve(J[b], rhs[b])
            except np.linalg.LinAlgError:
                if on_singular == "raise":
                    eq = _singular_equation(J[b], eq_names, rows)
                    raise SolverError(f"singular Jacobian, pivot equation {eq}") from None
        return out


def _damped_newton(eqs, X, Q, rows, cols, tol, max_iter, cfg, on_singular="fail"):
    """Newton on the sub-system (rows, free cols) with residual-norm backtracking.

    Returns (X, psi over ``rows``, iterations, ok) with ok False for samples
    that stalled or hit a singular system.
    """
    lay = eqs.layout
    var = lay.free_idx[cols]
    B = len(X)
    ok = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    R = eqs.residual(X, Q)[:, rows]
    psi = np.einsum("ij,ij->i", R, R)
    for _ in range(max_iter):
        active = np.flatnonzero(ok & (psi > tol))
        if active.size == 0:
            break
        Xa, Qa = X[active], Q[active]
        J = eqs.jacobian(Xa)[:, rows][:, :, cols]
        dx = _solve_linear(J, -R[active], eqs.equation_names, rows, on_singular)
        bad = ~np.all(np.isfinite(dx), axis=1)
        dx[bad] = 0.0
        step = np.ones(len(active))
        pending = ~bad
        new_X, new_R, new_psi = Xa.copy(), R[active].copy(), psi[active].copy()
        for _h in range(cfg.max_halvings + 1):
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            Xt = Xa[idx].copy()
            Xt[:, var] += step[idx, None] * dx[idx]
            Rt = eqs.residual(Xt, Qa[idx])[:, rows]
            pt = np.einsum("ij,ij->i", Rt, Rt)
            better = np.isfinite(pt) & (pt < psi[active][idx])
            acc = idx[better]
            new_X[acc], new_R[acc], new_psi[acc] = Xt[better], Rt[better], pt[better]
            pending[acc] = False
            step[idx[~better]] *= cfg.backtrack
        stalled = pending | bad
        X[active], R[active], psi[active] = new_X, new_R, new_psi
        iters[active] += 1
        ok[active[stalled]] = False
    return X, psi, iters, ok


def _check_inputs(Q, topo):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[1] != len(topo.active_edges):
        raise ValueError(f"q has {Q.shape[1]} entries, topology has {len(topo.active_edges)} exchanges")
    if not np.all(np.isfinite(Q)):
        raise ValueError("q must be finite")
    dead = np.all(Q == 0.0, axis=1)
    if np.any(dead):
        raise DegenerateInputError(
            f"all heat exchanges are zero for sample(s) {np.flatnonzero(dead)[:5].tolist()}: "
            "the hydraulic problem has no flow to solve for")
    return Q


def _subsystems(eqs):
    """(rows, free cols) of the hydraulic and the thermal sub-problems."""
    lay = eqs.layout
    r = eqs.rows
    free_pos = np.full(lay.size, -1)
    free_pos[lay.free_idx] = np.arange(lay.n_free)
    hyd_rows = np.concatenate([r["mass"], r["pipe_p"], r["q"]])
    hyd_cols = free_pos[np.concatenate([lay.mdot, lay.p])]
    th_rows = np.concatenate([r["mix"], r["pipe_T"]])
    th_cols = free_pos[np.concatenate([lay.T, lay.Tend])]
    return hyd_rows, hyd_cols[hyd_cols >= 0], th_rows, th_cols[th_cols >= 0]


def solve_hydraulics(X, Q, topo: GridTopology, cfg: SolverConfig | None = None, on_singular="nan"):
    """Flows and pressures for heat exchanges ``Q`` with all temperatures held at their values in ``X``.

    Returns (X with updated flows/pressures, psi of the hydraulic equations).
    """
    cfg = cfg or SolverConfig()
    eqs = topo.equations
    hyd_rows, hyd_cols, _, _ = _subsystems(eqs)
    X, psi, _, _ = _damped_newton(eqs, np.array(X, dtype=float, ndmin=2), np.atleast_2d(Q), hyd_rows,
                                  hyd_cols, cfg.hydraulic_tol, cfg.max_iter, cfg, on_singular)
    return X, psi


def solve_thermal(X, Q, topo: GridTopology, on_singular="nan"):
    """Temperatures for the flows in ``X``: the thermal equations are linear at fixed flows."""
    eqs = topo.equations
    _, _, th_rows, th_cols = _subsystems(eqs)
    X = np.array(X, dtype=float, ndmin=2)
    Q = np.atleast_2d(Q)
    R = eqs.residual(X, Q)[:, th_rows]
    J = eqs.jacobian(X)[:, th_rows][:, :, th_cols]
    dT = _solve_linear(J, -R, eqs.equation_names, th_rows, on_singular)
    X[:, eqs.layout.free_idx[th_cols]] += dT
    return X


def _presolve(eqs, X, Q, cfg, on_singular):
    lay = eqs.layout
    hyd_rows, hyd_cols, th_rows, th_cols = _subsystems(eqs)
    B = len(X)
    loss = np.full(B, np.inf)
    gain = np.full(B, np.inf)
    sweeps = np.zeros(B, dtype=int)
    ok = np.ones(B, dtype=bool)
    for _ in range(cfg.max_presolve_sweeps):
        active = np.flatnonzero(ok & (loss >= cfg.presolve_precision) & (gain >= cfg.presolve_gain))
        if active.size == 0:
            break
        Xa, Qa = X[active], Q[active]
        # a consumer inlet cooled below its setpoint would reverse the consumer flow
        Xh = Xa.copy()
        inlet = lay.T[eqs.frm[eqs.active_idx]]
        t_set = Xa[:, lay.Tend[eqs.active_idx]]
        sign = eqs.topo.heat_exchange_signs
        lifted = sign * np.maximum(sign * (Xh[:, inlet] - t_set), cfg.presolve_min_dt)
        Xh[:, inlet] = t_set + lifted
        Xh, _, _, _ = _damped_newton(eqs, Xh, Qa, hyd_rows, hyd_cols,
                                     cfg.hydraulic_tol, 30, cfg, on_singular)
        hyd = np.concatenate([lay.mdot, lay.p])
        Xa[:, hyd] = Xh[:, hyd]
        # thermal equations are linear in temperatures at fixed flows: one exact step
        R = eqs.residual(Xa, Qa)[:, th_rows]
        J = eqs.jacobian(Xa)[:, th_rows][:, :, th_cols]
        dT = _solve_linear(J, -R, eqs.equation_names, th_rows, on_singular)
        ok_t = np.all(np.isfinite(dT), axis=1)
        Xa[:, lay.free_idx[th_cols]] += np.where(ok_t[:, None], dT, 0.0)
        Rf = eqs.residual(Xa, Qa)
        new_loss = np.einsum("ij,ij->i", Rf, Rf)
        with np.errstate(invalid="ignore"):
            g = np.where(np.isinf(loss[active]), np.inf, (loss[active] - new_loss) / loss[active])
        X[active] = Xa
        gain[active] = g
        loss[active] = new_loss
        sweeps[active] += 1
        ok[active] &= ok_t
    return X, loss, sweeps


def presolve_batch(Q, topo: GridTopology, cfg: SolverConfig | None = None):
    """Presolver sweeps only; returns (states, psi, sweeps)."""
    cfg = cfg or SolverConfig()
    Q = _check_inputs(Q, topo)
    X = initial_state(Q, topo)
    return _presolve(topo.equations, X, Q, cfg, on_singular="raise")


def presolve(q, topo: GridTopology, cfg: SolverConfig | None = None) -> GridState:
    X, _, _ = presolve_batch(np.asarray(q, dtype=float)[None], topo, cfg)
    return GridState(X[0], topo.layout)


def _newton_full(eqs, X, Q, cfg, tol, on_singular):
    rows = np.arange(eqs.n_eq)
    cols = np.arange(eqs.layout.n_free)
    return _damped_newton(eqs, X, Q, rows, cols, tol, cfg.max_iter, cfg, on_singular)


def _flip_small_flows(X, eqs, threshold):
    """Reverse near-stagnant pipe flows: Newton cannot cross zero flow on its own
    because the heat-loss attenuation is flat there."""
    lay = eqs.layout
    X = X.copy()
    pipes = lay.mdot[: len(eqs.topo.passive_edges)]
    m = X[:, pipes]
    small = np.abs(m) < threshold
    X[:, pipes] = np.where(small, -np.where(m >= 0, 1.0, -1.0) * np.maximum(np.abs(m), 2 * threshold), m)
    return X, np.any(small, axis=1)


def _reference_q(q, topo):
    # equal magnitudes are comfortably inside the regime where the presolver works
    return topo.heat_exchange_signs * np.mean(np.abs(q))


def _rescue_one(eqs, q, anchor_x, anchor_q, cfg):
    """Walk from a solved anchor to ``q``, flipping stagnant flows when a step stalls."""
    tol = cfg.psi_tol
    for n in (8, 32):
        x = anchor_x[None].copy()
        reached = True
        for k in range(1, n + 1):
            qk = (anchor_q + (k / n) * (q - anchor_q))[None]
            xs, psi, _, _ = _newton_full(eqs, x, qk, cfg, tol, "nan")
            if not psi[0] <= tol:
                xf, any_small = _flip_small_flows(x, eqs, cfg.rescue_flow)
                if not any_small[0]:
                    reached = False
                    break
                xs, psi, _, _ = _newton_full(eqs, xf, qk, cfg, tol, "nan")
                if not psi[0] <= tol:
                    reached = False
                    break
            x = xs
        if reached:
            return x[0]
    return None


def _rescue(eqs, X, Q, psi, converged, cfg):
    for i in np.flatnonzero(~converged):
        xf, any_small = _flip_small_flows(X[i:i + 1], eqs, cfg.rescue_flow)
        if any_small[0]:
            xs, p, _, _ = _newton_full(eqs, xf, Q[i:i + 1], cfg, cfg.psi_tol, "nan")
            if p[0] <= cfg.psi_tol:
                X[i], psi[i], converged[i] = xs[0], p[0], True
                continue
        for anchor_x, anchor_q in _anchors(eqs, X, Q, converged, i, cfg):
            x = _rescue_one(eqs, Q[i], anchor_x, anchor_q, cfg)
            if x is not None:
                X[i] = x
                R = eqs.residual(x[None], Q[i:i + 1])
                psi[i] = float(np.sum(R * R))
                converged[i] = True
                break


def _anchors(eqs, X, Q, converged, i, cfg):
    """Solved starting points for continuation: nearest solved sample, then a reference q."""
    done = np.flatnonzero(converged)
    if done.size:
        scale = np.maximum(np.abs(Q).max(axis=0), 1e-12)
        j = done[np.argmin(np.linalg.norm((Q[done] - Q[i]) / scale, axis=1))]
        yield X[j], Q[j]
    ref_q = _reference_q(Q[i], eqs.topo)
    ref = _solve_chunk(ref_q[None], eqs.topo, replace(cfg, rescue=False), "nan")
    if ref[1][0]:
        yield ref[0][0], ref_q


def _solve_chunk(Q, topo, cfg, on_singular):
    eqs = topo.equations
    X = initial_state(Q, topo)
    X, _, sweeps = _presolve(eqs, X, Q, cfg, on_singular)
    X, psi, iters, ok = _newton_full(eqs, X, Q, cfg, cfg.psi_tol, on_singular)
    converged = ok & (psi <= cfg.psi_tol)
    if cfg.rescue and not converged.all():
        _rescue(eqs, X, Q, psi, converged, cfg)
    if cfg.polish_steps and converged.any():
        # quadratic convergence makes a couple of extra steps nearly free and
        # brings the round trip q -> x -> q down to rounding level
        idx = np.flatnonzero(converged)
        rows = np.arange(eqs.n_eq)
        cols = np.arange(topo.layout.n_free)
        Xp, pp, _, _ = _damped_newton(eqs, X[idx], Q[idx], rows, cols, 0.0, cfg.polish_steps,
                                      cfg, "nan")
        X[idx], psi[idx] = Xp, pp
    return X, converged, psi, sweeps, iters


def solve_batch(Q, topo: GridTopology, cfg: SolverConfig | None = None,
                on_singular: str = "fail") -> BatchSolution:
    """Solve e(x, q, eta) = 0 for every row of ``Q``.

    Non-convergent rows are reported through ``converged`` rather than raised.
    """
    cfg = cfg or SolverConfig()
    Q = _check_inputs(Q, topo)
    parts = [_solve_chunk(Q[i:i + cfg.batch_size], topo, cfg, on_singular)
             for i in range(0, len(Q), cfg.batch_size)]
    return BatchSolution(*(np.concatenate(p) for p in zip(*parts)))


def solve(q, topo: GridTopology, cfg: SolverConfig | None = None) -> tuple[GridState, SolveReport]:
    """Solve for the grid state at heat exchanges ``q``.

    Raises ``SolverError`` (naming the pivot equation) when the problem is
    singular; non-convergence is reported via ``SolveReport.converged``.
    """
    q = np.asarray(q, dtype=float)[None]
    # a singular iterate on the way (e.g. a flow crossing zero) is left to the
    # rescue path; only a failed solve is repeated to name the singular equation
    sol = solve_batch(q, topo, cfg, on_singular="fail")
    if not sol.converged[0]:
        sol = solve_batch(q, topo, cfg, on_singular="raise")
    report = sol.report(0)
    if not report.converged:
        logger.warning("NR did not converge: psi=%.3g after %d iterations", report.psi,
                       report.nr_iterations)
    return GridState(sol.states[0], topo.layout), report


def jacobian_dx_dq(q, topo: GridTopology, cfg: SolverConfig | None = None) -> np.ndarray:
    """dh/dq at the solution for ``q`` by the implicit function theorem, shape (n_state, n_q).

    Rows of FIXED state entries are zero.
    """
    state, report = solve(q, topo, cfg)
    if not report.converged:
        raise SolverError(f"solve did not converge at q={np.asarray(q).tolist()} (psi={report.psi:.3g})")
    return state_jacobian(state.values, topo)


def state_jacobian(x: np.ndarray, topo: GridTopology) -> np.ndarray:
    """dh/dq at a known solution ``x``."""
    eqs = topo.equations
    lay = topo.layout
    J = eqs.jacobian(np.asarray(x)[None])[0]
    # e contains "... - q" in the exchange rows, so de/dq = -I there
    rhs = np.zeros((eqs.n_eq, eqs.n_active))
    rhs[eqs.rows["q"], np.arange(eqs.n_active)] = 1.0
    try:
        dx = np.linalg.solve(J, rhs)
    except np.linalg.LinAlgError:
        eq = _singular_equation(J, eqs.equation_names, np.arange(eqs.n_eq))
        raise SolverError(f"de/dx is singular (pivot equation {eq}); state on a flow reversal?") from None
    out = np.zeros((lay.size, eqs.n_active))
    out[lay.free_idx] = dx
    return out
