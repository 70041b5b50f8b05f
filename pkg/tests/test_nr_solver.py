import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhmcmc import grid_model, nr_solver
from dhmcmc.nr_solver import SolverConfig


def _mass_imbalance(x, topo):
    lay = topo.layout
    eqs = topo.equations
    m = x[lay.mdot]
    inc = np.zeros((len(topo.nodes), len(m)))
    inc[eqs.frm, np.arange(len(m))] += 1.0
    inc[eqs.to, np.arange(len(m))] -= 1.0
    return inc @ m


def test_round_trip_at_prior_mean(loop, loop_prior):
    state, rep = nr_solver.solve(loop_prior.q_mean, loop)
    assert rep.converged and rep.psi <= 1e-5
    np.testing.assert_allclose(grid_model.implied_heat_exchange(state, loop), loop_prior.q_mean, rtol=1e-9)
    assert np.max(np.abs(_mass_imbalance(state.values, loop))) < 1e-10


def test_batch_equals_single(loop, loop_prior, rng):
    Q = loop_prior.sample(5, rng)
    sol = nr_solver.solve_batch(Q, loop)
    for i, q in enumerate(Q):
        state, _ = nr_solver.solve(q, loop)
        np.testing.assert_allclose(sol.states[i], state.values, rtol=1e-9, atol=1e-9)


def test_presolver_lands_near_solution(loop, loop_prior):
    state = nr_solver.presolve(loop_prior.q_mean, loop)
    r = grid_model.residual(state, loop_prior.q_mean, loop)
    assert float(r @ r) < 1.0


def test_loose_termination_is_cheaper(loop, loop_prior, rng):
    Q = loop_prior.sample(20, rng)
    tight = nr_solver.solve_batch(Q, loop)
    loose = nr_solver.solve_batch(Q, loop, nr_solver.LOOSE)
    assert loose.converged.all() and tight.converged.all()
    assert loose.nr_iterations.sum() <= tight.nr_iterations.sum()


def test_zero_flow_input_rejected(loop):
    with pytest.raises(nr_solver.SolverError):
        nr_solver.solve(np.zeros(4), loop)


def test_tiny_demand_recovers_from_singular_iterate(loop):
    # near-zero flow into B makes an intermediate mixing row singular
    q = np.array([238.65058087629325, 0.02393485770112136, 196.99748582219738, 227.31263770937034])
    state, report = nr_solver.solve(q, loop)
    assert report.converged
    implied = loop.equations.implied_heat_exchange(state.values[None])[0]
    np.testing.assert_allclose(implied, q, rtol=1e-6)


def test_non_finite_input_rejected(loop):
    with pytest.raises(ValueError):
        nr_solver.solve(np.array([200.0, np.nan, 200.0, 200.0]), loop)


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        SolverConfig(psi_tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(backtrack=1.5)


def test_state_jacobian_matches_central_differences(loop, loop_prior):
    q = loop_prior.q_mean
    J = nr_solver.jacobian_dx_dq(q, loop)
    delta = 0.1
    for k in range(len(q)):
        dq = np.zeros_like(q)
        dq[k] = delta
        xp, _ = nr_solver.solve(q + dq, loop)
        xm, _ = nr_solver.solve(q - dq, loop)
        fd = (xp.values - xm.values) / (2 * delta)
        np.testing.assert_allclose(J[:, k], fd, rtol=1e-4, atol=1e-7 * np.abs(fd).max())


def test_fixed_rows_of_state_jacobian_are_zero(loop, loop_prior):
    J = nr_solver.jacobian_dx_dq(loop_prior.q_mean, loop)
    assert np.all(J[loop.layout.fixed_idx] == 0)


@pytest.mark.parametrize("n", [1, 2, 5, 11])
def test_tree_round_trip(n):
    topo = grid_model.make_tree_grid(n, seed=3)
    from dhmcmc.inference import default_tree_prior
    prior = default_tree_prior(topo, 3)
    Q = prior.sample(50, np.random.default_rng(0))
    sol = nr_solver.solve_batch(Q, topo)
    assert sol.converged.all()
    implied = topo.equations.implied_heat_exchange(sol.states)
    np.testing.assert_allclose(implied, Q, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(q=st.tuples(*(st.floats(5.0, 500.0) for _ in range(4))))
def test_loop_round_trip_property(loop, q):
    q = np.array(q)
    state, rep = nr_solver.solve(q, loop)
    assert rep.converged
    np.testing.assert_allclose(grid_model.implied_heat_exchange(state, loop), q, rtol=1e-6)
    assert np.max(np.abs(_mass_imbalance(state.values, loop))) < 1e-8
