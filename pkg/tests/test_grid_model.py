import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhmcmc import grid_model, nr_solver
from dhmcmc.grid_model import ActiveEdge, GridTopology, Pipe, SlackEdge, TopologyError


def test_pipe_outlet_temperature_hand_value():
    # (120 - 10) * exp(-300 * 0.2325 / (1000 * 4.18 * 2)) + 10
    t = grid_model.pipe_outlet_temperature(120.0, 2.0, 300.0, 0.2325, 4.18, 10.0)
    assert t == pytest.approx(119.086, abs=5e-4)


def test_pipe_outlet_temperature_direction_independent():
    a = grid_model.pipe_outlet_temperature(90.0, 1.3, 70.0, 0.2325, 4.18, 10.0)
    b = grid_model.pipe_outlet_temperature(90.0, -1.3, 70.0, 0.2325, 4.18, 10.0)
    assert a == b


def test_loop_grid_parameters(loop):
    assert len(loop.nodes) == 18
    assert len(loop.passive_edges) == 18
    assert [e.name for e in loop.demand_edges] == ["A", "B", "C", "D"]
    assert {p.k for p in loop.passive_edges} == {0.028}
    assert {p.lam for p in loop.passive_edges} == {0.2325}
    assert {p.length for p in loop.passive_edges} == {70.0, 300.0}
    s = loop.slack_edge
    assert (s.t_set, s.p_supply, s.p_return) == (120.0, 6.5, 3.0)
    assert [e.t_set for e in loop.demand_edges] == [50.0, 60.0, 55.0, 40.0]
    assert loop.layout.n_free == 75


def test_free_states_match_equation_count(loop):
    assert loop.equations.n_eq == loop.layout.n_free


def _single_demand_state(loop):
    """State of the ring grid with hand-set values on one demand edge and one pipe."""
    lay = loop.layout
    x = lay.embed(np.zeros(lay.n_free))
    return lay, x


def test_demand_equation_hand_value(loop):
    lay, x = _single_demand_state(loop)
    x[lay.index["T[s_A]"]] = 115.0
    x[lay.index["mdot[A]"]] = 0.736
    q = grid_model.implied_heat_exchange(x, loop)
    # 4.18 * 0.736 * (115 - 50)
    assert q[0] == pytest.approx(199.98, abs=0.01)


def test_pressure_drop_hand_value(loop):
    lay, x = _single_demand_state(loop)
    x[lay.index["mdot[s_hp-s_c]"]] = 2.6
    x[lay.index["p[s_hp]"]] = 6.5
    x[lay.index["p[s_c]"]] = 6.5 - 0.18928
    r = grid_model.residual(x, np.zeros(4), loop)
    row = loop.equations.equation_names.index("pressure[s_hp-s_c]")
    assert abs(r[row]) < 1e-12


def test_residual_zero_at_solution(loop, loop_prior):
    state, rep = nr_solver.solve(loop_prior.q_mean, loop)
    assert rep.converged
    r = grid_model.residual(state, loop_prior.q_mean, loop)
    assert np.max(np.abs(r)) < 1e-8


def test_analytic_jacobian_matches_finite_differences(loop, loop_prior):
    state, _ = nr_solver.solve(loop_prior.q_mean, loop)
    eqs = loop.equations
    x = state.values
    J = eqs.jacobian(x[None])[0]
    free = loop.layout.free_idx
    h = 1e-6
    Q = loop_prior.q_mean[None]
    for col, i in enumerate(free):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (eqs.residual(xp[None], Q)[0] - eqs.residual(xm[None], Q)[0]) / (2 * h)
        np.testing.assert_allclose(J[:, col], fd, rtol=1e-5, atol=1e-6)


def test_topology_json_round_trip(tmp_path, loop):
    path = tmp_path / "g.json"
    grid_model.save_topology(loop, path, {"seed": 1})
    back = grid_model.load_topology(path)
    assert back.to_dict() == loop.to_dict()
    assert json.loads(path.read_text())["provenance"] == {"seed": 1}


def test_invalid_topology_lists_violations():
    with pytest.raises(TopologyError) as err:
        GridTopology(
            nodes=("s_hp", "r_hp", "s_x", "r_x", "orphan"),
            passive_edges=(Pipe("s_hp", "s_x", 100.0, 0.028, 0.2),
                           Pipe("r_x", "r_hp", 100.0, 0.028, 0.2),
                           Pipe("s_x", "missing", 100.0, -1.0, 0.2)),
            demand_edges=(ActiveEdge("s_x", "r_x", 50.0, name="X"),),
            source_edges=(),
            slack_edge=SlackEdge("r_hp", "s_hp", 120.0, 6.5, 3.0),
        )
    assert len(err.value.violations) >= 2


def test_tree_with_one_demand_is_minimal():
    topo = grid_model.make_tree_grid(1)
    assert len(topo.nodes) == 4
    assert len(topo.passive_edges) == 2


def test_tree_grid_rejects_zero_demands():
    with pytest.raises(ValueError):
        grid_model.make_tree_grid(0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 30), seed=st.integers(0, 2**16))
def test_tree_grids_are_valid_and_round_trip(n, seed):
    topo = grid_model.make_tree_grid(n, seed)
    assert len(topo.demand_edges) == n
    assert topo.equations.n_eq == topo.layout.n_free
    assert grid_model.load_topology(topo.to_dict()).to_dict() == topo.to_dict()


@settings(max_examples=25, deadline=None)
@given(vals=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=75, max_size=75))
def test_embed_keeps_free_and_sets_fixed(loop, vals):
    lay = loop.layout
    x = lay.embed(np.array(vals))
    np.testing.assert_array_equal(x[lay.free_idx], vals)
    np.testing.assert_array_equal(x[lay.fixed_idx], lay.fixed_values)
