import numpy as np
import pytest

from dhmcmc import dynamics_bound as db
from dhmcmc import grid_model, nr_solver
from dhmcmc.dynamics_bound import PipeDynamicsParams


def test_constant_flow_delay():
    assert db.delay_tau([0.0, 1000.0], [1.0], 300.0) == pytest.approx(300.0)
    assert db.delay_tau([0.0, 1000.0], [2.0], 300.0) == pytest.approx(150.0)


def test_piecewise_history_delay():
    # 1 kg/s for 100 s then 2 kg/s until t = 200: the last 100 s carry 200 kg, the 100 kg before that
    assert db.delay_tau([0.0, 100.0, 200.0], [1.0, 2.0], 300.0) == pytest.approx(200.0)


def test_delay_from_callable_history():
    tau = db.delay_tau_fn(lambda t: 1.0 if t < 100 else 2.0, 200.0, 300.0, 0.0)
    assert tau == pytest.approx(200.0, abs=1e-6)


def test_short_history_is_an_error():
    with pytest.raises(ValueError):
        db.delay_tau([0.0, 10.0], [1.0], 300.0)
    with pytest.raises(ValueError):
        db.delay_tau_fn(lambda t: 1.0, 10.0, 300.0, 0.0)


def test_dynamic_outlet_reduces_to_steady_equation():
    p = PipeDynamicsParams(300.0, 0.2325, 4.18)
    for m in (0.05, 0.7, 2.0, 9.0):
        tau = p.fluid_mass / m
        dyn = db.dynamic_outlet_temperature(118.0, tau, p)
        steady = grid_model.pipe_outlet_temperature(118.0, m, 300.0, 0.2325, 4.18, 10.0)
        assert abs(dyn - steady) <= 1e-12 * steady


def test_no_heat_loss_is_pure_delay():
    p = PipeDynamicsParams(300.0, 0.0, 4.18)
    history = lambda t: 100.0 + 0.01 * t  # noqa: E731
    assert db.dynamic_outlet_temperature(history, 250.0, p, t=1000.0) == pytest.approx(history(750.0))


def test_zero_delay_passes_inlet_through():
    p = PipeDynamicsParams(300.0, 0.2325, 4.18)
    assert db.dynamic_outlet_temperature(95.0, 0.0, p) == 95.0


def test_invalid_params():
    with pytest.raises(ValueError):
        PipeDynamicsParams(300.0, 0.2, 4.18, rho=0.0)
    with pytest.raises(ValueError):
        PipeDynamicsParams(300.0, 0.2, 4.18, area=-1.0)


def test_unit_scale_gives_zero_gap(loop, loop_prior):
    res = db.step_response_bound(loop, loop_prior.q_mean, 1.0)
    assert np.max(np.abs(res.gap)) < 1e-9


def test_frozen_flow_state_satisfies_dynamic_equation(loop, loop_prior):
    before, _ = nr_solver.solve(loop_prior.q_mean, loop)
    # raises if any pipe outlet deviates from the dynamic outlet equation at the frozen flow
    db.frozen_flow_temperatures(loop, before.values, 1.3 * loop_prior.q_mean, db.pipe_params(loop))


def test_load_increase_bound_brackets_transient(loop, loop_prior, rng):
    for q in loop_prior.sample(5, rng):
        res = db.step_response_bound(loop, q, 1.3)
        assert np.all(res.t_bound >= res.t_steady_after - 1e-9)
        assert np.all(res.t_bound >= res.t_steady_before - 1e-9)


def test_gap_shrinks_towards_unit_scale(loop, loop_prior):
    q = loop_prior.q_mean
    gaps = [np.abs(db.step_response_bound(loop, q, s).gap) for s in (0.7, 0.8, 0.9, 0.95)]
    for a, b in zip(gaps, gaps[1:]):
        assert np.all(b <= a + 1e-12)
    gaps = [np.abs(db.step_response_bound(loop, q, s).gap) for s in (1.3, 1.2, 1.1, 1.05)]
    for a, b in zip(gaps, gaps[1:]):
        assert np.all(b <= a + 1e-12)


def test_area_and_density_do_not_change_the_bound(loop, loop_prior):
    q = loop_prior.q_mean
    a = db.step_response_bound(loop, q, 0.7, params=db.pipe_params(loop, 960.0, 0.005)).gap
    b = db.step_response_bound(loop, q, 0.7, params=db.pipe_params(loop, 1000.0, 0.02)).gap
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_experiment_summary_shape(loop, loop_prior):
    exp = db.bound_experiment(loop, loop_prior, (0.7, 1.3), n_samples=3, seed=0)
    summ = exp.summary()
    assert set(summ["scales"]) == {"0.7", "1.3"}
    assert set(summ["scales"]["0.7"]) == {"A", "B", "C", "D"}
    assert "70%" in exp.markdown()
