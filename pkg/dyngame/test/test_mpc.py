from dataclasses import replace

import numpy as np
import pytest

from dyngame.handler import DataHandler
from dyngame.kkt import ALState, residual
from dyngame.model import dynamics_defects, dynamics_step
from dyngame.mpc import MpcConfig, mis_specification_run, mpc_run, shift_multipliers, warm_start_shift
from dyngame.plant import GaussianNoise, NoNoise, Plant
from dyngame.scenarios import PlayerSpec, ScenarioError, ScenarioKind, ScenarioSpec, UnicycleState, build_scenario, \
    head_on_infeasible, pedestrian_crossing, ramp_merge
from dyngame.solver import initial_rollout, solve
from dyngame.test.games import random_iterate, random_lq_game


class Recorder(DataHandler):
    def __init__(self):
        self.rows = []
        self.failures = []

    def handle(self, data):
        self.rows.extend(data)

    def on_failure(self, event_time, message):
        self.failures.append((event_time, message))


def quiet(**kwargs):
    return MpcConfig(noise_scale=(0.0, 0.0, 0.0, 0.0), **kwargs)


@pytest.mark.parametrize('kwargs', [
    {'sim_duration': 0.0}, {'horizon_steps': 1}, {'horizon_seconds': -1.0}, {'noise_scale': (-0.1, 0, 0, 0)},
    {'bounding_box': 0.0},
])
def test_invalid_mpc_config(kwargs):
    with pytest.raises(ValueError):
        MpcConfig(**kwargs)


def test_warm_start_shift_moves_the_plan_forward():
    rng = np.random.default_rng(0)
    prob = random_lq_game(rng, M=2, N=6)
    prev = random_iterate(rng, prob)
    nxt = prob.with_x0(prev.X[0])
    guess = warm_start_shift(prev, nxt)
    for old, new in zip(prev.U, guess.U):
        assert np.array_equal(new[:-1], old[1:])
        assert np.array_equal(new[-1], old[-1])
    for old, new in zip(prev.mu, guess.mu):
        assert np.array_equal(new[:-1], old[1:])
    assert np.allclose(dynamics_defects(nxt, guess.X, guess.joint_controls()), 0.0, rtol=0.0, atol=1e-12)
    guess.check(nxt)


def test_plant_without_noise_follows_the_model():
    prob = build_scenario(ramp_merge(2))
    plant = Plant(prob.dynamics)
    u = np.array([0.1, 0.5, -0.1, 0.0])
    assert np.array_equal(plant.step(prob.x0, u), dynamics_step(prob.dynamics, prob.x0, u))


def test_open_loop_player_walks_straight():
    spec = pedestrian_crossing()
    prob = build_scenario(spec)
    plant = Plant(prob.dynamics, open_loop={2: 1.25})
    x = plant.step(prob.x0, np.ones(prob.m))
    start = spec.players[2].start
    dt = prob.dynamics.dt
    assert x[8:] == pytest.approx([start.px, start.py + 1.25 * dt, start.theta, 1.25], abs=1e-12)
    assert np.array_equal(x[:8], dynamics_step(prob.dynamics, prob.x0, np.ones(prob.m))[:8])


def test_gaussian_noise_is_seeded():
    first = GaussianNoise((0.1, 0.1, 0.01, 0.1), seed=3)
    second = GaussianNoise((0.1, 0.1, 0.01, 0.1), seed=3)
    a = [first.provide(12) for _ in range(3)]
    b = [second.provide(12) for _ in range(3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == (12,)
    assert np.all(NoNoise().provide(4) == 0.0)


def test_gaussian_noise_validates_its_scale():
    with pytest.raises(ValueError):
        GaussianNoise((-1.0,), seed=0)
    with pytest.raises(ValueError):
        GaussianNoise((0.1, 0.1, 0.1), seed=0).provide(8)


def test_short_run_records_every_update():
    cfg = quiet(sim_duration=0.3, horizon_steps=20, horizon_seconds=1.5)
    recorder = Recorder()
    trace = mpc_run(ramp_merge(2), cfg, data_handler=recorder)
    assert trace.update_count == 4
    assert trace.states.shape == (5, 8)
    assert trace.controls.shape == (4, 4)
    assert [row['update'] for row in recorder.rows] == [0, 1, 2, 3]
    assert trace.mean_frequency == pytest.approx(4 / 0.3)
    assert trace.wall_frequency > 0
    assert not trace.diverged
    assert np.array_equal(trace.states[0], build_scenario(ramp_merge(2)).x0)


def test_first_control_of_each_plan_is_applied():
    cfg = quiet(sim_duration=0.15, horizon_steps=20, horizon_seconds=1.5, keep_plans=True)
    spec = ramp_merge(2)
    trace = mpc_run(spec, cfg)
    prob = build_scenario(spec.with_horizon(cfg.horizon_seconds, cfg.horizon_steps))
    y, _, _ = solve(prob)
    assert np.array_equal(trace.controls[0], y.joint_controls()[0])
    assert np.allclose(trace.plans[0], y.X, rtol=0.0, atol=0.0)


def test_closed_loop_is_deterministic():
    cfg = MpcConfig(sim_duration=0.3, horizon_steps=20, horizon_seconds=1.5, rng_seed=11)
    first = mpc_run(ramp_merge(2), cfg)
    second = mpc_run(ramp_merge(2), cfg)
    assert np.array_equal(first.states, second.states)
    assert [u.newton_iters for u in first.updates] == [u.newton_iters for u in second.updates]


def test_mis_specification_needs_a_pedestrian():
    with pytest.raises(ScenarioError):
        mis_specification_run(ramp_merge(2), quiet(sim_duration=0.1))


@pytest.mark.slow
def test_ramp_merge_closed_loop_is_safe():
    trace = mpc_run(ramp_merge(3), MpcConfig())
    assert trace.update_count == 40
    assert not trace.diverged
    assert np.all(trace.collision_values() <= 1e-3)
    assert trace.wall_frequency > 10.0


def test_multipliers_move_forward_with_the_plan():
    prob = build_scenario(head_on_infeasible())
    al = ALState(lam=np.arange(prob.n_c, dtype=float), rho=1.0 + np.arange(prob.n_c, dtype=float), n_ci=prob.n_ci)
    shifted = shift_multipliers(al, prob)
    spans = [family.steps is None for family, _, _ in prob.constraints.layout(prob.S)]
    assert any(spans) and not all(spans)
    for family, _, index in prob.constraints.layout(prob.S):
        for new, old in ((shifted.lam, al.lam), (shifted.rho, al.rho)):
            if family.steps is None:
                assert np.array_equal(new[index[:-1]], old[index[1:]])
                assert np.array_equal(new[index[-1]], old[index[-1]])
            else:
                assert np.array_equal(new[index], old[index])
    assert (shifted.n_ci, shifted.gamma, shifted.rho_max) == (al.n_ci, al.gamma, al.rho_max)
    assert np.array_equal(al.lam, np.arange(prob.n_c))


def test_shifted_plan_is_closer_to_the_next_solution_than_a_rollout():
    prob = build_scenario(ramp_merge(2).with_horizon(1.5, 20))
    y, al, report = solve(prob)
    assert report.converged
    nxt = prob.with_x0(dynamics_step(prob.dynamics, prob.x0, y.joint_controls()[0]))
    warm = np.abs(residual(nxt, warm_start_shift(y, nxt), shift_multipliers(al, nxt))).sum()
    cold = np.abs(residual(nxt, initial_rollout(nxt), ALState.initial(nxt))).sum()
    assert warm < cold


def test_carried_multipliers_run():
    cfg = quiet(sim_duration=0.3, horizon_steps=20, horizon_seconds=1.5, carry_multipliers=True)
    trace = mpc_run(ramp_merge(2), cfg)
    assert trace.update_count == 4
    assert not trace.diverged
    assert trace.failures == []
    assert np.all(np.isfinite(trace.controls))
    assert np.all(trace.collision_values() <= 1e-3)


def test_warm_start_saves_newton_steps():
    cfg = quiet(sim_duration=0.6, horizon_steps=20, horizon_seconds=1.5)
    warm = mpc_run(ramp_merge(2), cfg)
    cold = mpc_run(ramp_merge(2), replace(cfg, warm_start=False))
    assert warm.updates[0].newton_iters == cold.updates[0].newton_iters
    assert np.median([u.newton_iters for u in warm.updates[1:]]) <= \
           np.median([u.newton_iters for u in cold.updates[1:]])


def test_ego_lateral_offset_is_measured_from_the_main_lane():
    cfg = quiet(sim_duration=0.15, horizon_steps=20, horizon_seconds=1.5)
    trace = mpc_run(ramp_merge(2), cfg)
    assert trace.ego == 0
    assert trace.ego_lateral_offset.shape == trace.times.shape
    assert trace.ego_lateral_offset[0] == pytest.approx(-8.0)


def test_parked_player_stays_put():
    parked = UnicycleState(5.0, 2.0, 0.3, 0.0)
    spec = ScenarioSpec(name='parked', kind=ScenarioKind.RAMP_MERGE, radius=2.0, horizon=1.5, steps=20,
                        players=(PlayerSpec(name='parked', start=parked, goal=parked),))
    trace = mpc_run(spec, quiet(sim_duration=0.3, horizon_steps=20, horizon_seconds=1.5))
    assert trace.update_count == 4
    assert np.allclose(trace.states, np.asarray(parked), rtol=0.0, atol=1e-12)
    assert np.allclose(trace.controls, 0.0, rtol=0.0, atol=1e-12)
    assert np.allclose(trace.ego_lateral_offset, 0.0, rtol=0.0, atol=1e-12)


def test_pedestrian_at_the_modelled_speed_changes_nothing():
    spec = pedestrian_crossing(true_speed=2.5)
    cfg = quiet(sim_duration=0.6, horizon_steps=20, horizon_seconds=1.5)
    matched = mis_specification_run(spec, cfg)
    standard = mpc_run(spec, cfg)
    assert np.allclose(matched.states, standard.states, rtol=0.0, atol=1e-6)


@pytest.mark.slow
def test_slow_pedestrian_makes_the_car_brake_harder():
    spec = pedestrian_crossing()
    cfg = MpcConfig()
    mismatched = mis_specification_run(spec, cfg)
    matched = mis_specification_run(replace(spec, pedestrian=replace(spec.pedestrian, true_speed=2.5)), cfg)
    assert mismatched.ego_speed.min() < matched.ego_speed.min()
    for trace in (mismatched, matched):
        assert not trace.diverged
        assert np.all(trace.collision_values() <= 1e-3)
