import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyngame.model import ConstraintKind, ConstraintSet, StageConstraint, cost_eval
from dyngame.scenarios import BOUNDARY, COLLISION, DATA_DIR, GOAL_PIN, PedestrianSpec, ScenarioError, ScenarioKind, \
    ScenarioSpec, boundary_constraint, build_scenario, bundled_scenario, closest_point, collision_constraint, \
    dump_scenario, head_on_infeasible, intersection, lateral_offset, load_scenario, pairwise_collision_values, \
    parse_scenario, pedestrian_crossing, penalty_objective, penalty_sensitivity, ramp_merge, scenario_to_dict, \
    standard_scenario, unicycle_rhs
from dyngame.solver import initial_rollout
from dyngame.test.games import random_lq_game

FACTORIES = {
    'ramp_merge_2': lambda: ramp_merge(2),
    'ramp_merge_3': lambda: ramp_merge(3),
    'ramp_merge_4': lambda: ramp_merge(4),
    'intersection_2': lambda: intersection(2),
    'intersection_3': lambda: intersection(3),
    'intersection_4': lambda: intersection(4),
    'pedestrian': pedestrian_crossing,
    'head_on_infeasible': head_on_infeasible,
}

finite = st.floats(-100, 100)


@pytest.mark.parametrize('state,control,expected', [
    ((0.0, 0.0, 0.0, 1.0), (0.0, 0.0), (1.0, 0.0, 0.0, 0.0)),
    ((0.0, 0.0, math.pi / 2, 2.0), (0.0, 0.0), (0.0, 2.0, 0.0, 0.0)),
    ((0.0, 0.0, 0.0, 0.0), (1.0, 1.0), (0.0, 0.0, 1.0, 1.0)),
])
def test_unicycle_rhs(state, control, expected):
    assert np.allclose(unicycle_rhs(np.array(state), np.array(control)), expected, rtol=0.0, atol=1e-15)


def test_collision_examples():
    assert collision_constraint((0.0, 0.0), (2.0, 0.0), 1.0) == -3.0
    assert collision_constraint((0.5, 0.5), (0.5, 0.5), 1.0) == 1.0
    assert collision_constraint((0.0, 0.0), (0.0, 1.0), 1.0) == 0.0


@given(p1=st.tuples(finite, finite), p2=st.tuples(finite, finite), r=st.floats(0.1, 10))
def test_collision_is_symmetric(p1, p2, r):
    assert collision_constraint(p1, p2, r) == collision_constraint(p2, p1, r)


AXIS = np.array([[-10.0, 0.0], [10.0, 0.0]])


def test_boundary_examples():
    assert boundary_constraint((0.0, 2.0), AXIS, 1.0) == -3.0
    assert boundary_constraint((3.0, 0.0), AXIS, 1.0) == 1.0
    assert boundary_constraint((0.0, 1.0), AXIS, 1.0) == 0.0


def test_boundary_beyond_the_end_uses_the_end_point():
    assert boundary_constraint((13.0, 4.0), AXIS, 1.0) == pytest.approx(1.0 - 25.0)


def test_closest_point_ties_go_to_the_first_segment():
    vee = np.array([[-1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    assert np.array_equal(closest_point(np.array([0.0, 2.0]), vee), [-1.0, 1.0])


def test_closest_point_is_vectorised():
    points = np.array([[[0.0, 2.0], [5.0, -1.0]], [[-20.0, 0.0], [20.0, 3.0]]])
    q = closest_point(points, AXIS)
    assert q.shape == (2, 2, 2)
    assert np.array_equal(q, [[[0.0, 0.0], [5.0, 0.0]], [[-10.0, 0.0], [10.0, 0.0]]])


def test_boundary_is_continuous_across_segment_changes():
    corner = np.array([[-10.0, 0.0], [0.0, 0.0], [0.0, -10.0]])
    # a path passing around the corner crosses every projection region
    for angle in np.linspace(-math.pi, math.pi, 721):
        p = np.array([math.cos(angle), math.sin(angle)]) * 1.5 + np.array([0.2, -0.2])
        base = boundary_constraint(p, corner, 2.0)
        for direction in ((1.0, 0.0), (0.0, 1.0)):
            nudged = boundary_constraint(p + 1e-7 * np.array(direction), corner, 2.0)
            assert abs(nudged - base) <= 1e-6


@pytest.mark.parametrize('name', sorted(FACTORIES))
def test_bundled_scenarios_match_the_factories(name):
    assert bundled_scenario(name) == FACTORIES[name]()


@pytest.mark.parametrize('name', sorted(FACTORIES))
def test_scenarios_survive_a_round_trip(name, tmpdir):
    spec = FACTORIES[name]()
    target = os.path.join(tmpdir, f"{name}.json")
    dump_scenario(spec, target)
    assert load_scenario(target) == spec
    assert parse_scenario(json.loads(json.dumps(scenario_to_dict(spec)))) == spec


def test_every_bundled_file_has_a_factory():
    assert sorted(f[:-5] for f in os.listdir(DATA_DIR) if f.endswith('.json')) == sorted(FACTORIES)


def test_ramp_merge_dimensions():
    spec = ramp_merge(3)
    prob = build_scenario(spec)
    assert prob.n == 12
    assert prob.m == 6
    assert prob.N == 40
    assert prob.dynamics.dt == pytest.approx(0.125)
    assert prob.n_ci == (3 + 3 * len(spec.road.boundaries)) * (spec.steps - 1)
    assert prob.n_ce == 0


def test_pedestrian_ignores_the_road():
    spec = pedestrian_crossing()
    prob = build_scenario(spec)
    assert prob.M == 3
    assert prob.n_ci == (3 + 2 * len(spec.road.boundaries)) * (spec.steps - 1)
    goal = spec.players[2].goal
    assert prob.costs[2].x_f[8:] == pytest.approx(list(goal))


def test_infeasible_scenario_pins_the_goals():
    prob = build_scenario(head_on_infeasible())
    labels = [f.label for f in prob.constraints.families]
    assert labels == [COLLISION, GOAL_PIN]
    assert prob.n_ci == prob.S
    assert prob.n_ce == 4


@pytest.mark.parametrize('name', sorted(FACTORIES))
def test_constraints_are_finite_at_the_initial_rollout(name):
    prob = build_scenario(FACTORIES[name]())
    y = initial_rollout(prob)
    C = prob.constraints.evaluate(y.X, y.joint_controls())
    assert C.shape == (prob.n_c,)
    assert np.all(np.isfinite(C))


def test_constraint_labels_name_pairs_and_boundaries():
    prob = build_scenario(ramp_merge(2))
    labels = prob.constraints.labels(prob.S)
    assert labels[0] == f"{COLLISION}[0-1]@k=2"
    assert f"{BOUNDARY}[1/b2]@k={prob.N}" in labels
    assert len(labels) == prob.n_c


def test_standard_scenario_dispatches_on_kind():
    assert standard_scenario(ScenarioKind.RAMP_MERGE, 2) == ramp_merge(2)
    assert standard_scenario('Intersection', 3) == intersection(3)
    with pytest.raises(ScenarioError):
        standard_scenario(ScenarioKind.INTERSECTION, 5)


def test_overlapping_starts_are_rejected():
    doc = scenario_to_dict(intersection(2))
    doc['players'][1]['start'] = [-25.0, -2.0, 0.0, 10.0]
    with pytest.raises(ScenarioError) as e:
        parse_scenario(doc)
    assert e.value.path == 'players[1].start'


def test_missing_field_names_its_path():
    doc = scenario_to_dict(ramp_merge(2))
    del doc['players'][1]['start']
    with pytest.raises(ScenarioError) as e:
        parse_scenario(doc)
    assert e.value.path == 'players[1].start'


def test_short_state_names_its_path():
    doc = scenario_to_dict(ramp_merge(2))
    doc['players'][0]['goal'] = [1.0, 2.0]
    with pytest.raises(ScenarioError) as e:
        parse_scenario(doc)
    assert e.value.path == 'players[0].goal'


@pytest.mark.parametrize('field,value,path', [
    ('schema_version', 2, 'schema_version'),
    ('kind', 'Roundabout', 'kind'),
    ('radius', -1.0, 'radius'),
    ('radius', 'big', 'radius'),
    ('steps', 1, 'steps'),
    ('steps', 4.5, 'steps'),
    ('integrator', 'Leapfrog', 'integrator'),
    ('boundaries', [[[0.0, 0.0]]], 'road.boundaries[0]'),
    ('lanes', [[[0.0, 0.0]]], 'road.lanes[0]'),
    ('pedestrian', {'player': 7, 'desired_speed': 1.0, 'true_speed': 1.0}, 'pedestrian.player'),
])
def test_invalid_fields_are_reported(field, value, path):
    doc = scenario_to_dict(ramp_merge(2))
    doc[field] = value
    with pytest.raises(ScenarioError) as e:
        parse_scenario(doc)
    assert e.value.path == path


def test_unflagged_pedestrian_is_rejected():
    doc = scenario_to_dict(pedestrian_crossing())
    doc['players'][2]['pedestrian'] = False
    with pytest.raises(ScenarioError) as e:
        parse_scenario(doc)
    assert e.value.path == 'pedestrian.player'


def test_ego_is_the_first_car():
    assert pedestrian_crossing().ego == 0
    spec = pedestrian_crossing()
    players = (spec.players[2],) + spec.players[:2]
    reordered = ScenarioSpec(name='reordered', kind=spec.kind, radius=spec.radius, horizon=spec.horizon,
                             steps=spec.steps, players=players, road=spec.road,
                             pedestrian=PedestrianSpec(player=0, desired_speed=2.5, true_speed=1.25))
    assert reordered.ego == 1


def test_lateral_offset_is_positive_to_the_left():
    eastbound = np.array([[-10.0, 0.0], [10.0, 0.0]])
    assert lateral_offset([0.0, 2.0], eastbound) == pytest.approx(2.0)
    assert lateral_offset([0.0, -3.0], eastbound) == pytest.approx(-3.0)
    assert lateral_offset([0.0, 2.0], eastbound[::-1]) == pytest.approx(-2.0)
    offsets = lateral_offset(np.array([[1.0, 1.0], [2.0, -1.0], [5.0, 0.0]]), eastbound)
    assert np.allclose(offsets, [1.0, -1.0, 0.0])


def test_lane_is_the_one_nearest_the_goal():
    spec = ramp_merge(2)
    assert np.array_equal(spec.lane_for(0), np.array(spec.road.lanes[0]))
    assert np.array_equal(spec.lane_for(1), np.array(spec.road.lanes[0]))
    spec = intersection(4)
    for nu, lane in enumerate((0, 2, 1, 3)):
        assert np.array_equal(spec.lane_for(nu), np.array(spec.road.lanes[lane]))


def test_lane_without_a_road_follows_the_goal_heading():
    spec = head_on_infeasible()
    lane = spec.lane_for(1)
    assert lateral_offset(spec.players[1].goal[:2], lane) == pytest.approx(0.0, abs=1e-9)
    assert lateral_offset([0.0, 1.0], lane) == pytest.approx(-1.0)
    assert lateral_offset([0.0, 1.0], spec.lane_for(0)) == pytest.approx(1.0)


def test_with_players_keeps_the_first_players():
    spec = ramp_merge(4).with_players(2)
    assert [p.name for p in spec.players] == ['ramp', 'follower']
    assert spec.road == ramp_merge(4).road
    assert pedestrian_crossing().with_players(3).pedestrian is not None
    assert pedestrian_crossing().with_players(2).pedestrian is None
    for M in (0, 5):
        with pytest.raises(ScenarioError):
            ramp_merge(4).with_players(M)


def test_invalid_json_is_a_scenario_error(tmpdir):
    target = os.path.join(tmpdir, 'broken.json')
    with open(target, 'w') as f:
        f.write('{"schema_version": 1,')
    with pytest.raises(ScenarioError):
        load_scenario(target)


def test_pairwise_collision_values():
    states = np.zeros((2, 12))
    states[:, 4] = 3.0
    states[:, 8] = 1.0
    values = pairwise_collision_values(states, 3, 2.0)
    assert values.shape == (2, 3)
    assert list(values[0]) == [4.0 - 9.0, 4.0 - 1.0, 4.0 - 4.0]
    assert pairwise_collision_values(states[:, :4], 1, 2.0).shape == (2, 0)


def constant_family(kind, value):
    def fn(X, U):
        return np.full(X.shape[:-1] + (1,), value)

    def jac(X, U):
        return np.zeros((X.shape[0], 1, X.shape[-1])), np.zeros((X.shape[0], 1, U.shape[-1]))

    return StageConstraint(label='constant', kind=kind, rows=1, fn=fn, jac=jac, steps=(0,))


@pytest.mark.parametrize('kind,value,extra', [
    (ConstraintKind.INEQUALITY, -0.3, 0.0),
    (ConstraintKind.INEQUALITY, 0.1, 0.5),
    (ConstraintKind.EQUALITY, -0.1, 0.5),
])
def test_penalty_objective(kind, value, extra):
    rng = np.random.default_rng(0)
    prob = random_lq_game(rng, M=2, N=4, constraints=ConstraintSet([constant_family(kind, value)]))
    y = initial_rollout(prob)
    for nu in range(prob.M):
        expected = cost_eval(prob.costs[nu], y.X, y.U[nu], prob.x0) + extra
        assert penalty_objective(prob, y.X, y.U, 100.0, nu) == pytest.approx(expected, rel=1e-12)


def test_penalty_sensitivity_grows_with_rho():
    rng = np.random.default_rng(1)
    prob = random_lq_game(rng, M=2, N=4,
                          constraints=ConstraintSet([constant_family(ConstraintKind.INEQUALITY, 0.5)]))
    y = initial_rollout(prob)
    table = penalty_sensitivity(prob, y.X, y.U, [1.0, 10.0, 100.0])
    assert table.shape == (3, 2)
    assert np.all(np.diff(table, axis=0) > 0)
    assert table[1, 0] - table[0, 0] == pytest.approx(0.5 * 9.0 * 0.25)
