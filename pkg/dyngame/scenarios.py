import json
import logging
import math
import os
from dataclasses import dataclass, replace
from enum import Enum
from itertools import combinations
from typing import NamedTuple, Optional, Tuple

import numpy as np

from dyngame.handler import write_json
from dyngame.model import ConstraintKind, ConstraintSet, GameProblem, IntegratorKind, JointDynamics, PlayerCost, \
    StageConstraint, cost_eval

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STATE_SIZE = 4
CONTROL_SIZE = 2

COLLISION = 'collision'
BOUNDARY = 'boundary'
GOAL_PIN = 'goal_pin'

DATA_DIR = os.path.join(os.path.dirname(__file__), 'data')


class ScenarioError(ValueError):
    """
    Raised when a scenario is invalid, path names the offending field, e.g. players[1].start
    """

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class ScenarioKind(Enum):
    RAMP_MERGE = 'RampMerge'
    INTERSECTION = 'Intersection'


class UnicycleState(NamedTuple):
    px: float
    py: float
    theta: float
    v: float


@dataclass(frozen=True)
class CostWeights:
    """
    Diagonal weights in the lane frame of the goal: (longitudinal, lateral, heading, speed) for q and qf,
    (angular rate, acceleration) for r.
    """
    q: Tuple[float, ...] = (0.0, 0.02, 0.2, 0.2)
    qf: Tuple[float, ...] = (0.0, 5.0, 5.0, 1.0)
    r: Tuple[float, ...] = (1.0, 0.1)


@dataclass(frozen=True)
class PlayerSpec:
    name: str
    start: UnicycleState
    goal: UnicycleState
    weights: CostWeights = CostWeights()
    respects_boundaries: bool = True
    pedestrian: bool = False
    pin_goal: bool = False


@dataclass(frozen=True)
class PedestrianSpec:
    """
    The pedestrian plays the game with desired_speed in every plan but actually walks at true_speed.
    """
    player: int
    desired_speed: float
    true_speed: float


@dataclass(frozen=True)
class RoadGeometry:
    """
    boundaries are the polylines no car may come within the radius of, lanes are centerlines pointing in the
    direction of travel.
    """
    boundaries: Tuple[Tuple[Tuple[float, float], ...], ...] = ()
    lanes: Tuple[Tuple[Tuple[float, float], ...], ...] = ()

    def boundary_arrays(self):
        return [np.array(b, dtype=float) for b in self.boundaries]

    def lane_arrays(self):
        return [np.array(lane, dtype=float) for lane in self.lanes]


def starts_collision_free(positions, radius):
    """
    :param positions: the planar positions (M, 2).
    :param radius: the collision radius.
    :return: the first offending pair or None.
    """
    positions = np.asarray(positions, dtype=float)
    for i, j in combinations(range(positions.shape[0]), 2):
        if np.linalg.norm(positions[i] - positions[j]) <= radius:
            return i, j
    return None


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    kind: ScenarioKind
    radius: float
    horizon: float
    steps: int
    players: Tuple[PlayerSpec, ...]
    road: RoadGeometry = RoadGeometry()
    integrator: str = IntegratorKind.RK4.value
    pedestrian: Optional[PedestrianSpec] = None

    def __post_init__(self):
        object.__setattr__(self, 'players', tuple(self.players))
        if not self.radius > 0:
            raise ScenarioError('radius', f"must be positive, was {self.radius}")
        if not self.horizon > 0:
            raise ScenarioError('horizon', f"must be positive, was {self.horizon}")
        if int(self.steps) < 2:
            raise ScenarioError('steps', f"must be at least 2, was {self.steps}")
        if not self.players:
            raise ScenarioError('players', "at least one player is required")
        try:
            IntegratorKind(self.integrator)
        except ValueError:
            raise ScenarioError('integrator', f"unknown integrator {self.integrator}")
        for idx, player in enumerate(self.players):
            for name in ('start', 'goal'):
                value = getattr(player, name)
                if len(value) != STATE_SIZE or not np.all(np.isfinite(value)):
                    raise ScenarioError(f"players[{idx}].{name}", f"must be 4 finite numbers, was {value}")
        for section in ('boundaries', 'lanes'):
            for idx, line in enumerate(getattr(self.road, section)):
                if len(line) < 2:
                    raise ScenarioError(f"road.{section}[{idx}]", "a polyline needs at least 2 points")
        clash = starts_collision_free([p.start[:2] for p in self.players], self.radius)
        if clash is not None:
            raise ScenarioError(f"players[{clash[1]}].start", f"overlaps players[{clash[0]}] at radius {self.radius}")
        if self.pedestrian is not None:
            if not 0 <= self.pedestrian.player < len(self.players):
                raise ScenarioError('pedestrian.player', f"no such player {self.pedestrian.player}")
            if not self.players[self.pedestrian.player].pedestrian:
                raise ScenarioError('pedestrian.player',
                                    f"players[{self.pedestrian.player}] is not flagged as a pedestrian")
            if not self.pedestrian.desired_speed > 0 or not self.pedestrian.true_speed >= 0:
                raise ScenarioError('pedestrian', "speeds must be positive")

    @property
    def M(self):
        return len(self.players)

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def ego(self):
        """
        :return: the first player not flagged as a pedestrian.
        """
        return next((nu for nu, p in enumerate(self.players) if not p.pedestrian), 0)

    def lane_for(self, nu):
        """
        :param nu: the player.
        :return: the lane centerline nearest the goal of the player, or a line along the goal heading when the road
        has no lanes.
        """
        goal = self.players[nu].goal
        target = np.array(goal[:2], dtype=float)
        if not self.road.lanes:
            reach = LANE_REACH * np.array([math.cos(goal.theta), math.sin(goal.theta)])
            return np.array([target - reach, target + reach])
        lanes = self.road.lane_arrays()
        gaps = [np.linalg.norm(closest_point(target, lane) - target) for lane in lanes]
        return lanes[int(np.argmin(gaps))]

    def with_starts(self, starts):
        players = tuple(replace(p, start=UnicycleState(*map(float, s))) for p, s in zip(self.players, starts))
        return replace(self, players=players)

    def with_horizon(self, horizon, steps):
        return replace(self, horizon=float(horizon), steps=int(steps))

    def with_players(self, M):
        """
        :param M: how many of the players to keep, in order.
        :return: the scenario with only the first M players, the pedestrian block is dropped if its player goes.
        """
        if not 1 <= M <= self.M:
            raise ScenarioError('players', f"{self.name} has {self.M} players, cannot keep {M}")
        pedestrian = self.pedestrian if self.pedestrian is not None and self.pedestrian.player < M else None
        return replace(self, players=self.players[:M], pedestrian=pedestrian)


def unicycle_rhs(state, control):
    """
    (px, py, theta, v) with controls (angular rate, acceleration), vectorised over leading axes.
    """
    state = np.asarray(state, dtype=float)
    control = np.asarray(control, dtype=float)
    theta = state[..., 2]
    v = state[..., 3]
    return np.stack([v * np.cos(theta), v * np.sin(theta), control[..., 0], control[..., 1]], axis=-1)


def unicycle_jacobian(state, control):
    theta = state[..., 2]
    v = state[..., 3]
    lead = state.shape[:-1]
    fx = np.zeros(lead + (STATE_SIZE, STATE_SIZE))
    fx[..., 0, 2] = -v * np.sin(theta)
    fx[..., 0, 3] = np.cos(theta)
    fx[..., 1, 2] = v * np.cos(theta)
    fx[..., 1, 3] = np.sin(theta)
    fu = np.zeros(lead + (STATE_SIZE, CONTROL_SIZE))
    fu[..., 2, 0] = 1.0
    fu[..., 3, 1] = 1.0
    return fx, fu


def unicycle_dynamics(M, dt, integrator=IntegratorKind.RK4):
    """
    Joint dynamics of M independent unicycles, player v owns state block 4v..4v+3 and control block 2v..2v+1.
    """

    def rhs(x, u):
        xs = x.reshape(x.shape[:-1] + (M, STATE_SIZE))
        us = u.reshape(u.shape[:-1] + (M, CONTROL_SIZE))
        return unicycle_rhs(xs, us).reshape(x.shape)

    def jacobian(x, u):
        lead = x.shape[:-1]
        fx, fu = unicycle_jacobian(x.reshape(lead + (M, STATE_SIZE)), u.reshape(lead + (M, CONTROL_SIZE)))
        A = np.zeros(lead + (STATE_SIZE * M, STATE_SIZE * M))
        B = np.zeros(lead + (STATE_SIZE * M, CONTROL_SIZE * M))
        for nu in range(M):
            xs = slice(STATE_SIZE * nu, STATE_SIZE * (nu + 1))
            A[..., xs, xs] = fx[..., nu, :, :]
            B[..., xs, CONTROL_SIZE * nu:CONTROL_SIZE * (nu + 1)] = fu[..., nu, :, :]
        return A, B

    return JointDynamics(n=STATE_SIZE * M, m_per_player=(CONTROL_SIZE,) * M, dt=dt, continuous_rhs=rhs,
                         integrator_kind=IntegratorKind(integrator), rhs_jacobian=jacobian)


def collision_constraint(p1, p2, r):
    """
    r^2 - ||p1 - p2||^2, <= 0 means the discs do not overlap.
    """
    diff = np.asarray(p1, dtype=float) - np.asarray(p2, dtype=float)
    value = r * r - np.sum(diff * diff, axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def _closest(p, boundary):
    """
    :return: the closest points (..., 2) and the direction (..., 2) of the segment each lies on.
    """
    p = np.asarray(p, dtype=float)
    boundary = np.asarray(boundary, dtype=float)
    if boundary.shape[0] == 1:
        return np.broadcast_to(boundary[0], p.shape).copy(), np.zeros(p.shape)
    a = boundary[:-1]
    d = boundary[1:] - a
    length2 = np.sum(d * d, axis=-1)
    rel = p[..., None, :] - a
    t = np.divide(np.sum(rel * d, axis=-1), length2, out=np.zeros(rel.shape[:-1]), where=length2 > 0)
    t = np.clip(t, 0.0, 1.0)
    q = a + t[..., None] * d
    dist2 = np.sum((p[..., None, :] - q) ** 2, axis=-1)
    best = np.argmin(dist2, axis=-1)
    return np.take_along_axis(q, best[..., None, None], axis=-2)[..., 0, :], d[best]


def closest_point(p, boundary):
    """
    The closest point on a polyline, ties go to the lowest segment index.
    :param p: points (..., 2).
    :param boundary: the polyline (K+1, 2).
    :return: the closest points (..., 2).
    """
    return _closest(p, boundary)[0]


def lateral_offset(p, lane):
    """
    The signed distance of points from a lane centerline, positive to the left of the direction of travel.
    :param p: points (..., 2).
    :param lane: the centerline (K+1, 2).
    :return: the offsets (...).
    """
    p = np.asarray(p, dtype=float)
    q, direction = _closest(p, lane)
    rel = p - q
    side = direction[..., 0] * rel[..., 1] - direction[..., 1] * rel[..., 0]
    return np.copysign(np.linalg.norm(rel, axis=-1), side)


def boundary_constraint(p, boundary, r):
    """
    r^2 - ||p - q||^2 where q is the closest point of the boundary to p.
    """
    p = np.asarray(p, dtype=float)
    diff = p - closest_point(p, boundary)
    value = r * r - np.sum(diff * diff, axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def _positions(X, M):
    return X.reshape(X.shape[:-1] + (M, STATE_SIZE))[..., :2]


def collision_family(M, r):
    pairs = list(combinations(range(M), 2))
    first = np.array([i for i, _ in pairs])
    second = np.array([j for _, j in pairs])
    rows = np.arange(len(pairs))

    def fn(X, U):
        pos = _positions(X, M)
        return collision_constraint(pos[..., first, :], pos[..., second, :], r)

    def jac(X, U):
        pos = _positions(X, M)
        diff = pos[:, first, :] - pos[:, second, :]
        jx = np.zeros((X.shape[0], len(pairs), X.shape[-1]))
        for axis in range(2):
            jx[:, rows, STATE_SIZE * first + axis] = -2.0 * diff[..., axis]
            jx[:, rows, STATE_SIZE * second + axis] = 2.0 * diff[..., axis]
        return jx, np.zeros((X.shape[0], len(pairs), U.shape[-1]))

    return StageConstraint(label=COLLISION, kind=ConstraintKind.INEQUALITY, rows=len(pairs), fn=fn, jac=jac,
                           row_labels=tuple(f"{i}-{j}" for i, j in pairs))


def boundary_family(M, r, boundaries, combos):
    """
    :param combos: the (player, boundary index) pairs to constrain.
    """

    def fn(X, U):
        pos = _positions(X, M)
        return np.stack([boundary_constraint(pos[..., nu, :], boundaries[b], r) for nu, b in combos], axis=-1)

    def jac(X, U):
        pos = _positions(X, M)
        jx = np.zeros((X.shape[0], len(combos), X.shape[-1]))
        for row, (nu, b) in enumerate(combos):
            diff = pos[:, nu, :] - closest_point(pos[:, nu, :], boundaries[b])
            jx[:, row, STATE_SIZE * nu:STATE_SIZE * nu + 2] = -2.0 * diff
        return jx, np.zeros((X.shape[0], len(combos), U.shape[-1]))

    return StageConstraint(label=BOUNDARY, kind=ConstraintKind.INEQUALITY, rows=len(combos), fn=fn, jac=jac,
                           row_labels=tuple(f"{nu}/b{b}" for nu, b in combos))


def goal_pin_family(M, pinned, goals, last_stage):
    """
    Equalities holding the final position of each pinned player on its goal.
    """
    columns = np.array([STATE_SIZE * nu + axis for nu in pinned for axis in range(2)])
    targets = np.array([goals[nu][axis] for nu in pinned for axis in range(2)])
    rows = np.arange(columns.size)

    def fn(X, U):
        return X[..., columns] - targets

    def jac(X, U):
        jx = np.zeros((X.shape[0], columns.size, X.shape[-1]))
        jx[:, rows, columns] = 1.0
        return jx, np.zeros((X.shape[0], columns.size, U.shape[-1]))

    return StageConstraint(label=GOAL_PIN, kind=ConstraintKind.EQUALITY, rows=columns.size, fn=fn, jac=jac,
                           steps=(last_stage,), row_labels=tuple(f"{nu}.{a}" for nu in pinned for a in 'xy'))


def lane_weights(weights, heading):
    """
    Rotates (longitudinal, lateral, heading, speed) weights into a world frame 4x4 matrix.
    """
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, s], [-s, c]])
    W = np.zeros((STATE_SIZE, STATE_SIZE))
    planar = rot.T @ np.diag(weights[:2]) @ rot
    W[:2, :2] = 0.5 * (planar + planar.T)
    W[2, 2] = weights[2]
    W[3, 3] = weights[3]
    return W


def player_cost(spec, nu):
    M = spec.M
    player = spec.players[nu]
    block = slice(STATE_SIZE * nu, STATE_SIZE * (nu + 1))
    Q = np.zeros((STATE_SIZE * M, STATE_SIZE * M))
    Qf = np.zeros_like(Q)
    Q[block, block] = lane_weights(player.weights.q, player.goal.theta)
    Qf[block, block] = lane_weights(player.weights.qf, player.goal.theta)
    x_f = np.zeros(STATE_SIZE * M)
    x_f[block] = player.goal
    return PlayerCost(Q=Q, R=np.diag(player.weights.r), Qf=Qf, x_f=x_f)


def build_scenario(spec):
    """
    Assembles the game: joint unicycle dynamics, a tracking cost per player, pairwise collision constraints and
    player / boundary constraints at every decision stage.
    :param spec: the scenario.
    :return: the GameProblem.
    """
    clash = starts_collision_free([p.start[:2] for p in spec.players], spec.radius)
    if clash is not None:
        raise ScenarioError(f"players[{clash[1]}].start", f"overlaps players[{clash[0]}]")
    M = spec.M
    dynamics = unicycle_dynamics(M, spec.dt, IntegratorKind(spec.integrator))
    costs = [player_cost(spec, nu) for nu in range(M)]
    families = []
    if M > 1:
        families.append(collision_family(M, spec.radius))
    boundaries = spec.road.boundary_arrays()
    combos = [(nu, b) for nu, p in enumerate(spec.players) if p.respects_boundaries for b in range(len(boundaries))]
    if combos:
        families.append(boundary_family(M, spec.radius, boundaries, combos))
    pinned = [nu for nu, p in enumerate(spec.players) if p.pin_goal]
    if pinned:
        families.append(goal_pin_family(M, pinned, [p.goal for p in spec.players], spec.steps - 2))
    x0 = np.concatenate([np.asarray(p.start, dtype=float) for p in spec.players])
    return GameProblem(dynamics=dynamics, costs=costs, x0=x0, N=spec.steps, constraints=ConstraintSet(families))


def pairwise_collision_values(states, M, r):
    """
    :param states: joint states (T, 4M).
    :return: collision values for every unordered pair, shape (T, pairs).
    """
    states = np.asarray(states, dtype=float)
    if M < 2:
        return np.zeros(states.shape[:-1] + (0,))
    pairs = list(combinations(range(M), 2))
    pos = _positions(states, M)
    return collision_constraint(pos[..., [i for i, _ in pairs], :], pos[..., [j for _, j in pairs], :], r)


def penalty_objective(prob, X, U, rho, nu):
    """
    J^v + 1/2 C'I_rho C where inequality rows only count when violated, the pure penalty objective used as a
    comparison metric.
    :param U: the per player controls.
    """
    U_joint = np.concatenate([np.asarray(u, dtype=float) for u in U], axis=-1)
    C = prob.constraints.evaluate(X, U_joint)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), C.shape)
    active = (np.arange(C.size) >= prob.n_ci) | (C >= 0.0)
    return cost_eval(prob.costs[nu], X, U[nu], prob.x0) + 0.5 * float(np.sum(np.where(active, rho * C * C, 0.0)))


def penalty_sensitivity(prob, X, U, rhos):
    """
    :return: the penalty objective of every player for each rho, shape (len(rhos), M).
    """
    return np.array([[penalty_objective(prob, X, U, rho, nu) for nu in range(prob.M)] for rho in rhos])


RAMP_TOP = ((-40.0, 3.25), (120.0, 3.25))
RAMP_GORE = ((-40.0, -3.25), (7.95, -3.25), (-40.0, -11.975))
RAMP_LOWER = ((-40.0, -18.582), (44.257, -3.25), (120.0, -3.25))
RAMP_HEADING = 0.18
RAMP_LANES = (
    ((-40.0, 0.0), (120.0, 0.0)),
    ((-40.0, -15.279), (43.963, 0.0)),
)

INTERSECTION_CORNERS = (
    ((-40.0, -6.5), (-6.5, -6.5), (-6.5, -40.0)),
    ((40.0, -6.5), (6.5, -6.5), (6.5, -40.0)),
    ((-40.0, 6.5), (-6.5, 6.5), (-6.5, 40.0)),
    ((40.0, 6.5), (6.5, 6.5), (6.5, 40.0)),
)
INTERSECTION_LANES = (
    ((-40.0, -3.25), (40.0, -3.25)),
    ((40.0, 3.25), (-40.0, 3.25)),
    ((3.25, -40.0), (3.25, 40.0)),
    ((-3.25, 40.0), (-3.25, -40.0)),
)
CROSSING_MEDIAN = ((-40.0, 0.0), (40.0, 0.0))

DEFAULT_RADIUS = 2.0
DEFAULT_HORIZON = 5.0
DEFAULT_STEPS = 40
LANE_REACH = 1000.0

PEDESTRIAN_RADIUS = 2.5
# a pedestrian changes pace and direction slowly compared to a car
PEDESTRIAN_WEIGHTS = CostWeights(r=(100.0, 100.0))


def _player(name, start, goal, **kwargs):
    return PlayerSpec(name=name, start=UnicycleState(*start), goal=UnicycleState(*goal), **kwargs)


def ramp_merge(M=3):
    """
    A car merging from an on-ramp just ahead of a main lane follower, M=3 adds a lead car and M=4 a further car
    behind.
    """
    players = [
        _player('ramp', (0.0, -8.0, RAMP_HEADING, 10.0), (50.0, 0.0, 0.0, 10.0)),
        _player('follower', (-2.0, 0.0, 0.0, 10.0), (48.0, 0.0, 0.0, 10.0)),
        _player('lead', (10.0, 0.0, 0.0, 10.0), (60.0, 0.0, 0.0, 10.0)),
        _player('tail', (-14.0, 0.0, 0.0, 10.0), (36.0, 0.0, 0.0, 10.0)),
    ]
    if not 2 <= M <= len(players):
        raise ScenarioError('players', f"ramp merge supports 2 to {len(players)} players, not {M}")
    return ScenarioSpec(name=f"ramp_merge_{M}", kind=ScenarioKind.RAMP_MERGE, radius=DEFAULT_RADIUS,
                        horizon=DEFAULT_HORIZON, steps=DEFAULT_STEPS, players=tuple(players[:M]),
                        road=RoadGeometry(boundaries=(RAMP_TOP, RAMP_GORE, RAMP_LOWER), lanes=RAMP_LANES))


def intersection(M=2):
    """
    A four way intersection crossed straight over, blue and north reach their crossing point together as do north
    and red, south crosses behind everyone.
    """
    half = math.pi / 2
    players = [
        _player('blue', (-25.0, -3.25, 0.0, 10.0), (25.0, -3.25, 0.0, 10.0)),
        _player('north', (3.25, -30.0, half, 10.0), (3.25, 25.0, half, 10.0)),
        _player('red', (38.0, 3.25, math.pi, 10.0), (-25.0, 3.25, math.pi, 10.0)),
        _player('south', (-3.25, 25.0, -half, 10.0), (-3.25, -25.0, -half, 10.0)),
    ]
    if not 2 <= M <= len(players):
        raise ScenarioError('players', f"intersection supports 2 to {len(players)} players, not {M}")
    return ScenarioSpec(name=f"intersection_{M}", kind=ScenarioKind.INTERSECTION, radius=DEFAULT_RADIUS,
                        horizon=DEFAULT_HORIZON, steps=DEFAULT_STEPS, players=tuple(players[:M]),
                        road=RoadGeometry(boundaries=INTERSECTION_CORNERS, lanes=INTERSECTION_LANES))


def pedestrian_crossing(desired_speed=2.5, true_speed=1.25):
    """
    The blue car meets a pedestrian who is already stepping into its lane, a median keeps the car out of the
    oncoming lane and the pedestrian is not bound by any road edge.
    """
    half = math.pi / 2
    players = (
        _player('blue', (-15.0, -3.25, 0.0, 10.0), (25.0, -3.25, 0.0, 10.0)),
        _player('red', (25.0, 3.25, math.pi, 10.0), (-25.0, 3.25, math.pi, 10.0)),
        _player('pedestrian', (12.0, -6.0, half, desired_speed), (12.0, 7.0, half, desired_speed),
                weights=PEDESTRIAN_WEIGHTS, respects_boundaries=False, pedestrian=True),
    )
    return ScenarioSpec(name='pedestrian', kind=ScenarioKind.INTERSECTION, radius=PEDESTRIAN_RADIUS,
                        horizon=DEFAULT_HORIZON, steps=DEFAULT_STEPS, players=players,
                        road=RoadGeometry(boundaries=INTERSECTION_CORNERS + (CROSSING_MEDIAN,),
                                          lanes=INTERSECTION_LANES[:2]),
                        pedestrian=PedestrianSpec(player=2, desired_speed=desired_speed, true_speed=true_speed))


def head_on_infeasible():
    """
    Two cars whose final positions are pinned to goals closer than the collision radius, no feasible point exists.
    """
    players = (
        _player('west', (-10.0, 0.0, 0.0, 5.0), (0.0, 0.0, 0.0, 0.0), pin_goal=True),
        _player('east', (10.0, 0.0, math.pi, 5.0), (0.5, 0.0, math.pi, 0.0), pin_goal=True),
    )
    return ScenarioSpec(name='head_on_infeasible', kind=ScenarioKind.RAMP_MERGE, radius=DEFAULT_RADIUS, horizon=2.5,
                        steps=20, players=players)


def standard_scenario(kind, M):
    kind = ScenarioKind(kind)
    return ramp_merge(M) if kind is ScenarioKind.RAMP_MERGE else intersection(M)


def _require(doc, key, path):
    if not isinstance(doc, dict):
        raise ScenarioError(path, "expected an object")
    if key not in doc:
        raise ScenarioError(f"{path}.{key}" if path else key, "is required")
    return doc[key]


def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ScenarioError(path, f"expected a finite number, was {value!r}")
    return float(value)


def _numbers(value, size, path):
    if not isinstance(value, list) or len(value) != size:
        raise ScenarioError(path, f"expected a list of {size} numbers, was {value!r}")
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _flag(doc, key, path, default):
    value = doc.get(key, default)
    if not isinstance(value, bool):
        raise ScenarioError(f"{path}.{key}", f"expected true or false, was {value!r}")
    return value


def _polylines(value, path):
    if not isinstance(value, list):
        raise ScenarioError(path, "expected a list of polylines")
    lines = []
    for i, line in enumerate(value):
        if not isinstance(line, list):
            raise ScenarioError(f"{path}[{i}]", "expected a list of points")
        lines.append(tuple(_numbers(p, 2, f"{path}[{i}][{j}]") for j, p in enumerate(line)))
    return tuple(lines)


def _parse_player(doc, path):
    name = _require(doc, 'name', path)
    if not isinstance(name, str):
        raise ScenarioError(f"{path}.name", "expected a string")
    weights_doc = doc.get('weights', {})
    if not isinstance(weights_doc, dict):
        raise ScenarioError(f"{path}.weights", "expected an object")
    defaults = CostWeights()
    weights = CostWeights(q=_numbers(weights_doc.get('q', list(defaults.q)), 4, f"{path}.weights.q"),
                          qf=_numbers(weights_doc.get('qf', list(defaults.qf)), 4, f"{path}.weights.qf"),
                          r=_numbers(weights_doc.get('r', list(defaults.r)), 2, f"{path}.weights.r"))
    return PlayerSpec(name=name,
                      start=UnicycleState(*_numbers(_require(doc, 'start', path), 4, f"{path}.start")),
                      goal=UnicycleState(*_numbers(_require(doc, 'goal', path), 4, f"{path}.goal")),
                      weights=weights,
                      respects_boundaries=_flag(doc, 'respects_boundaries', path, True),
                      pedestrian=_flag(doc, 'pedestrian', path, False),
                      pin_goal=_flag(doc, 'pin_goal', path, False))


def parse_scenario(doc):
    """
    Converts a scenario document into a ScenarioSpec.
    :param doc: the decoded json.
    :return: the spec, raises ScenarioError naming the offending field if the document is invalid.
    """
    version = _require(doc, 'schema_version', '')
    if version != SCHEMA_VERSION:
        raise ScenarioError('schema_version', f"unsupported version {version!r}, expected {SCHEMA_VERSION}")
    try:
        kind = ScenarioKind(_require(doc, 'kind', ''))
    except ValueError:
        raise ScenarioError('kind', f"must be one of {[k.value for k in ScenarioKind]}")
    players_doc = _require(doc, 'players', '')
    if not isinstance(players_doc, list):
        raise ScenarioError('players', "expected a list")
    players = tuple(_parse_player(p, f"players[{i}]") for i, p in enumerate(players_doc))
    steps = _require(doc, 'steps', '')
    if isinstance(steps, bool) or not isinstance(steps, int):
        raise ScenarioError('steps', f"expected an integer, was {steps!r}")
    road = RoadGeometry(boundaries=_polylines(doc.get('boundaries', []), 'boundaries'),
                        lanes=_polylines(doc.get('lanes', []), 'lanes'))
    pedestrian = None
    if doc.get('pedestrian') is not None:
        ped = doc['pedestrian']
        player = _require(ped, 'player', 'pedestrian')
        if isinstance(player, bool) or not isinstance(player, int):
            raise ScenarioError('pedestrian.player', f"expected an integer, was {player!r}")
        pedestrian = PedestrianSpec(player=player,
                                    desired_speed=_number(_require(ped, 'desired_speed', 'pedestrian'),
                                                          'pedestrian.desired_speed'),
                                    true_speed=_number(_require(ped, 'true_speed', 'pedestrian'),
                                                       'pedestrian.true_speed'))
    return ScenarioSpec(name=str(doc.get('name', kind.value)), kind=kind,
                        radius=_number(_require(doc, 'radius', ''), 'radius'),
                        horizon=_number(_require(doc, 'horizon', ''), 'horizon'),
                        steps=steps, players=players, road=road,
                        integrator=str(doc.get('integrator', IntegratorKind.RK4.value)), pedestrian=pedestrian)


def load_scenario(path):
    """
    Loads a scenario file.
    :param path: the file.
    :return: the spec.
    """
    with open(path, 'r') as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ScenarioError('', f"{path} is not valid json: {e}")
    logger.info(f"Loaded scenario from {path}")
    return parse_scenario(doc)


def scenario_to_dict(spec):
    doc = {
        'schema_version': SCHEMA_VERSION,
        'name': spec.name,
        'kind': spec.kind.value,
        'radius': spec.radius,
        'horizon': spec.horizon,
        'steps': spec.steps,
        'integrator': spec.integrator,
        'boundaries': [[list(p) for p in line] for line in spec.road.boundaries],
        'players': [{
            'name': p.name,
            'start': list(p.start),
            'goal': list(p.goal),
            'weights': {'q': list(p.weights.q), 'qf': list(p.weights.qf), 'r': list(p.weights.r)},
            'respects_boundaries': p.respects_boundaries,
            'pedestrian': p.pedestrian,
            'pin_goal': p.pin_goal,
        } for p in spec.players],
    }
    if spec.road.lanes:
        doc['lanes'] = [[list(p) for p in line] for line in spec.road.lanes]
    if spec.pedestrian is not None:
        doc['pedestrian'] = {'player': spec.pedestrian.player, 'desired_speed': spec.pedestrian.desired_speed,
                             'true_speed': spec.pedestrian.true_speed}
    return doc


def dump_scenario(spec, path):
    """
    Writes the scenario as json, load_scenario reads it back to an equal spec.
    """
    write_json(path, scenario_to_dict(spec))


def bundled_scenario(name):
    """
    :param name: a file name under dyngame/data, with or without the .json suffix.
    """
    if not name.endswith('.json'):
        name = name + '.json'
    return load_scenario(os.path.join(DATA_DIR, name))
