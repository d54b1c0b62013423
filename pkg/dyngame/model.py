import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import block_diag

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-10
FD_STEP = 1e-6


class DimensionError(ValueError):
    """
    Raised when an array does not have the shape implied by the game it is used with.
    """
    pass


class IntegratorKind(Enum):
    EULER = 'ExplicitEuler'
    RK4 = 'RK4'
    DISCRETE = 'Discrete'


class ConstraintKind(Enum):
    INEQUALITY = 'inequality'
    EQUALITY = 'equality'


def _check_trailing(name, arr, size):
    if arr.shape[-1:] != (size,):
        raise DimensionError(f"{name} has shape {arr.shape}, expected a trailing dimension of {size}")


@dataclass(frozen=True, eq=False)
class JointDynamics:
    """
    The joint discrete time dynamics x_{k+1} = f(x_k, u_k) of all players. The rhs (and its optional jacobian) must
    accept arrays with arbitrary leading axes, i.e. x is (..., n) and u is (..., m).
    """
    n: int
    m_per_player: Tuple[int, ...]
    dt: float
    continuous_rhs: Callable
    integrator_kind: IntegratorKind = IntegratorKind.RK4
    rhs_jacobian: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, 'm_per_player', tuple(int(m) for m in self.m_per_player))
        if int(self.n) < 1:
            raise ValueError(f"state dimension must be at least 1, was {self.n}")
        if len(self.m_per_player) == 0 or min(self.m_per_player) < 1:
            raise ValueError(f"every player needs at least 1 control, was {self.m_per_player}")
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise ValueError(f"dt must be positive, was {self.dt}")

    @property
    def M(self):
        return len(self.m_per_player)

    @property
    def m(self):
        return sum(self.m_per_player)

    @property
    def control_offsets(self):
        """
        :return: the offset of each player's block within the joint control vector.
        """
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.m_per_player)[:-1]]))

    def player_slice(self, nu):
        offset = self.control_offsets[nu]
        return slice(offset, offset + self.m_per_player[nu])


def _discrete_step(dyn, x, u):
    f = dyn.continuous_rhs
    h = dyn.dt
    if dyn.integrator_kind is IntegratorKind.DISCRETE:
        return np.asarray(f(x, u), dtype=float)
    if dyn.integrator_kind is IntegratorKind.EULER:
        return x + h * f(x, u)
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def dynamics_step(dyn, x, u):
    """
    Advances the joint state by one step under the configured integrator.
    :param dyn: the dynamics.
    :param x: the state, shape (..., n).
    :param u: the joint control, shape (..., m).
    :return: the next state.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_trailing('x', x, dyn.n)
    _check_trailing('u', u, dyn.m)
    return _discrete_step(dyn, x, u)


def dynamics_jacobians(dyn, x, u):
    """
    Computes A = dx_{k+1}/dx_k and B = dx_{k+1}/du_k of the discrete step. Analytic rhs jacobians are pushed through
    the integrator stages exactly, otherwise central differences are used.
    :param dyn: the dynamics.
    :param x: the state, shape (..., n).
    :param u: the joint control, shape (..., m).
    :return: A (..., n, n), B (..., n, m).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_trailing('x', x, dyn.n)
    _check_trailing('u', u, dyn.m)
    if dyn.rhs_jacobian is None:
        return _fd_jacobians(dyn, x, u)
    jac = dyn.rhs_jacobian
    if dyn.integrator_kind is IntegratorKind.DISCRETE:
        A, B = jac(x, u)
        return np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    h = dyn.dt
    eye = np.eye(dyn.n)
    if dyn.integrator_kind is IntegratorKind.EULER:
        fx, fu = jac(x, u)
        return eye + h * fx, h * fu
    f = dyn.continuous_rhs
    # RK4, chain rule through each stage
    k1 = f(x, u)
    dk1x, dk1u = jac(x, u)
    z2 = x + 0.5 * h * k1
    fx, fu = jac(z2, u)
    dk2x = fx @ (eye + 0.5 * h * dk1x)
    dk2u = fx @ (0.5 * h * dk1u) + fu
    k2 = f(z2, u)
    z3 = x + 0.5 * h * k2
    fx, fu = jac(z3, u)
    dk3x = fx @ (eye + 0.5 * h * dk2x)
    dk3u = fx @ (0.5 * h * dk2u) + fu
    k3 = f(z3, u)
    z4 = x + h * k3
    fx, fu = jac(z4, u)
    dk4x = fx @ (eye + h * dk3x)
    dk4u = fx @ (h * dk3u) + fu
    A = eye + (h / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    B = (h / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return A, B


def _fd_jacobians(dyn, x, u):
    lead = x.shape[:-1]
    A = np.empty(lead + (dyn.n, dyn.n))
    B = np.empty(lead + (dyn.n, dyn.m))
    for target, out, is_state in ((x, A, True), (u, B, False)):
        for i in range(target.shape[-1]):
            plus = target.copy()
            minus = target.copy()
            step = FD_STEP * (1.0 + np.abs(target[..., i]))
            plus[..., i] += step
            minus[..., i] -= step
            width = (plus[..., i] - minus[..., i])[..., None]
            if is_state:
                diff = _discrete_step(dyn, plus, u) - _discrete_step(dyn, minus, u)
            else:
                diff = _discrete_step(dyn, x, plus) - _discrete_step(dyn, x, minus)
            out[..., :, i] = diff / width
    return A, B


def rollout(dyn, x0, U):
    """
    Forward simulates the dynamics.
    :param dyn: the dynamics.
    :param x0: the initial state, shape (..., n).
    :param U: the joint controls, shape (..., S, m).
    :return: the states reached after each control, shape (..., S, n).
    """
    x = np.asarray(x0, dtype=float)
    U = np.asarray(U, dtype=float)
    _check_trailing('x0', x, dyn.n)
    _check_trailing('U', U, dyn.m)
    X = np.empty(U.shape[:-1] + (dyn.n,))
    for t in range(U.shape[-2]):
        x = _discrete_step(dyn, x, U[..., t, :])
        X[..., t, :] = x
    return X


def linear_dynamics(A, B_per_player, dt=1.0):
    """
    Creates dynamics for x_{k+1} = A x_k + sum_v B^v u^v_k with exact jacobians.
    :param A: the state transition matrix.
    :param B_per_player: the input matrix of each player.
    :param dt: nominal step duration, only used for time stamps.
    :return: the dynamics.
    """
    A = np.array(A, dtype=float)
    Bs = [np.array(b, dtype=float).reshape(A.shape[0], -1) for b in B_per_player]
    B = np.hstack(Bs)

    def step(x, u):
        return x @ A.T + u @ B.T

    def jacobian(x, u):
        lead = np.shape(x)[:-1]
        return np.broadcast_to(A, lead + A.shape).copy(), np.broadcast_to(B, lead + B.shape).copy()

    return JointDynamics(n=A.shape[0], m_per_player=tuple(b.shape[1] for b in Bs), dt=dt, continuous_rhs=step,
                         integrator_kind=IntegratorKind.DISCRETE, rhs_jacobian=jacobian)


def _check_weight(name, W, size, definite):
    if W.shape != (size, size):
        raise DimensionError(f"{name} has shape {W.shape}, expected ({size}, {size})")
    if not np.allclose(W, W.T, rtol=0.0, atol=WEIGHT_TOLERANCE):
        raise ValueError(f"{name} is not symmetric")
    lowest = np.linalg.eigvalsh(0.5 * (W + W.T)).min()
    if definite and lowest <= WEIGHT_TOLERANCE:
        raise ValueError(f"{name} is not positive definite, minimum eigenvalue is {lowest}")
    if not definite and lowest < -WEIGHT_TOLERANCE:
        raise ValueError(f"{name} is not positive semidefinite, minimum eigenvalue is {lowest}")


@dataclass(frozen=True, eq=False)
class PlayerCost:
    """
    A quadratic tracking cost, Q and Qf act on the joint state while R acts on the player's own controls only.
    """
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    x_f: np.ndarray

    def __post_init__(self):
        for name in ('Q', 'R', 'Qf', 'x_f'):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        n = self.x_f.shape[0]
        if self.x_f.ndim != 1:
            raise DimensionError(f"x_f must be a vector, has shape {self.x_f.shape}")
        _check_weight('Q', self.Q, n, False)
        _check_weight('Qf', self.Qf, n, False)
        if self.R.ndim != 2:
            raise DimensionError(f"R must be a matrix, has shape {self.R.shape}")
        _check_weight('R', self.R, self.R.shape[0], True)

    @property
    def n(self):
        return self.x_f.shape[0]

    @property
    def m(self):
        return self.R.shape[0]


def cost_eval(cost, X, U_nu, x0=None):
    """
    Evaluates sum_{k=1}^{N-1} 1/2 (x_k - x_f)'Q(x_k - x_f) + 1/2 u_k'R u_k plus the terminal term on x_N.
    The k=1 state term depends only on the pinned x_1 and is a constant of the game. Every objective the package
    reports passes x0 and is the full J^v, without it the value is lower by that constant.
    :param cost: the player cost.
    :param X: the states x_2..x_N, shape (..., S, n).
    :param U_nu: the player's controls u_1..u_{N-1}, shape (..., S, m_nu).
    :param x0: the pinned initial state x_1, its stage term is left out when this is None.
    :return: the cost.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U_nu, dtype=float)
    _check_trailing('X', X, cost.n)
    _check_trailing('U', U, cost.m)
    if X.shape[-2] != U.shape[-2]:
        raise DimensionError(f"X has {X.shape[-2]} steps but U has {U.shape[-2]}")
    err = X - cost.x_f
    stage = err[..., :-1, :]
    last = err[..., -1, :]
    value = 0.5 * np.einsum('...ti,ij,...tj->...', stage, cost.Q, stage)
    value = value + 0.5 * np.einsum('...i,ij,...j->...', last, cost.Qf, last)
    value = value + 0.5 * np.einsum('...ti,ij,...tj->...', U, cost.R, U)
    if x0 is not None:
        e0 = np.asarray(x0, dtype=float) - cost.x_f
        value = value + 0.5 * e0 @ cost.Q @ e0
    return float(value) if np.ndim(value) == 0 else value


def cost_gradients(cost, X, U_nu):
    """
    :return: the stage-wise cost gradient with respect to X (S, n) and U_nu (S, m_nu).
    """
    err = np.asarray(X, dtype=float) - cost.x_f
    gx = err @ cost.Q
    gx[-1] = cost.Qf @ err[-1]
    gu = np.asarray(U_nu, dtype=float) @ cost.R
    return gx, gu


def cost_derivatives(cost, X, U_nu):
    """
    Exact gradient and hessian of the quadratic cost over (X, U_nu), both flattened time major with X first.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U_nu, dtype=float)
    _check_trailing('X', X, cost.n)
    _check_trailing('U', U, cost.m)
    gx, gu = cost_gradients(cost, X, U)
    S = X.shape[0]
    hess = block_diag(*([cost.Q] * (S - 1) + [cost.Qf] + [cost.R] * S))
    return np.concatenate([gx.ravel(), gu.ravel()]), hess


@dataclass(frozen=True, eq=False)
class StageConstraint:
    """
    A family of constraint rows imposed at each listed stage t, where stage t pairs the state X[t] = x_{t+2} with the
    control U[t] = u_{t+1} that produced it. fn maps (X (..., L, n), U (..., L, m)) to (..., L, rows) and jac maps
    (X (L, n), U (L, m)) to (L, rows, n), (L, rows, m).
    """
    label: str
    kind: ConstraintKind
    rows: int
    fn: Callable
    jac: Callable
    steps: Optional[Tuple[int, ...]] = None
    row_labels: Optional[Tuple[str, ...]] = None

    def stage_indices(self, S):
        if self.steps is None:
            return np.arange(S)
        steps = np.asarray(self.steps, dtype=int)
        if steps.size and (steps.min() < 0 or steps.max() >= S):
            raise DimensionError(f"{self.label} refers to stages {self.steps} outside 0..{S - 1}")
        return steps


@dataclass
class FamilyEvaluation:
    family: StageConstraint
    steps: np.ndarray
    index: np.ndarray
    values: np.ndarray
    jx: Optional[np.ndarray] = None
    ju: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """
    The shared constraints, stacked as C = [C_i; C_e]. Within each part rows are ordered by family, then stage, then
    row.
    """
    families: Tuple[StageConstraint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'families', tuple(self.families))

    @property
    def inequality_fns(self):
        return tuple(f for f in self.families if f.kind is ConstraintKind.INEQUALITY)

    @property
    def equality_fns(self):
        return tuple(f for f in self.families if f.kind is ConstraintKind.EQUALITY)

    @property
    def ordered(self):
        return self.inequality_fns + self.equality_fns

    def counts(self, S):
        """
        :return: (n_ci, n_ce) over a horizon of S stages.
        """
        ci = sum(len(f.stage_indices(S)) * f.rows for f in self.inequality_fns)
        ce = sum(len(f.stage_indices(S)) * f.rows for f in self.equality_fns)
        return ci, ce

    def layout(self, S):
        offset = 0
        for family in self.ordered:
            steps = family.stage_indices(S)
            size = len(steps) * family.rows
            yield family, steps, np.arange(offset, offset + size).reshape(len(steps), family.rows)
            offset += size

    def labels(self, S):
        names = []
        for family, steps, _ in self.layout(S):
            row_names = family.row_labels or tuple(str(r) for r in range(family.rows))
            names.extend(f"{family.label}[{row}]@k={t + 2}" for t in steps for row in row_names)
        return names

    def evaluate_families(self, X, U, jacobians=False):
        S = X.shape[-2]
        evaluations = []
        for family, steps, index in self.layout(S):
            if len(steps) == 0:
                continue
            xs = X[..., steps, :]
            us = U[..., steps, :]
            values = np.asarray(family.fn(xs, us), dtype=float)
            evaluation = FamilyEvaluation(family, steps, index, values)
            if jacobians:
                evaluation.jx, evaluation.ju = family.jac(xs, us)
            evaluations.append(evaluation)
        return evaluations

    def evaluate(self, X, U):
        """
        :param X: the states, shape (..., S, n).
        :param U: the joint controls, shape (..., S, m).
        :return: C, shape (..., n_c).
        """
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        lead = X.shape[:-2]
        parts = [e.values.reshape(lead + (-1,)) for e in self.evaluate_families(X, U)]
        if not parts:
            return np.zeros(lead + (0,))
        return np.concatenate(parts, axis=-1)

    def violation(self, values, S):
        """
        :return: the max violation, max(C_i, 0) over inequalities and |C_e| over equalities, 0 when empty.
        """
        values = np.asarray(values, dtype=float)
        if values.shape[-1] == 0:
            return 0.0 if values.ndim == 1 else np.zeros(values.shape[:-1])
        n_ci, _ = self.counts(S)
        worst = np.concatenate([np.maximum(values[..., :n_ci], 0.0), np.abs(values[..., n_ci:])], axis=-1)
        result = worst.max(axis=-1)
        return float(result) if np.ndim(result) == 0 else result

    def family_values(self, X, U, label):
        """
        :return: the values of the named family as (stages, rows), None if it does not exist.
        """
        for e in self.evaluate_families(np.asarray(X, dtype=float), np.asarray(U, dtype=float)):
            if e.family.label == label:
                return e.values
        return None


@dataclass(frozen=True, eq=False)
class GameProblem:
    """
    An M player game over N time steps, x_1 is pinned to x0 so the decision states are x_2..x_N.
    """
    dynamics: JointDynamics
    costs: Tuple[PlayerCost, ...]
    x0: np.ndarray
    N: int
    constraints: ConstraintSet = ConstraintSet()

    def __post_init__(self):
        object.__setattr__(self, 'costs', tuple(self.costs))
        object.__setattr__(self, 'x0', np.array(self.x0, dtype=float))
        if int(self.N) < 2:
            raise ValueError(f"N must be at least 2, was {self.N}")
        if len(self.costs) < 1:
            raise ValueError("a game needs at least one player")
        if len(self.costs) != self.dynamics.M:
            raise DimensionError(f"{len(self.costs)} costs supplied for {self.dynamics.M} players")
        for nu, cost in enumerate(self.costs):
            if cost.n != self.dynamics.n or cost.m != self.dynamics.m_per_player[nu]:
                raise DimensionError(f"cost {nu} is sized for ({cost.n}, {cost.m})")
        if self.x0.shape != (self.dynamics.n,):
            raise DimensionError(f"x0 has shape {self.x0.shape}, expected ({self.dynamics.n},)")

    @property
    def M(self):
        return self.dynamics.M

    @property
    def S(self):
        """ the number of decision stages, N-1. """
        return int(self.N) - 1

    @property
    def n(self):
        return self.dynamics.n

    @property
    def m(self):
        return self.dynamics.m

    @property
    def n_bar(self):
        return self.n * self.S

    @property
    def m_bar(self):
        return self.m * self.S

    @property
    def m_bar_per_player(self):
        return tuple(m * self.S for m in self.dynamics.m_per_player)

    @property
    def n_ci(self):
        return self.constraints.counts(self.S)[0]

    @property
    def n_ce(self):
        return self.constraints.counts(self.S)[1]

    @property
    def n_c(self):
        return sum(self.constraints.counts(self.S))

    def with_x0(self, x0):
        return replace(self, x0=np.array(x0, dtype=float))

    def max_violation(self, X, U):
        """
        :param X: the states (S, n).
        :param U: the joint controls (S, m).
        """
        return self.constraints.violation(self.constraints.evaluate(X, U), self.S)


def dynamics_defects(prob, X, U):
    """
    :return: D_k = x_{k+1} - f(x_k, u_k) for each stage as an (S, n) array, x_1 is taken from the problem.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.shape != (prob.S, prob.n) or U.shape != (prob.S, prob.m):
        raise DimensionError(f"expected X {(prob.S, prob.n)} and U {(prob.S, prob.m)}, got {X.shape} {U.shape}")
    defects = np.empty_like(X)
    prev = prob.x0
    for t in range(prob.S):
        defects[t] = X[t] - _discrete_step(prob.dynamics, prev, U[t])
        prev = X[t]
    return defects


def stacked_dynamics_residual(prob, X, U):
    """
    :param prob: the game.
    :param X: the states x_2..x_N, shape (S, n).
    :param U: the joint controls u_1..u_{N-1}, shape (S, m).
    :return: the stacked dynamics defect, length n_bar.
    """
    return dynamics_defects(prob, X, U).ravel()


def split_controls(dyn, U):
    """
    Splits joint controls (..., m) into the per player blocks.
    """
    return [U[..., dyn.player_slice(nu)] for nu in range(dyn.M)]


def join_controls(U_per_player: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(u, dtype=float) for u in U_per_player], axis=-1)
