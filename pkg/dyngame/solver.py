import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from dyngame.kkt import ALState, PrimalDual, SingularSystemError, newton_step, residual, residual_jacobian, \
    structured_solve
from dyngame.model import rollout

logger = logging.getLogger(__name__)

STALL_WINDOW = 3
STALL_DECREASE = 1e-4
RETRY_REG_FACTOR = 100.0
STAGNATION_RATIO = 0.25


class SolveStatus(Enum):
    CONVERGED = 'Converged'
    MAX_ITERATIONS = 'MaxIterations'
    LINE_SEARCH_FAILURE = 'LineSearchFailure'
    SINGULAR_SYSTEM = 'SingularSystem'


class PenaltySchedule(Enum):
    EVERY = 'every'
    STAGNATION = 'stagnation'


class LineSearchFailure(RuntimeError):
    """
    Raised when no step of at least alpha_min satisfies the sufficient decrease condition.
    """

    def __init__(self, message, alpha):
        super().__init__(message)
        self.alpha = alpha


@dataclass(frozen=True)
class SolverOptions:
    beta: float = 0.01
    tau: float = 0.5
    alpha_min: float = 1e-8
    tol_opt: float = 1e-2
    tol_feas: float = 1e-3
    rho0: float = 1.0
    gamma: float = 10.0
    rho_max: float = 1e8
    max_newton: int = 50
    max_outer: int = 20
    eps_reg: float = 1e-6
    use_structured_solve: bool = True
    penalty_schedule: str = PenaltySchedule.EVERY.value

    def __post_init__(self):
        if not 0.0 < self.beta < 0.5:
            raise ValueError(f"beta must be in (0, 0.5), was {self.beta}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), was {self.tau}")
        if not 0.0 < self.alpha_min <= 1.0:
            raise ValueError(f"alpha_min must be in (0, 1], was {self.alpha_min}")
        if not self.tol_opt > 0 or not self.tol_feas > 0:
            raise ValueError(f"tolerances must be positive, were {self.tol_opt} {self.tol_feas}")
        if not self.rho0 > 0 or not self.rho_max >= self.rho0:
            raise ValueError(f"need 0 < rho0 <= rho_max, were {self.rho0} {self.rho_max}")
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must exceed 1, was {self.gamma}")
        if self.max_newton < 1 or self.max_outer < 1:
            raise ValueError(f"iteration caps must be positive, were {self.max_newton} {self.max_outer}")
        if not np.isfinite(self.eps_reg) or self.eps_reg < 0:
            raise ValueError(f"eps_reg must be finite and non negative, was {self.eps_reg}")
        PenaltySchedule(self.penalty_schedule)


@dataclass(frozen=True)
class StepRecord:
    """
    An accepted newton step, kept so the sufficient decrease condition can be audited after the fact.
    """
    alpha: float
    merit_before: float
    merit_after: float
    beta: float

    @property
    def sufficient(self):
        return self.merit_after < (1.0 - self.alpha * self.beta) * self.merit_before


@dataclass
class SolveReport:
    status: SolveStatus = SolveStatus.MAX_ITERATIONS
    newton_iters: int = 0
    outer_iters: int = 0
    residual_history: List[float] = field(default_factory=list)
    violation_history: List[float] = field(default_factory=list)
    rho_history: List[np.ndarray] = field(default_factory=list)
    lambda_min_history: List[float] = field(default_factory=list)
    steps: List[StepRecord] = field(default_factory=list)
    wall_time: float = 0.0
    residual_norm: float = float('inf')
    max_violation: float = float('inf')
    stalled: bool = False
    failure_iterate: Optional[PrimalDual] = None

    @property
    def converged(self):
        return self.status is SolveStatus.CONVERGED

    def to_dict(self):
        return {
            'status': self.status.value,
            'newton_iters': self.newton_iters,
            'outer_iters': self.outer_iters,
            'residual_norm': self.residual_norm,
            'max_violation': self.max_violation,
            'stalled': self.stalled,
            'residual_history': list(self.residual_history),
            'violation_history': list(self.violation_history),
        }


@dataclass
class InnerResult:
    y: PrimalDual
    status: SolveStatus
    iterations: int
    residual_norm: float
    residual_history: List[float]
    steps: List[StepRecord]
    stalled: bool = False


def backtracking_search(residual_fn, y, G, dy, opts):
    """
    Backtracks alpha over 1, tau, tau^2, ... until ||G(y + alpha dy)||_1 < (1 - alpha beta) ||G(y)||_1.
    :param residual_fn: maps a flat vector to the residual.
    :param y: the current point as a flat vector.
    :param G: the residual at y.
    :param dy: the search direction.
    :param opts: the solver options.
    :return: alpha, the accepted point and its residual.
    """
    merit = float(np.abs(G).sum())
    alpha = 1.0
    if merit == 0.0:
        return alpha, y, G
    while alpha >= opts.alpha_min:
        trial = y + alpha * dy
        G_trial = residual_fn(trial)
        trial_merit = np.abs(G_trial).sum()
        if np.isfinite(trial_merit) and trial_merit < (1.0 - alpha * opts.beta) * merit:
            return alpha, trial, G_trial
        alpha *= opts.tau
    raise LineSearchFailure(f"no sufficient decrease down to alpha {alpha / opts.tau:.2e}", alpha / opts.tau)


def line_search(prob, al, y, G, dy, opts):
    """
    :return: the largest alpha in {1, tau, tau^2, ...} satisfying the sufficient decrease condition on ||G||_1.
    """
    alpha, _, _ = backtracking_search(lambda v: residual(prob, PrimalDual.from_vector(prob, v), al), y.flatten(), G,
                                      dy, opts)
    return alpha


def _direction(sys, eps_reg, opts):
    if opts.use_structured_solve:
        return structured_solve(sys, eps_reg)
    return newton_step(sys, eps_reg)


def _stalled(history):
    if len(history) <= STALL_WINDOW:
        return False
    start = history[-STALL_WINDOW - 1]
    return start - history[-1] <= STALL_DECREASE * start


def inner_newton(prob, al, y0, opts):
    """
    Newton's method on G with lambda and rho frozen, I_rho is re-evaluated on every residual evaluation.
    :return: the final iterate and an InnerResult.
    """
    y = y0.copy()
    vec = y.flatten()
    if not np.all(np.isfinite(vec)):
        raise ValueError("initial iterate is not finite")
    sys = residual_jacobian(prob, y, al)
    G = sys.G
    norm = float(np.abs(G).sum())
    history = [norm]
    steps = []
    eps = opts.eps_reg
    retried = False
    stalled = False
    iterations = 0

    def residual_fn(v):
        return residual(prob, PrimalDual.from_vector(prob, v), al)

    while True:
        if norm < opts.tol_opt:
            status = SolveStatus.CONVERGED
            break
        if iterations >= opts.max_newton:
            status = SolveStatus.MAX_ITERATIONS
            break
        if _stalled(history):
            stalled = True
            status = SolveStatus.MAX_ITERATIONS
            logger.debug(f"Newton stalled at ||G||_1 {norm:.3e} after {iterations} iterations")
            break
        try:
            dy = _direction(sys, eps, opts)
        except SingularSystemError:
            logger.exception("Newton system could not be factorised")
            status = SolveStatus.SINGULAR_SYSTEM
            break
        try:
            alpha, vec, G = backtracking_search(residual_fn, vec, G, dy, opts)
        except LineSearchFailure as e:
            if not retried:
                retried = True
                eps = max(eps, opts.eps_reg, 1e-8) * RETRY_REG_FACTOR
                logger.warning(f"Line search failed at alpha {e.alpha:.2e}, retrying with eps_reg {eps:.1e}")
                continue
            logger.warning(f"Line search failed again at ||G||_1 {norm:.3e}, giving up")
            status = SolveStatus.LINE_SEARCH_FAILURE
            break
        if retried:
            # the extra regularization only applies to the step that needed it
            eps = opts.eps_reg
            retried = False
        new_norm = float(np.abs(G).sum())
        steps.append(StepRecord(alpha=alpha, merit_before=norm, merit_after=new_norm, beta=opts.beta))
        iterations += 1
        norm = new_norm
        history.append(norm)
        y = PrimalDual.from_vector(prob, vec)
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"newton {iterations}: alpha {alpha:.3e} ||G||_1 {norm:.3e}")
        if norm >= opts.tol_opt and iterations < opts.max_newton:
            sys = residual_jacobian(prob, y, al)
    return y, InnerResult(y=y, status=status, iterations=iterations, residual_norm=norm, residual_history=history,
                          steps=steps, stalled=stalled)


def dual_ascent(al, C_vals):
    """
    lambda <- max(0, lambda + rho C) on inequality rows and lambda + rho C on equality rows.
    """
    C_vals = np.asarray(C_vals, dtype=float)
    lam = al.lam + al.rho * C_vals
    lam[:al.n_ci] = np.maximum(lam[:al.n_ci], 0.0)
    return lam


def penalty_update(al):
    """
    rho <- min(gamma rho, rho_max).
    """
    return np.minimum(al.gamma * al.rho, al.rho_max)


def initial_rollout(prob):
    """
    Zero controls, the states they produce from x0 and zero dynamics multipliers.
    """
    y = PrimalDual.zeros(prob)
    y.X = rollout(prob.dynamics, prob.x0, y.joint_controls())
    return y


def _score(norm, violation, opts):
    return max(norm / opts.tol_opt, violation / opts.tol_feas)


def solve(prob, y0=None, opts=None, al0=None):
    """
    The augmented lagrangian outer loop: newton on the KKT residual, then dual ascent and a penalty increase, until
    ||G||_1 < tol_opt and the max violation <= tol_feas hold at the same iterate. If that never happens the best
    iterate seen is returned with status MaxIterations.
    :param prob: the game.
    :param y0: the initial guess, an initial rollout if not supplied.
    :param opts: the solver options.
    :param al0: initial multipliers and penalties, fresh ones if not supplied.
    :return: the solution, the multipliers and penalties it was measured with and the report.
    """
    opts = opts if opts is not None else SolverOptions()
    start = time.perf_counter()
    y = y0.copy() if y0 is not None else initial_rollout(prob)
    y.check(prob)
    al = al0.copy() if al0 is not None else ALState.initial(prob, opts.rho0, opts.gamma, opts.rho_max)
    report = SolveReport()
    best = None
    last_violation = None
    schedule = PenaltySchedule(opts.penalty_schedule)
    for outer in range(1, opts.max_outer + 1):
        y, inner = inner_newton(prob, al, y, opts)
        report.outer_iters = outer
        report.newton_iters += inner.iterations
        report.steps.extend(inner.steps)
        if report.residual_history:
            report.residual_history.extend(inner.residual_history[1:])
        else:
            report.residual_history.extend(inner.residual_history)
        report.stalled = inner.stalled
        U = y.joint_controls()
        C = prob.constraints.evaluate(y.X, U)
        violation = prob.constraints.violation(C, prob.S)
        report.violation_history.append(violation)
        report.rho_history.append(al.rho.copy())
        report.lambda_min_history.append(float(al.lam[:al.n_ci].min()) if al.n_ci else 0.0)
        score = _score(inner.residual_norm, violation, opts)
        if best is None or score < best[0]:
            best = (score, y.copy(), al.copy(), inner.residual_norm, violation)
        logger.info(f"outer {outer}: ||G||_1 {inner.residual_norm:.3e} violation {violation:.3e} "
                    f"newton {inner.iterations}")
        if inner.status in (SolveStatus.LINE_SEARCH_FAILURE, SolveStatus.SINGULAR_SYSTEM):
            report.status = inner.status
            report.failure_iterate = y.copy()
            break
        if inner.residual_norm < opts.tol_opt and violation <= opts.tol_feas:
            report.status = SolveStatus.CONVERGED
            break
        al.lam = dual_ascent(al, C)
        if schedule is PenaltySchedule.EVERY or last_violation is None or violation > STAGNATION_RATIO * last_violation:
            al.rho = penalty_update(al)
        last_violation = violation
    else:
        report.status = SolveStatus.MAX_ITERATIONS
    if report.status is not SolveStatus.CONVERGED:
        _, y, al, norm, violation = best
        report.residual_norm = norm
        report.max_violation = violation
        logger.warning(f"Solve finished with {report.status.value}, best ||G||_1 {norm:.3e} violation {violation:.3e}")
    else:
        report.residual_norm = inner.residual_norm
        report.max_violation = violation
    report.wall_time = time.perf_counter() - start
    return y, al, report
