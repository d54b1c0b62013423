import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import List

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from dyngame.model import DimensionError, cost_eval, cost_gradients, dynamics_defects, dynamics_jacobians, \
    join_controls

logger = logging.getLogger(__name__)

MAX_ESCALATIONS = 5
ESCALATION_FACTOR = 10.0
ESCALATION_SEED = 1e-8


class SingularSystemError(RuntimeError):
    """
    Raised when the newton system cannot be factorised even after escalating the regularisation.
    """

    def __init__(self, message, eps_reg):
        super().__init__(message)
        self.eps_reg = eps_reg


@dataclass
class PrimalDual:
    """
    The stacked unknowns, stored stage major: X is (S, n), U[v] is (S, m_v) and mu[v] is (S, n).
    """
    X: np.ndarray
    U: List[np.ndarray]
    mu: List[np.ndarray]

    @classmethod
    def zeros(cls, prob):
        return cls(X=np.zeros((prob.S, prob.n)),
                   U=[np.zeros((prob.S, m)) for m in prob.dynamics.m_per_player],
                   mu=[np.zeros((prob.S, prob.n)) for _ in range(prob.M)])

    @classmethod
    def from_vector(cls, prob, vec):
        """
        Inverse of flatten.
        """
        vec = np.asarray(vec, dtype=float)
        expected = prob.n_bar + prob.m_bar + prob.M * prob.n_bar
        if vec.shape != (expected,):
            raise DimensionError(f"vector has shape {vec.shape}, expected ({expected},)")
        S, n = prob.S, prob.n
        X = vec[:prob.n_bar].reshape(S, n).copy()
        offset = prob.n_bar
        U = []
        for m in prob.dynamics.m_per_player:
            U.append(vec[offset:offset + S * m].reshape(S, m).copy())
            offset += S * m
        mu = []
        for _ in range(prob.M):
            mu.append(vec[offset:offset + prob.n_bar].reshape(S, n).copy())
            offset += prob.n_bar
        return cls(X=X, U=U, mu=mu)

    def flatten(self):
        """
        :return: [X; U^1..U^M; mu^1..mu^M], each block time major.
        """
        return np.concatenate([self.X.ravel()] + [u.ravel() for u in self.U] + [m.ravel() for m in self.mu])

    def copy(self):
        return PrimalDual(X=self.X.copy(), U=[u.copy() for u in self.U], mu=[m.copy() for m in self.mu])

    def joint_controls(self):
        return join_controls(self.U)

    def check(self, prob):
        if self.X.shape != (prob.S, prob.n):
            raise DimensionError(f"X has shape {self.X.shape}, expected {(prob.S, prob.n)}")
        if len(self.U) != prob.M or len(self.mu) != prob.M:
            raise DimensionError(f"expected {prob.M} control and multiplier blocks")
        for nu, m in enumerate(prob.dynamics.m_per_player):
            if self.U[nu].shape != (prob.S, m):
                raise DimensionError(f"U[{nu}] has shape {self.U[nu].shape}, expected {(prob.S, m)}")
            if self.mu[nu].shape != (prob.S, prob.n):
                raise DimensionError(f"mu[{nu}] has shape {self.mu[nu].shape}, expected {(prob.S, prob.n)}")


@dataclass
class ALState:
    """
    The shared constraint multipliers and penalties, the first n_ci entries belong to inequalities.
    """
    lam: np.ndarray
    rho: np.ndarray
    n_ci: int
    gamma: float = 10.0
    rho_max: float = 1e8

    def __post_init__(self):
        self.lam = np.array(self.lam, dtype=float)
        self.rho = np.array(self.rho, dtype=float)
        if self.lam.shape != self.rho.shape:
            raise DimensionError(f"lambda {self.lam.shape} and rho {self.rho.shape} differ")
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must exceed 1, was {self.gamma}")
        if np.any(self.rho <= 0):
            raise ValueError("penalties must be positive")

    @classmethod
    def initial(cls, prob, rho0=1.0, gamma=10.0, rho_max=1e8):
        return cls(lam=np.zeros(prob.n_c), rho=np.full(prob.n_c, float(rho0)), n_ci=prob.n_ci, gamma=gamma,
                   rho_max=rho_max)

    def copy(self):
        return ALState(lam=self.lam.copy(), rho=self.rho.copy(), n_ci=self.n_ci, gamma=self.gamma,
                       rho_max=self.rho_max)


def penalty_weights(C_vals, al):
    """
    The diagonal of I_rho: an inequality row is switched off when it is satisfied and its multiplier is zero.
    """
    C_vals = np.asarray(C_vals, dtype=float)
    if C_vals.shape != al.rho.shape:
        raise DimensionError(f"C has shape {C_vals.shape}, penalties have {al.rho.shape}")
    inequality = np.arange(C_vals.shape[0]) < al.n_ci
    inactive = inequality & (C_vals < 0.0) & (al.lam == 0.0)
    return np.where(inactive, 0.0, al.rho)


class _Evaluation:
    """
    Everything the residual and its jacobian need at one iterate.
    """

    def __init__(self, prob, y, al, jacobian):
        y.check(prob)
        self.prob = prob
        dyn = prob.dynamics
        self.U = y.joint_controls()
        self.D = dynamics_defects(prob, y.X, self.U)
        prev = np.vstack([prob.x0[None, :], y.X[:-1]])
        self.A, self.B = dynamics_jacobians(dyn, prev, self.U)
        S, n, m = prob.S, prob.n, prob.m
        self.cx = np.zeros((S, n))
        self.cu = np.zeros((S, m))
        if jacobian:
            self.cxx = np.zeros((S, n, n))
            self.cxu = np.zeros((S, n, m))
            self.cuu = np.zeros((S, m, m))
        families = prob.constraints.evaluate_families(y.X, self.U, jacobians=True)
        self.C = np.zeros(prob.n_c)
        for e in families:
            self.C[e.index] = e.values
        self.I_rho = penalty_weights(self.C, al)
        w = al.lam + self.I_rho * self.C
        for e in families:
            we = w[e.index]
            self.cx[e.steps] += np.einsum('lrn,lr->ln', e.jx, we)
            self.cu[e.steps] += np.einsum('lrm,lr->lm', e.ju, we)
            if jacobian:
                pe = self.I_rho[e.index]
                self.cxx[e.steps] += np.einsum('lri,lr,lrj->lij', e.jx, pe, e.jx)
                self.cxu[e.steps] += np.einsum('lri,lr,lrj->lij', e.jx, pe, e.ju)
                self.cuu[e.steps] += np.einsum('lri,lr,lrj->lij', e.ju, pe, e.ju)
        self.gx = []
        self.gu = []
        for nu in range(prob.M):
            sl = dyn.player_slice(nu)
            cgx, cgu = cost_gradients(prob.costs[nu], y.X, y.U[nu])
            mu = y.mu[nu]
            gx = cgx + mu + self.cx
            gx[:-1] -= np.einsum('tji,tj->ti', self.A[1:], mu[1:])
            gu = cgu + self.cu[:, sl] - np.einsum('tji,tj->ti', self.B[:, :, sl], mu)
            self.gx.append(gx)
            self.gu.append(gu)

    def residual(self):
        parts = []
        for gx, gu in zip(self.gx, self.gu):
            parts.append(gx.ravel())
            parts.append(gu.ravel())
        parts.append(self.D.ravel())
        return np.concatenate(parts)


def al_objective(prob, y, al, nu):
    """
    L^v = J^v + mu^v'D + lambda'C + 1/2 C'I_rho C.
    """
    if not 0 <= nu < prob.M:
        raise IndexError(f"player {nu} does not exist in a {prob.M} player game")
    y.check(prob)
    U = y.joint_controls()
    D = dynamics_defects(prob, y.X, U)
    C = prob.constraints.evaluate(y.X, U)
    value = cost_eval(prob.costs[nu], y.X, y.U[nu], prob.x0)
    value += float(np.sum(y.mu[nu] * D))
    value += float(al.lam @ C) + 0.5 * float(C @ (penalty_weights(C, al) * C))
    return value


def player_gradient(prob, y, al, nu):
    """
    The gradient of L^v with respect to X and U^v only, flattened as [X; U^v].
    """
    if not 0 <= nu < prob.M:
        raise IndexError(f"player {nu} does not exist in a {prob.M} player game")
    ev = _Evaluation(prob, y, al, jacobian=False)
    return np.concatenate([ev.gx[nu].ravel(), ev.gu[nu].ravel()])


def residual(prob, y, al):
    """
    G = [G^1; ...; G^M; D] where G^v = [dL^v/dX; dL^v/dU^v].
    """
    return _Evaluation(prob, y, al, jacobian=False).residual()


@lru_cache(maxsize=32)
def _stage_layout(n, m_per_player, S):
    """
    Maps the stage ordering, variables [x_t, u_t, mu^1_t..mu^M_t] and equations [Gx^1_t..Gx^M_t, Gu^1_t..Gu^M_t,
    D_t], onto the canonical PrimalDual / residual ordering.
    """
    M = len(m_per_player)
    m = sum(m_per_player)
    offsets = np.concatenate([[0], np.cumsum(m_per_player)[:-1]]).astype(int)
    s = n + m + M * n
    n_bar = n * S
    m_bar = m * S
    var = np.empty(S * s, dtype=int)
    eq = np.empty(S * s, dtype=int)
    for t in range(S):
        b = t * s
        var[b:b + n] = t * n + np.arange(n)
        for nu, (uo, mn) in enumerate(zip(offsets, m_per_player)):
            var[b + n + uo:b + n + uo + mn] = n_bar + S * uo + t * mn + np.arange(mn)
            var[b + n + m + nu * n:b + n + m + (nu + 1) * n] = n_bar + m_bar + nu * n_bar + t * n + np.arange(n)
            go = nu * n_bar + S * uo
            eq[b + nu * n:b + (nu + 1) * n] = go + t * n + np.arange(n)
            eq[b + M * n + uo:b + M * n + uo + mn] = go + n_bar + t * mn + np.arange(mn)
        eq[b + M * n + m:b + s] = M * n_bar + m_bar + t * n + np.arange(n)
    var.setflags(write=False)
    eq.setflags(write=False)
    return s, var, eq


class KKTSystem:
    """
    The residual G and its jacobian H. When assembled from a game H is held as stage blocks (diagonal, upper coupling
    equations of stage t to variables of stage t+1, lower coupling stage t to t-1) and the dense canonical matrix is
    only built on demand.
    """

    def __init__(self, G, diagonal=None, upper=None, lower=None, regularization=None, var_perm=None, eq_perm=None,
                 dense=None):
        self.G = np.asarray(G, dtype=float)
        self.diagonal = diagonal
        self.upper = upper
        self.lower = lower
        self.regularization = regularization
        self.var_perm = var_perm
        self.eq_perm = eq_perm
        self.__dense = None if dense is None else np.asarray(dense, dtype=float)
        self.__reg = None
        if self.__dense is not None and self.__dense.shape != (self.G.size, self.G.size):
            raise DimensionError(f"H has shape {self.__dense.shape}, G has {self.G.size} entries")

    @classmethod
    def from_dense(cls, H, G):
        return cls(G, dense=H)

    @property
    def structured(self):
        return self.diagonal is not None

    @property
    def stages(self):
        return 0 if self.diagonal is None else self.diagonal.shape[0]

    @property
    def stage_size(self):
        return 0 if self.diagonal is None else self.diagonal.shape[1]

    @property
    def block_index(self):
        """
        :return: the (equation stage, variable stage) pairs holding structural nonzeros.
        """
        S = self.stages
        pairs = [(t, t) for t in range(S)]
        pairs += [(t, t + 1) for t in range(S - 1)]
        pairs += [(t + 1, t) for t in range(S - 1)]
        return sorted(pairs)

    def stage_matrix(self):
        """
        :return: H in stage ordering, a block tridiagonal matrix.
        """
        S, s = self.stages, self.stage_size
        Hs = np.zeros((S * s, S * s))
        for t in range(S):
            Hs[t * s:(t + 1) * s, t * s:(t + 1) * s] = self.diagonal[t]
            if t < S - 1:
                Hs[t * s:(t + 1) * s, (t + 1) * s:(t + 2) * s] = self.upper[t]
                Hs[(t + 1) * s:(t + 2) * s, t * s:(t + 1) * s] = self.lower[t]
        return Hs

    def _to_canonical(self, stage_matrix):
        H = np.zeros_like(stage_matrix)
        H[np.ix_(self.eq_perm, self.var_perm)] = stage_matrix
        return H

    @property
    def H(self):
        if self.__dense is None:
            self.__dense = self._to_canonical(self.stage_matrix())
        return self.__dense

    @property
    def reg(self):
        """
        :return: the regularisation pattern in canonical order, identity for systems supplied densely.
        """
        if self.__reg is None:
            if self.structured:
                S = self.stages
                self.__reg = self._to_canonical(np.kron(np.eye(S), self.regularization))
            else:
                self.__reg = np.eye(self.G.size)
        return self.__reg

    @property
    def row_stage(self):
        stage = np.empty(self.G.size, dtype=int)
        stage[self.eq_perm] = np.repeat(np.arange(self.stages), self.stage_size)
        return stage

    @property
    def col_stage(self):
        stage = np.empty(self.G.size, dtype=int)
        stage[self.var_perm] = np.repeat(np.arange(self.stages), self.stage_size)
        return stage


def _regularization_pattern(n, m_per_player, M):
    """
    +1 on the (Gx^v, x) and (Gu^v, u^v) blocks, -1 on the (D, mu^v) blocks.
    """
    m = sum(m_per_player)
    s = n + m + M * n
    pattern = np.zeros((s, s))
    offsets = np.concatenate([[0], np.cumsum(m_per_player)[:-1]]).astype(int)
    for nu, (uo, mn) in enumerate(zip(offsets, m_per_player)):
        pattern[nu * n:(nu + 1) * n, 0:n] = np.eye(n)
        pattern[M * n + uo:M * n + uo + mn, n + uo:n + uo + mn] = np.eye(mn)
        pattern[M * n + m:, n + m + nu * n:n + m + (nu + 1) * n] = -np.eye(n)
    return pattern


def residual_jacobian(prob, y, al):
    """
    Assembles G and the quasi-newton H: cost hessians are exact, second derivatives of the constraints and the
    dynamics are dropped and the penalty contributes J'I_rho J.
    """
    ev = _Evaluation(prob, y, al, jacobian=True)
    dyn = prob.dynamics
    S, n, m, M = prob.S, prob.n, prob.m, prob.M
    s, var_perm, eq_perm = _stage_layout(n, dyn.m_per_player, S)
    eye = np.eye(n)
    diagonal = np.zeros((S, s, s))
    upper = np.zeros((max(S - 1, 0), s, s))
    lower = np.zeros((max(S - 1, 0), s, s))
    mu0 = n + m
    for nu in range(M):
        cost = prob.costs[nu]
        uo = dyn.control_offsets[nu]
        mn = dyn.m_per_player[nu]
        gx_rows = slice(nu * n, (nu + 1) * n)
        gu_rows = slice(M * n + uo, M * n + uo + mn)
        mu_cols = slice(mu0 + nu * n, mu0 + (nu + 1) * n)
        hx = np.broadcast_to(cost.Q, (S, n, n)).copy()
        hx[-1] = cost.Qf
        diagonal[:, gx_rows, 0:n] = hx + ev.cxx
        diagonal[:, gx_rows, n:n + m] = ev.cxu
        diagonal[:, gx_rows, mu_cols] = eye
        diagonal[:, gu_rows, 0:n] = np.swapaxes(ev.cxu[:, :, uo:uo + mn], 1, 2)
        diagonal[:, gu_rows, n:n + m] = ev.cuu[:, uo:uo + mn, :]
        diagonal[:, gu_rows, n + uo:n + uo + mn] += cost.R
        diagonal[:, gu_rows, mu_cols] = -np.swapaxes(ev.B[:, :, uo:uo + mn], 1, 2)
        if S > 1:
            upper[:, gx_rows, mu_cols] = -np.swapaxes(ev.A[1:], 1, 2)
    d_rows = slice(M * n + m, s)
    diagonal[:, d_rows, 0:n] = eye
    diagonal[:, d_rows, n:n + m] = -ev.B
    if S > 1:
        lower[:, d_rows, 0:n] = -ev.A[1:]
    return KKTSystem(ev.residual(), diagonal=diagonal, upper=upper, lower=lower,
                     regularization=_regularization_pattern(n, dyn.m_per_player, M), var_perm=var_perm,
                     eq_perm=eq_perm)


def _factor(matrix):
    """
    :return: the LU factorisation or None if the matrix is numerically singular.
    """
    if not np.all(np.isfinite(matrix)):
        return None
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', LinAlgWarning)
        lu, piv = lu_factor(matrix, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if not np.all(np.isfinite(pivots)):
        return None
    if pivots.min() <= np.finfo(float).eps * max(pivots.max(), 1.0) * matrix.shape[0]:
        return None
    return lu, piv


def newton_step(sys, eps_reg=1e-6):
    """
    Solves (H + eps_reg I_reg) dy = -G with a dense factorisation, escalating eps_reg by 10x up to 5 times when the
    matrix is singular.
    :param sys: the system.
    :param eps_reg: the regularisation.
    :return: dy in canonical order.
    """
    if not np.isfinite(eps_reg) or eps_reg < 0:
        raise ValueError(f"eps_reg must be finite and non negative, was {eps_reg}")
    H = sys.H
    rhs = -sys.G
    eps = float(eps_reg)
    for attempt in range(MAX_ESCALATIONS + 1):
        factors = _factor(H + eps * sys.reg if eps > 0 else H)
        if factors is not None:
            dy = lu_solve(factors, rhs, check_finite=False)
            if np.all(np.isfinite(dy)):
                return dy
        if attempt < MAX_ESCALATIONS:
            eps = eps * ESCALATION_FACTOR if eps > 0 else ESCALATION_SEED
            logger.warning(f"KKT matrix is singular, escalating regularisation to {eps:.1e}")
    raise SingularSystemError(f"KKT matrix is singular at regularisation {eps:.1e}", eps)


def structured_solve(sys, eps_reg=0.0):
    """
    Solves the same system as newton_step by eliminating the stage blocks backwards in time (a Riccati like sweep)
    then substituting forwards, so the cost is linear in the horizon. Falls back to the dense path if a stage pivot
    is singular.
    """
    if not sys.structured:
        logger.warning("System has no stage structure, using the dense solve")
        return newton_step(sys, eps_reg)
    S, s = sys.stages, sys.stage_size
    rhs = -sys.G[sys.eq_perm].reshape(S, s)
    diagonal = sys.diagonal + eps_reg * sys.regularization if eps_reg > 0 else sys.diagonal
    factors = [None] * S
    reduced = np.empty((S, s))
    for t in range(S - 1, -1, -1):
        if t == S - 1:
            pivot = diagonal[t]
            r = rhs[t]
        else:
            coupling = lu_solve(factors[t + 1], sys.lower[t], check_finite=False)
            pivot = diagonal[t] - sys.upper[t] @ coupling
            r = rhs[t] - sys.upper[t] @ lu_solve(factors[t + 1], reduced[t + 1], check_finite=False)
        factors[t] = _factor(pivot)
        if factors[t] is None:
            logger.warning(f"Stage {t} pivot is singular, falling back to the dense solve")
            return newton_step(sys, eps_reg)
        reduced[t] = r
    v = np.empty((S, s))
    v[0] = lu_solve(factors[0], reduced[0], check_finite=False)
    for t in range(1, S):
        v[t] = lu_solve(factors[t], reduced[t] - sys.lower[t - 1] @ v[t - 1], check_finite=False)
    dy = np.empty(S * s)
    dy[sys.var_perm] = v.ravel()
    return dy
