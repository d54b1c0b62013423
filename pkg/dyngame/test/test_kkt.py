import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyngame.kkt import ALState, KKTSystem, PrimalDual, SingularSystemError, al_objective, newton_step, \
    penalty_weights, player_gradient, residual, residual_jacobian, structured_solve
from dyngame.model import GameProblem, PlayerCost, cost_eval, dynamics_defects, linear_dynamics, rollout
from dyngame.solver import initial_rollout
from dyngame.test.games import active_al_state, central_difference, central_jacobian, linearly_constrained_game, \
    lq_nash_oracle, random_iterate, random_lq_game, relative_error, riccati_lqr, unicycle_game


def al_state(lam, rho, n_ci):
    return ALState(lam=np.array(lam, dtype=float), rho=np.array(rho, dtype=float), n_ci=n_ci)


def test_inactive_inequality_has_no_penalty():
    assert penalty_weights([-0.5], al_state([0.0], [1.0], 1))[0] == 0.0


def test_violated_inequality_is_penalised():
    assert penalty_weights([0.2], al_state([0.0], [10.0], 1))[0] == 10.0


def test_active_multiplier_keeps_penalty():
    assert penalty_weights([-0.5], al_state([0.3], [10.0], 1))[0] == 10.0


def test_equalities_are_always_penalised():
    weights = penalty_weights([-0.5, -0.5], al_state([0.0, 0.0], [3.0, 4.0], 1))
    assert list(weights) == [0.0, 4.0]


@given(values=st.lists(st.tuples(st.floats(-10, 10), st.floats(0, 5), st.floats(0.1, 100)), min_size=1,
                       max_size=20), n_ci=st.integers(0, 20))
def test_penalty_weights_are_zero_or_rho(values, n_ci):
    C = [v[0] for v in values]
    al = al_state([v[1] for v in values], [v[2] for v in values], min(n_ci, len(values)))
    weights = penalty_weights(C, al)
    assert all(w == 0.0 or w == r for w, r in zip(weights, al.rho))


def test_objective_is_the_cost_without_constraints():
    rng = np.random.default_rng(0)
    prob = random_lq_game(rng, M=2, N=6)
    y = initial_rollout(prob)
    y.U = [rng.standard_normal(u.shape) for u in y.U]
    y.X = rollout(prob.dynamics, prob.x0, y.joint_controls())
    al = ALState.initial(prob)
    for nu in range(prob.M):
        assert al_objective(prob, y, al, nu) == pytest.approx(cost_eval(prob.costs[nu], y.X, y.U[nu], prob.x0),
                                                              rel=1e-14)


def test_objective_matches_term_by_term_sum():
    rng = np.random.default_rng(1)
    prob = unicycle_game(rng, M=3, N=6)
    y = random_iterate(rng, prob)
    al = active_al_state(rng, prob)
    U = y.joint_controls()
    C = prob.constraints.evaluate(y.X, U)
    D = dynamics_defects(prob, y.X, U)
    for nu in range(prob.M):
        expected = cost_eval(prob.costs[nu], y.X, y.U[nu], prob.x0)
        expected += sum(y.mu[nu][t] @ D[t] for t in range(prob.S))
        expected += sum(al.lam[k] * C[k] + 0.5 * penalty_weights(C, al)[k] * C[k] ** 2 for k in range(prob.n_c))
        assert al_objective(prob, y, al, nu) == pytest.approx(expected, rel=1e-12)


def test_objective_rejects_unknown_player():
    rng = np.random.default_rng(2)
    prob = random_lq_game(rng, M=2)
    y = initial_rollout(prob)
    with pytest.raises(IndexError):
        al_objective(prob, y, ALState.initial(prob), 2)
    with pytest.raises(IndexError):
        player_gradient(prob, y, ALState.initial(prob), -1)


def player_objective(prob, y, al, nu):
    """
    L^v as a function of the flat [X; U^v] with everything else held at y.
    """
    n_x = prob.n_bar

    def fn(v):
        trial = y.copy()
        trial.X = v[:n_x].reshape(prob.S, prob.n)
        trial.U[nu] = v[n_x:].reshape(prob.S, -1)
        return al_objective(prob, trial, al, nu)

    return fn, np.concatenate([y.X.ravel(), y.U[nu].ravel()])


def test_player_gradient_matches_finite_differences():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        M = 1 + seed % 3
        prob = unicycle_game(rng, M=M, N=3 + seed % 8)
        y = random_iterate(rng, prob)
        al = active_al_state(rng, prob)
        nu = seed % M
        fn, z = player_objective(prob, y, al, nu)
        assert relative_error(player_gradient(prob, y, al, nu), central_difference(fn, z)) < 1e-5, seed


def test_gradient_vanishes_at_the_lqr_optimum():
    rng = np.random.default_rng(3)
    n, m, S = 4, 2, 8
    A = np.eye(n) + 0.1 * rng.standard_normal((n, n))
    B = 0.5 * rng.standard_normal((n, m))
    L = rng.standard_normal((n, n))
    Q = L @ L.T / n
    Q = 0.5 * (Q + Q.T)
    cost = PlayerCost(Q=Q, R=np.eye(m), Qf=Q + np.eye(n), x_f=np.zeros(n))
    prob = GameProblem(dynamics=linear_dynamics(A, [B]), costs=[cost], x0=rng.standard_normal(n), N=S + 1)
    al = ALState.initial(prob)
    y = initial_rollout(prob)
    sys = residual_jacobian(prob, y, al)
    y = PrimalDual.from_vector(prob, y.flatten() + newton_step(sys, 0.0))
    assert np.abs(player_gradient(prob, y, al, 0)).max() < 1e-9
    assert np.allclose(y.U[0], riccati_lqr(A, B, cost.Q, cost.R, cost.Qf, prob.x0, S), rtol=0.0, atol=1e-8)


def test_residual_is_linear_in_multipliers():
    rng = np.random.default_rng(4)
    prob = unicycle_game(rng, M=2, N=6)
    y = random_iterate(rng, prob)
    al = active_al_state(rng, prob)
    a = [rng.standard_normal(mu.shape) for mu in y.mu]
    b = [rng.standard_normal(mu.shape) for mu in y.mu]

    def with_mu(mu):
        trial = y.copy()
        trial.mu = mu
        return residual(prob, trial, al)

    zero = [np.zeros_like(mu) for mu in y.mu]
    lhs = with_mu(a) + with_mu(b) - with_mu(zero)
    rhs = with_mu([p + q for p, q in zip(a, b)])
    assert np.allclose(lhs, rhs, rtol=0.0, atol=1e-12 * max(1.0, np.abs(rhs).max()))


def test_residual_length():
    rng = np.random.default_rng(5)
    prob = unicycle_game(rng, M=3, N=5)
    G = residual(prob, random_iterate(rng, prob), active_al_state(rng, prob))
    assert G.shape == (prob.M * prob.n_bar + prob.m_bar + prob.n_bar,)


@pytest.mark.parametrize('M', [2, 3])
@pytest.mark.parametrize('N', [5, 10])
def test_one_newton_step_solves_an_lq_game(M, N):
    rng = np.random.default_rng(10 * M + N)
    prob = random_lq_game(rng, M=M, N=N)
    al = ALState.initial(prob)
    y = random_iterate(rng, prob, noise=1.0)
    sys = residual_jacobian(prob, y, al)
    y = PrimalDual.from_vector(prob, y.flatten() + newton_step(sys, 0.0))
    assert np.abs(residual(prob, y, al)).sum() <= 1e-8
    assert np.allclose(y.joint_controls(), lq_nash_oracle(prob), rtol=0.0, atol=1e-6)


def test_quasi_newton_matrix_is_exact_for_linear_problems():
    rng = np.random.default_rng(6)
    prob = linearly_constrained_game(rng, M=2, N=5)
    y = random_iterate(rng, prob)
    al = active_al_state(rng, prob)
    sys = residual_jacobian(prob, y, al)
    fd = central_jacobian(lambda v: residual(prob, PrimalDual.from_vector(prob, v), al), y.flatten())
    assert relative_error(sys.H, fd) < 1e-6
    assert np.array_equal(sys.G, residual(prob, y, al))


def test_lq_matrix_is_constant():
    rng = np.random.default_rng(7)
    prob = random_lq_game(rng, M=3, N=6)
    al = ALState.initial(prob)
    first = residual_jacobian(prob, random_iterate(rng, prob), al).H
    second = residual_jacobian(prob, random_iterate(rng, prob), al).H
    assert np.array_equal(first, second)


def test_stages_further_than_one_apart_are_not_coupled():
    rng = np.random.default_rng(8)
    prob = unicycle_game(rng, M=3, N=8)
    sys = residual_jacobian(prob, random_iterate(rng, prob), active_al_state(rng, prob))
    far = np.abs(sys.row_stage[:, None] - sys.col_stage[None, :]) > 1
    assert np.count_nonzero(sys.H[far]) == 0
    covered = np.zeros_like(far)
    for r, c in sys.block_index:
        covered |= (sys.row_stage[:, None] == r) & (sys.col_stage[None, :] == c)
    assert np.count_nonzero(sys.H[~covered]) == 0


def test_identity_system():
    g = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(newton_step(KKTSystem.from_dense(np.eye(3), g), 0.0), -g)


def test_singular_system_is_regularised():
    H = np.array([[1.0, 2.0], [1.0, 2.0]])
    dy = newton_step(KKTSystem.from_dense(H, np.array([1.0, 1.0])), 1e-6)
    assert np.all(np.isfinite(dy))
    dy = newton_step(KKTSystem.from_dense(np.zeros((2, 2)), np.array([1.0, 1.0])), 0.0)
    assert np.all(np.isfinite(dy))


def test_unfactorisable_system_raises():
    H = np.full((2, 2), np.nan)
    with pytest.raises(SingularSystemError):
        newton_step(KKTSystem.from_dense(H, np.ones(2)), 1e-6)
    with pytest.raises(ValueError):
        newton_step(KKTSystem.from_dense(np.eye(2), np.ones(2)), -1.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), M=st.integers(1, 4), N=st.integers(2, 20))
def test_structured_solve_matches_dense(seed, M, N):
    rng = np.random.default_rng(seed)
    prob = linearly_constrained_game(rng, M=M, N=N) if N > 2 else random_lq_game(rng, M=M, N=N)
    sys = residual_jacobian(prob, random_iterate(rng, prob), active_al_state(rng, prob))
    dense = newton_step(sys, 1e-6)
    structured = structured_solve(sys, 1e-6)
    assert np.abs(structured - dense).max() <= 1e-8 * (1.0 + np.abs(dense).max())


def test_structured_solve_matches_dense_on_unicycles():
    rng = np.random.default_rng(9)
    prob = unicycle_game(rng, M=3, N=12)
    sys = residual_jacobian(prob, random_iterate(rng, prob), active_al_state(rng, prob))
    dense = newton_step(sys, 1e-6)
    assert np.abs(structured_solve(sys, 1e-6) - dense).max() <= 1e-8 * (1.0 + np.abs(dense).max())


def test_single_stage_structured_solve():
    rng = np.random.default_rng(10)
    prob = random_lq_game(rng, M=2, N=2)
    sys = residual_jacobian(prob, random_iterate(rng, prob), ALState.initial(prob))
    assert sys.stages == 1
    dense = newton_step(sys, 0.0)
    assert np.abs(structured_solve(sys, 0.0) - dense).max() <= 1e-10 * (1.0 + np.abs(dense).max())


def test_dense_system_is_solved_densely():
    rng = np.random.default_rng(12)
    H = rng.standard_normal((5, 5)) + 5.0 * np.eye(5)
    G = rng.standard_normal(5)
    sys = KKTSystem.from_dense(H, G)
    assert not sys.structured
    assert np.allclose(structured_solve(sys, 1e-6), newton_step(sys, 1e-6), rtol=0.0, atol=1e-12)


def test_singular_stage_pivot_falls_back_to_the_dense_solve():
    sys = KKTSystem(np.array([1.0, 2.0]), diagonal=np.array([[[1.0]], [[0.0]]]), upper=np.array([[[1.0]]]),
                    lower=np.array([[[1.0]]]), regularization=np.eye(1), var_perm=np.arange(2),
                    eq_perm=np.arange(2))
    assert np.array_equal(sys.H, [[1.0, 1.0], [1.0, 0.0]])
    dy = structured_solve(sys, 0.0)
    assert np.allclose(dy, np.linalg.solve(sys.H, -sys.G))
    assert np.allclose(dy, newton_step(sys, 0.0))


def best_time(fn, repetitions=5):
    times = []
    for _ in range(repetitions):
        started = time.perf_counter()
        fn()
        times.append(time.perf_counter() - started)
    return min(times)


@pytest.mark.slow
def test_structured_solve_scales_linearly():
    rng = np.random.default_rng(11)
    short = unicycle_game(rng, M=3, N=40)
    rng = np.random.default_rng(11)
    long = unicycle_game(rng, M=3, N=79)
    short_sys = residual_jacobian(short, random_iterate(rng, short), active_al_state(rng, short))
    long_sys = residual_jacobian(long, random_iterate(rng, long), active_al_state(rng, long))
    structured_solve(short_sys, 1e-6)
    ratio = best_time(lambda: structured_solve(long_sys, 1e-6)) / best_time(lambda: structured_solve(short_sys, 1e-6))
    assert ratio <= 2.5
