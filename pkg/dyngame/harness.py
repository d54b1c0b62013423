import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from dyngame.handler import write_csv
from dyngame.kkt import ALState, PrimalDual, residual
from dyngame.model import cost_eval, rollout
from dyngame.scenarios import COLLISION, ScenarioError, ScenarioKind, ScenarioSpec, build_scenario, \
    penalty_sensitivity, standard_scenario, starts_collision_free
from dyngame.solver import SolveStatus, SolverOptions, solve

logger = logging.getLogger(__name__)

MAX_RESAMPLES = 100
NEWTON_EDGES = (8, 16, 32, 64, 128, 256, 512)
VIOLATION_EDGES = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
ENTANGLED_FACTOR = 10.0
NEWTON_TARGET = 16
PENALTY_RHOS = (1.0, 10.0, 100.0, 1000.0)


@dataclass(frozen=True)
class PerturbationSpec:
    """
    Uniform perturbations applied independently to each vehicle's initial state.
    """
    position_delta: float = 1.0
    velocity_frac: float = 0.03
    heading_delta: float = math.radians(2.5)
    rng_seed: int = 0

    def __post_init__(self):
        for name in ('position_delta', 'velocity_frac', 'heading_delta'):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non negative, was {getattr(self, name)}")
        if self.rng_seed < 0:
            raise ValueError(f"rng_seed must be non negative, was {self.rng_seed}")


def perturb_starts(spec, pert, rng):
    """
    Draws perturbed initial states, resampling when two vehicles would start in collision.
    :return: the starts and the number of rejected draws.
    """
    nominal = np.array([p.start for p in spec.players], dtype=float)
    for attempt in range(MAX_RESAMPLES):
        starts = nominal.copy()
        starts[:, :2] += rng.uniform(-pert.position_delta, pert.position_delta, size=(spec.M, 2))
        starts[:, 2] += rng.uniform(-pert.heading_delta, pert.heading_delta, size=spec.M)
        starts[:, 3] *= 1.0 + rng.uniform(-pert.velocity_frac, pert.velocity_frac, size=spec.M)
        if starts_collision_free(starts[:, :2], spec.radius) is None:
            return starts, attempt
        logger.warning(f"Perturbed start {attempt} puts two vehicles in collision, resampling")
    raise ScenarioError('players', f"no collision free perturbation found in {MAX_RESAMPLES} attempts")


@dataclass
class SampleRecord:
    index: int
    status: SolveStatus
    solve_time: float
    newton_iters: int
    outer_iters: int
    max_violation: float
    residual_norm: float
    stalled: bool
    resamples: int
    x0: np.ndarray
    solution: Optional[PrimalDual] = None

    @property
    def converged(self):
        return self.status is SolveStatus.CONVERGED

    def to_row(self):
        return [self.index, self.status.value, round(self.solve_time * 1000.0, 3), self.newton_iters,
                self.outer_iters, self.max_violation]


SAMPLE_HEADER = ['sample', 'status', 'time_ms', 'newton_iters', 'outer_iters', 'max_violation']


def _histogram(values, edges, fmt):
    labels = [f"<={fmt(e)}" for e in edges] + [f">{fmt(edges[-1])}"]
    counts = np.bincount(np.digitize(np.asarray(values, dtype=float), edges, right=True), minlength=len(labels))
    return {label: int(c) for label, c in zip(labels, counts)}


@dataclass
class BatchStats:
    scenario: str
    n_samples: int
    convergence_rate: float
    time_quantiles: Dict[str, float]
    newton_histogram: Dict[str, int]
    violation_histogram: Dict[str, int]
    failures: List[int]
    samples: List[SampleRecord] = field(default_factory=list)
    problem: object = None
    tol_feas: float = 1e-3

    @classmethod
    def from_samples(cls, scenario, samples, problem, opts):
        times_ms = np.array([s.solve_time for s in samples]) * 1000.0
        quantiles = {f"p{q}": float(np.percentile(times_ms, q)) for q in (50, 90, 96)}
        quantiles['mean'] = float(times_ms.mean())
        quantiles['max'] = float(times_ms.max())
        return cls(scenario=scenario, n_samples=len(samples),
                   convergence_rate=sum(s.converged for s in samples) / len(samples),
                   time_quantiles=quantiles,
                   newton_histogram=_histogram([s.newton_iters for s in samples], NEWTON_EDGES, str),
                   violation_histogram=_histogram([s.max_violation for s in samples], VIOLATION_EDGES,
                                                  lambda e: f"{e:.0e}"),
                   failures=[s.index for s in samples if not s.converged], samples=samples, problem=problem,
                   tol_feas=opts.tol_feas)

    @property
    def converged_samples(self):
        return [s for s in self.samples if s.converged]

    def fraction_within(self, newton_steps=NEWTON_TARGET):
        """
        :return: the fraction of converged samples that needed at most newton_steps newton steps.
        """
        converged = self.converged_samples
        if not converged:
            return 0.0
        return sum(s.newton_iters <= newton_steps for s in converged) / len(converged)

    def fraction_faster_than(self, seconds):
        return sum(s.solve_time < seconds for s in self.samples) / self.n_samples

    def to_summary(self):
        """
        :return: everything except timings, so it is identical across repeated runs with the same seed.
        """
        return {
            'scenario': self.scenario,
            'n_samples': self.n_samples,
            'converged': len(self.converged_samples),
            'convergence_rate': self.convergence_rate,
            'fraction_within_16_newton_steps': self.fraction_within(),
            'newton_histogram': self.newton_histogram,
            'violation_histogram': self.violation_histogram,
            'failures': list(self.failures),
            'failure_taxonomy': [{'sample': f.index, 'kind': f.kind.value} for f in failure_taxonomy(self)],
            'resamples': sum(s.resamples for s in self.samples),
        }

    def timing_summary(self):
        return {
            'time_ms': self.time_quantiles,
            'fraction_under_1s': self.fraction_faster_than(1.0),
            'fraction_under_200ms': self.fraction_faster_than(0.2),
        }


def monte_carlo(spec, pert, n_samples, opts=None, workers=1):
    """
    Solves the scenario from n_samples perturbed initial states. Sample i draws from a generator seeded with
    (pert.rng_seed, i) so running samples concurrently does not change the results.
    :param spec: the scenario.
    :param pert: the perturbation.
    :param n_samples: the number of samples.
    :param opts: the solver options.
    :param workers: the number of threads to solve with.
    :return: the BatchStats.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, was {n_samples}")
    opts = opts if opts is not None else SolverOptions()
    problem = build_scenario(spec)

    def run_sample(index):
        rng = np.random.default_rng([pert.rng_seed, index])
        starts, resamples = perturb_starts(spec, pert, rng)
        sample = problem.with_x0(starts.ravel())
        y, _, report = solve(sample, None, opts)
        if not report.converged:
            logger.info(f"Sample {index} finished with {report.status.value}")
        return SampleRecord(index=index, status=report.status, solve_time=report.wall_time,
                            newton_iters=report.newton_iters, outer_iters=report.outer_iters,
                            max_violation=report.max_violation, residual_norm=report.residual_norm,
                            stalled=report.stalled, resamples=resamples, x0=sample.x0, solution=y)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            samples = list(executor.map(run_sample, range(n_samples)))
    else:
        samples = [run_sample(i) for i in range(n_samples)]
    stats = BatchStats.from_samples(spec.name, samples, problem, opts)
    logger.info(f"Monte carlo on {spec.name}: {stats.convergence_rate:.1%} of {n_samples} converged")
    return stats


class FailureKind(Enum):
    ENTANGLED = 'EntangledTrajectories'
    STALLED = 'Stalled'
    LINE_SEARCH_FAILURE = 'LineSearchFailure'
    OTHER = 'Other'


@dataclass(frozen=True)
class FailureLabel:
    index: int
    kind: FailureKind


def failure_taxonomy(batch, solutions=None):
    """
    Labels each failed sample: entangled if two vehicles still overlap by more than 10x tol_feas at the final
    iterate, stalled if the iteration caps or the stall detector stopped it, a line search failure, or other.
    :param batch: the batch.
    :param solutions: optional final iterates by sample index, the ones stored on the samples otherwise.
    :return: the labels.
    """
    labels = []
    for sample in batch.samples:
        if sample.converged:
            continue
        solution = solutions.get(sample.index) if solutions else sample.solution
        kind = None
        if solution is not None and batch.problem is not None:
            collisions = batch.problem.constraints.family_values(solution.X, solution.joint_controls(), COLLISION)
            if collisions is not None and collisions.size and collisions.max() > ENTANGLED_FACTOR * batch.tol_feas:
                kind = FailureKind.ENTANGLED
        if kind is None:
            if sample.status is SolveStatus.LINE_SEARCH_FAILURE:
                kind = FailureKind.LINE_SEARCH_FAILURE
            elif sample.status is SolveStatus.MAX_ITERATIONS or sample.stalled:
                kind = FailureKind.STALLED
            else:
                kind = FailureKind.OTHER
        labels.append(FailureLabel(sample.index, kind))
    return labels


@dataclass(frozen=True)
class BenchRow:
    scenario: str
    M: int
    mean_ms: float
    std_ms: float
    failures: int
    median_ms: float
    newton_iters: Tuple[int, ...]

    def to_row(self):
        return [self.scenario, self.M, round(self.mean_ms, 3), round(self.std_ms, 3), self.failures]


BENCH_HEADER = ['scenario', 'M', 'mean_ms', 'std_ms', 'failures']


def _bench_cases(specs, player_counts):
    """
    :return: (name, scenario) for every row to time, a ScenarioSpec is cut down to each player count it can supply.
    """
    for entry in specs:
        if isinstance(entry, ScenarioSpec):
            for M in player_counts:
                if M > entry.M:
                    logger.warning(f"{entry.name} has {entry.M} players, skipping M={M}")
                    continue
                yield entry.name, entry.with_players(M)
        else:
            kind = ScenarioKind(entry)
            for M in player_counts:
                yield kind.value, standard_scenario(kind, M)


def timing_benchmark(specs, player_counts, repetitions, opts=None):
    """
    Times cold start solves of each scenario for each player count, after one untimed warm up solve. Problem
    construction is not timed and non converged repetitions are only counted.
    :param specs: scenario kinds, whose standard scenario is built for each player count, or ScenarioSpecs, which
    are timed as given with only their first M players kept.
    :param player_counts: the player counts.
    :param repetitions: timed solves per row, at least 2.
    :return: a BenchRow per (scenario, M).
    """
    if repetitions < 2:
        raise ValueError(f"repetitions must be at least 2, was {repetitions}")
    opts = opts if opts is not None else SolverOptions()
    rows = []
    for name, spec in _bench_cases(specs, player_counts):
        M = spec.M
        problem = build_scenario(spec)
        solve(problem, None, opts)
        times = []
        iterations = []
        failures = 0
        for _ in range(repetitions):
            started = time.perf_counter()
            _, _, report = solve(problem, None, opts)
            elapsed = (time.perf_counter() - started) * 1000.0
            iterations.append(report.newton_iters)
            if report.converged:
                times.append(elapsed)
            else:
                failures += 1
        times = np.array(times)
        row = BenchRow(scenario=name, M=M,
                       mean_ms=float(times.mean()) if times.size else float('nan'),
                       std_ms=float(times.std()) if times.size else float('nan'), failures=failures,
                       median_ms=float(np.median(times)) if times.size else float('nan'),
                       newton_iters=tuple(iterations))
        logger.info(f"{name} M={M}: {row.mean_ms:.1f} +/- {row.std_ms:.1f} ms, {failures} failures")
        rows.append(row)
    return rows


@dataclass
class PlayerNashReport:
    player: int
    tested: int
    discarded: int
    improving: int
    best_improvement: float
    kkt_residual: float

    @property
    def is_equilibrium(self):
        return self.improving == 0

    def to_dict(self):
        return {'player': self.player, 'tested': self.tested, 'discarded': self.discarded,
                'improving': self.improving, 'best_improvement': self.best_improvement,
                'kkt_residual': self.kkt_residual}


def nash_check(prob, solution, al=None, n_directions=100, step_sizes=(1e-3, 1e-2), epsilon=1e-6, tol_feas=1e-3,
               rng_seed=0):
    """
    Samples unilateral deviations of each player's controls, re-rolls the states with everyone else held fixed and
    counts the feasible deviations that lower the deviating player's cost by more than epsilon + h^2 for step h.
    A deviation is feasible when no constraint that is close to active (within tol_feas, or with a positive
    multiplier) gets worse and every other inequality stays below tol_feas.
    :param prob: the game.
    :param solution: the candidate equilibrium.
    :param al: the multipliers the solution was found with.
    :return: a PlayerNashReport per player.
    """
    rng = np.random.default_rng(rng_seed)
    dyn = prob.dynamics
    al = al if al is not None else ALState.initial(prob)
    U = solution.joint_controls()
    X_ref = rollout(dyn, prob.x0, U)
    C_ref = prob.constraints.evaluate(X_ref, U)
    inequality = np.arange(prob.n_c) < prob.n_ci
    near = (C_ref >= -tol_feas) | (al.lam > 0)
    G = residual(prob, solution, al)
    reports = []
    offset = 0
    for nu in range(prob.M):
        sl = dyn.player_slice(nu)
        size = prob.n_bar + prob.m_bar_per_player[nu]
        kkt = float(np.abs(G[offset:offset + size]).sum())
        offset += size
        cost = prob.costs[nu]
        J_ref = cost_eval(cost, X_ref, U[:, sl], prob.x0)
        directions = rng.standard_normal((n_directions, prob.S, dyn.m_per_player[nu]))
        directions /= np.linalg.norm(directions.reshape(n_directions, -1), axis=1)[:, None, None]
        tested = discarded = improving = 0
        best = 0.0
        for h in step_sizes:
            U_dev = np.broadcast_to(U, (n_directions,) + U.shape).copy()
            U_dev[..., sl] += h * directions
            X_dev = rollout(dyn, np.broadcast_to(prob.x0, (n_directions, prob.n)), U_dev)
            C_dev = prob.constraints.evaluate(X_dev, U_dev)
            ok = np.where(inequality, np.where(near, C_dev <= C_ref, C_dev <= tol_feas),
                          np.abs(C_dev) <= np.abs(C_ref))
            feasible = ok.all(axis=-1)
            gain = J_ref - cost_eval(cost, X_dev, U_dev[..., sl], prob.x0)
            tested += int(feasible.sum())
            discarded += int((~feasible).sum())
            improving += int(np.sum(feasible & (gain > epsilon + h * h)))
            if feasible.any():
                best = max(best, float(gain[feasible].max()))
        if improving:
            logger.warning(f"Player {nu} has {improving} improving deviations, best {best:.3e}")
        reports.append(PlayerNashReport(player=nu, tested=tested, discarded=discarded, improving=improving,
                                        best_improvement=best, kkt_residual=kkt))
    return reports


def write_samples_csv(path, batch):
    write_csv(path, SAMPLE_HEADER, [s.to_row() for s in batch.samples])


def write_bench_csv(path, rows):
    write_csv(path, BENCH_HEADER, [r.to_row() for r in rows])


def penalty_sweep(prob, solution, rhos=PENALTY_RHOS):
    """
    Scores a solution with the pure penalty objective of every player for each rho, the figure a penalty method
    would report for the same trajectories.
    :param prob: the game.
    :param solution: the PrimalDual to score.
    :param rhos: the penalty weights.
    :return: one row per rho, the rho then the objective of each player.
    """
    table = penalty_sensitivity(prob, solution.X, solution.U, rhos)
    return [[float(rho)] + [float(v) for v in values] for rho, values in zip(rhos, table)]


def write_penalty_csv(path, spec, rows):
    write_csv(path, ['rho'] + [p.name for p in spec.players], rows)
