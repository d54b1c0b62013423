import logging
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from dyngame.handler import Discard
from dyngame.kkt import PrimalDual
from dyngame.model import rollout
from dyngame.plant import GaussianNoise, Plant
from dyngame.scenarios import STATE_SIZE, ScenarioError, build_scenario, lateral_offset, pairwise_collision_values
from dyngame.solver import SolveStatus, SolverOptions, solve

logger = logging.getLogger(__name__)

APPLIED = (SolveStatus.CONVERGED, SolveStatus.MAX_ITERATIONS)


@dataclass(frozen=True)
class MpcConfig:
    """
    carry_multipliers keeps lambda and rho from one update to the next, shifted with the plan, instead of starting
    every solve from lambda = 0 and rho = rho0.
    """
    sim_duration: float = 3.0
    horizon_steps: int = 40
    horizon_seconds: float = 3.0
    noise_scale: Tuple[float, ...] = (0.01, 0.01, 0.005, 0.01)
    warm_start: bool = True
    rng_seed: int = 0
    bounding_box: float = 500.0
    carry_multipliers: bool = False
    keep_plans: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'noise_scale', tuple(float(s) for s in self.noise_scale))
        if not self.sim_duration > 0:
            raise ValueError(f"sim_duration must be positive, was {self.sim_duration}")
        if self.horizon_steps < 2 or not self.horizon_seconds > 0:
            raise ValueError(f"invalid horizon {self.horizon_steps} steps / {self.horizon_seconds}s")
        if any(s < 0 for s in self.noise_scale):
            raise ValueError(f"noise_scale must be non negative, was {self.noise_scale}")
        if not self.bounding_box > 0:
            raise ValueError(f"bounding_box must be positive, was {self.bounding_box}")


@dataclass
class MpcUpdate:
    index: int
    time: float
    status: SolveStatus
    newton_iters: int
    outer_iters: int
    duration: float
    fallback: bool
    max_violation: float

    def to_row(self):
        return {
            'update': self.index,
            't': self.time,
            'status': self.status.value,
            'newton_iters': self.newton_iters,
            'outer_iters': self.outer_iters,
            'solve_ms': self.duration * 1000.0,
            'fallback': self.fallback,
            'max_violation': self.max_violation,
        }


@dataclass
class MpcTrace:
    """
    The closed loop record, states[k] is the state at times[k] and controls[k] was applied from times[k].
    """
    M: int
    dt: float
    sim_duration: float
    radius: float
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    updates: List[MpcUpdate] = field(default_factory=list)
    plans: Optional[List[np.ndarray]] = None
    diverged: bool = False
    ego: int = 0
    lane: Optional[np.ndarray] = None

    @property
    def update_durations(self):
        return [u.duration for u in self.updates]

    @property
    def update_count(self):
        return len(self.updates)

    @property
    def mean_frequency(self):
        """ updates per simulated second. """
        return self.update_count / self.sim_duration

    @property
    def wall_frequency(self):
        total = sum(self.update_durations)
        return self.update_count / total if total > 0 else float('inf')

    @property
    def failures(self):
        return [u for u in self.updates if u.fallback]

    @property
    def ego_speed(self):
        return self.states[:, STATE_SIZE * self.ego + 3]

    @property
    def ego_lateral_offset(self):
        """
        :return: the signed distance of the ego from its lane centerline, positive to the left.
        """
        return lateral_offset(self.states[:, STATE_SIZE * self.ego:STATE_SIZE * self.ego + 2], self.lane)

    def collision_values(self):
        return pairwise_collision_values(self.states, self.M, self.radius)


def _shift(arr):
    return np.vstack([arr[1:], arr[-1:]])


def warm_start_shift(prev, prob_next):
    """
    Moves a plan forward by one stage, duplicating the last stage, and rolls the states out again from the new
    initial state of prob_next.
    :param prev: the plan solved over the preceding horizon.
    :param prob_next: the game starting from the newly measured state.
    :return: the initial guess.
    """
    U = [_shift(u) for u in prev.U]
    mu = [_shift(m) for m in prev.mu]
    X = rollout(prob_next.dynamics, prob_next.x0, np.concatenate(U, axis=1))
    return PrimalDual(X=X, U=U, mu=mu)


def shift_multipliers(al, prob):
    """
    Moves lambda and rho forward by one stage in every family that spans the whole horizon, duplicating the last
    stage. Families tied to particular stages keep their values.
    :param al: the multipliers of the preceding solve.
    :param prob: the game, only its constraint layout is used.
    :return: the shifted ALState.
    """
    lam = al.lam.copy()
    rho = al.rho.copy()
    for family, _, index in prob.constraints.layout(prob.S):
        if family.steps is None and index.shape[0] > 1:
            lam[index] = _shift(al.lam[index])
            rho[index] = _shift(al.rho[index])
    return replace(al, lam=lam, rho=rho)


class RecedingHorizonController:
    """
    Repeatedly solves the game from the measured state, applies the first control of the plan and lets the plant
    move on by one step. Time is simulated, each update advances the clock by dt however long the solve took.
    """

    def __init__(self, spec, cfg=None, opts=None, plant=None, data_handler=None):
        self.cfg = cfg if cfg is not None else MpcConfig()
        self.opts = opts if opts is not None else SolverOptions()
        self.spec = spec.with_horizon(self.cfg.horizon_seconds, self.cfg.horizon_steps)
        self.problem = build_scenario(self.spec)
        if plant is None:
            plant = Plant(self.problem.dynamics, noise=GaussianNoise(self.cfg.noise_scale, self.cfg.rng_seed))
        self.plant = plant
        self.data_handler = data_handler if data_handler is not None else Discard()

    def run(self):
        cfg = self.cfg
        dt = self.problem.dynamics.dt
        n_updates = int(round(cfg.sim_duration / dt))
        x = self.problem.x0.copy()
        times = [0.0]
        states = [x]
        controls = []
        updates = []
        plans = [] if cfg.keep_plans else None
        guess = None
        plan = None
        al = None
        diverged = False
        for k in range(n_updates):
            now = k * dt
            current = self.problem.with_x0(x)
            y0 = warm_start_shift(guess, current) if guess is not None and cfg.warm_start else None
            al0 = shift_multipliers(al, current) if cfg.carry_multipliers and al is not None else None
            started = time.perf_counter()
            y, al_out, report = solve(current, y0, self.opts, al0=al0)
            duration = time.perf_counter() - started
            fallback = report.status not in APPLIED
            if fallback and plan is not None:
                logger.warning(f"Update {k} failed with {report.status.value}, reusing the previous plan")
                self.data_handler.on_failure(now, f"update {k}: {report.status.value}")
                plan = warm_start_shift(plan, current)
                al = shift_multipliers(al, current)
            else:
                if fallback:
                    logger.warning(f"Update {k} failed with {report.status.value} and has no previous plan")
                    self.data_handler.on_failure(now, f"update {k}: {report.status.value}")
                plan = y
                al = al_out
            u = plan.joint_controls()[0]
            update = MpcUpdate(index=k, time=now, status=report.status, newton_iters=report.newton_iters,
                               outer_iters=report.outer_iters, duration=duration, fallback=fallback,
                               max_violation=report.max_violation)
            updates.append(update)
            self.data_handler.handle([update.to_row()])
            if plans is not None:
                plans.append(plan.X.copy())
            x = self.plant.step(x, u)
            guess = plan
            controls.append(u)
            states.append(x)
            times.append((k + 1) * dt)
            if not np.all(np.isfinite(x)) or np.abs(x.reshape(-1, STATE_SIZE)[:, :2]).max() > cfg.bounding_box:
                logger.error(f"Closed loop state left the bounding box at update {k}, stopping")
                diverged = True
                break
        ego = self.spec.ego
        return MpcTrace(M=self.problem.M, dt=dt, sim_duration=cfg.sim_duration, radius=self.spec.radius,
                        times=np.array(times), states=np.array(states),
                        controls=np.array(controls).reshape(len(controls), self.problem.m), updates=updates,
                        plans=plans, diverged=diverged, ego=ego, lane=self.spec.lane_for(ego))


def mpc_run(spec, cfg=None, opts=None, data_handler=None):
    """
    Runs the receding horizon loop for cfg.sim_duration simulated seconds.
    :return: the trace.
    """
    return RecedingHorizonController(spec, cfg, opts, data_handler=data_handler).run()


def mis_specification_run(spec, cfg=None, opts=None, data_handler=None):
    """
    Every plan assumes the pedestrian plays the game at its desired speed while the simulated pedestrian walks a
    straight line at its true speed.
    :return: the trace, the ego is the first player not flagged as a pedestrian.
    """
    if spec.pedestrian is None:
        raise ScenarioError('pedestrian', "the scenario has no pedestrian")
    ped = spec.pedestrian
    starts = [p.start for p in spec.players]
    starts[ped.player] = starts[ped.player]._replace(v=ped.true_speed)
    spec = spec.with_starts(starts)
    controller = RecedingHorizonController(spec, cfg, opts, data_handler=data_handler)
    controller.plant.open_loop[ped.player] = ped.true_speed
    logger.info(f"Pedestrian modelled at {ped.desired_speed} m/s, walking at {ped.true_speed} m/s")
    return controller.run()
