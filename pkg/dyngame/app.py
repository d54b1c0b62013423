import argparse
import faulthandler
import logging
import os
import sys
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from dyngame.config import Config
from dyngame.handler import CSVLogger, write_csv, write_json
from dyngame.harness import monte_carlo, nash_check, penalty_sweep, timing_benchmark, write_bench_csv, \
    write_penalty_csv, write_samples_csv
from dyngame.mpc import mis_specification_run, mpc_run
from dyngame.scenarios import DATA_DIR, STATE_SIZE, ScenarioError, ScenarioKind, build_scenario, \
    bundled_scenario, load_scenario
from dyngame.solver import solve

logger = logging.getLogger(__name__)

# register a thread dumper
faulthandler.enable()
if hasattr(faulthandler, 'register'):
    import signal

    faulthandler.register(signal.SIGUSR2, all_threads=True)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

DEFAULT_SCENARIO = 'ramp_merge_3'


class Command(Enum):
    SOLVE = 'solve'
    MPC = 'mpc'
    MONTECARLO = 'montecarlo'
    BENCH = 'bench'
    NASHCHECK = 'nashcheck'


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    command: Command
    scenario_path: Optional[str] = None
    output_dir: str = '.'
    overrides: Tuple[str, ...] = ()
    seed: int = 0
    n_samples: int = 100
    workers: int = 1
    repetitions: int = 10
    players: Tuple[int, ...] = (2, 3, 4)
    plot: bool = False
    mismatch: bool = False
    config_home: Optional[str] = None
    debug: bool = False


def create_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--scenario', help='a scenario json file or the name of a bundled scenario')
    common.add_argument('--out', default='.', help='the output directory')
    common.add_argument('--seed', type=int, default=0, help='seeds every random stream')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='overrides a solver, mpc, perturbation or nash setting')
    common.add_argument('--plot', action='store_true', help='also writes svg plots')
    common.add_argument('--config-home', help='the directory holding dyngame.yml and the log file')
    common.add_argument('--debug', action='store_true', help='debug logging')
    parser = _Parser(prog='dyngame', description='Solves constrained dynamic games for multi vehicle interactions')
    commands = parser.add_subparsers(dest='command', parser_class=_Parser)
    commands.required = True
    commands.add_parser(Command.SOLVE.value, parents=[common], help='solve one scenario')
    mpc = commands.add_parser(Command.MPC.value, parents=[common], help='run the receding horizon loop')
    mpc.add_argument('--mismatch', action='store_true',
                     help='compare a pedestrian walking slower than modelled against one walking as modelled')
    mc = commands.add_parser(Command.MONTECARLO.value, parents=[common], help='solve from perturbed starts')
    mc.add_argument('--n', type=int, default=100, help='the number of samples')
    mc.add_argument('--workers', type=int, default=1, help='solve samples on this many threads')
    bench = commands.add_parser(Command.BENCH.value, parents=[common], help='time cold start solves')
    bench.add_argument('--repetitions', type=int, default=10)
    bench.add_argument('--players', type=int, nargs='+', default=[2, 3, 4])
    commands.add_parser(Command.NASHCHECK.value, parents=[common], help='solve then test unilateral deviations')
    return parser


def parse_args(args=None):
    parsed = create_parser().parse_args(args)
    return RunConfig(command=Command(parsed.command), scenario_path=parsed.scenario, output_dir=parsed.out,
                     overrides=tuple(parsed.set), seed=parsed.seed, n_samples=getattr(parsed, 'n', 100),
                     workers=getattr(parsed, 'workers', 1), repetitions=getattr(parsed, 'repetitions', 10),
                     players=tuple(getattr(parsed, 'players', (2, 3, 4))), plot=parsed.plot,
                     mismatch=getattr(parsed, 'mismatch', False), config_home=parsed.config_home,
                     debug=parsed.debug)


def resolve_scenario(scenario_path):
    """
    :param scenario_path: a file, the name of a bundled scenario or None for the default.
    :return: the spec.
    """
    if scenario_path is None:
        return bundled_scenario(DEFAULT_SCENARIO)
    if os.path.exists(scenario_path):
        return load_scenario(scenario_path)
    name = scenario_path if scenario_path.endswith('.json') else scenario_path + '.json'
    if os.path.exists(os.path.join(DATA_DIR, name)):
        return bundled_scenario(name)
    raise ScenarioError('', f"no scenario file or bundled scenario named {scenario_path}")


def trajectory_header(spec):
    header = ['t']
    for player in spec.players:
        header += [f"{player.name}_{c}" for c in ('px', 'py', 'theta', 'v', 'u1', 'u2')]
    return header


def trajectory_rows(states, controls, dt, M):
    """
    One row per time step, the last row has no controls.
    :param states: (T, 4M).
    :param controls: (T - 1, 2M).
    """
    rows = []
    for k, x in enumerate(states):
        row = [k * dt]
        for nu in range(M):
            row += list(x[STATE_SIZE * nu:STATE_SIZE * (nu + 1)])
            row += list(controls[k, 2 * nu:2 * nu + 2]) if k < len(controls) else ['', '']
        rows.append(row)
    return rows


def _solution_states(prob, y):
    return np.vstack([prob.x0, y.X])


def run_solve(cfg, spec, settings):
    prob = build_scenario(spec)
    y, _, report = solve(prob, None, settings.solver)
    out = cfg.output_dir
    states = _solution_states(prob, y)
    write_csv(os.path.join(out, 'trajectory.csv'), trajectory_header(spec),
              trajectory_rows(states, y.joint_controls(), prob.dynamics.dt, prob.M))
    write_json(os.path.join(out, 'report.json'), {'scenario': spec.name, 'wall_time': report.wall_time,
                                                  **report.to_dict()})
    write_penalty_csv(os.path.join(out, 'penalty.csv'), spec, penalty_sweep(prob, y))
    if settings.plot:
        from dyngame.plots import plot_paths
        plot_paths(spec, states, os.path.join(out, 'paths.svg'))
    print(f"{spec.name}: {report.status.value} in {report.wall_time * 1000.0:.1f} ms, "
          f"{report.newton_iters} newton steps, violation {report.max_violation:.3e}, "
          f"||G||_1 {report.residual_norm:.3e}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def _mpc_summary(spec, trace):
    collisions = trace.collision_values()
    return {
        'scenario': spec.name,
        'updates': trace.update_count,
        'fallbacks': len(trace.failures),
        'diverged': trace.diverged,
        'mean_frequency_hz': trace.mean_frequency,
        'wall_frequency_hz': trace.wall_frequency,
        'max_collision_value': float(collisions.max()) if collisions.size else None,
        'min_ego_speed': float(trace.ego_speed.min()),
        'max_ego_lateral_offset': float(np.abs(trace.ego_lateral_offset).max()),
    }


def _write_trace(path, spec, trace):
    write_csv(path, trajectory_header(spec), trajectory_rows(trace.states, trace.controls, trace.dt, trace.M))


def _write_ego(path, trace):
    write_csv(path, ['t', 'speed', 'lateral_offset'],
              [list(row) for row in zip(trace.times, trace.ego_speed, trace.ego_lateral_offset)])


def run_mpc(cfg, spec, settings):
    out = cfg.output_dir
    updates = CSVLogger('updates.csv', out)
    if cfg.mismatch:
        if spec.pedestrian is None:
            raise ScenarioError('pedestrian', f"{spec.name} has no pedestrian to mis-specify")
        trace = mis_specification_run(spec, settings.mpc, settings.solver, data_handler=updates)
        matched_spec = replace(spec, pedestrian=replace(spec.pedestrian, true_speed=spec.pedestrian.desired_speed))
        matched = mis_specification_run(matched_spec, settings.mpc, settings.solver)
        _write_trace(os.path.join(out, 'trace_matched.csv'), spec, matched)
        _write_ego(os.path.join(out, 'ego_matched.csv'), matched)
        summary = {**_mpc_summary(spec, trace), 'matched': _mpc_summary(spec, matched)}
    else:
        trace = mpc_run(spec, settings.mpc, settings.solver, data_handler=updates)
        summary = _mpc_summary(spec, trace)
    updates.close()
    _write_trace(os.path.join(out, 'trace.csv'), spec, trace)
    _write_ego(os.path.join(out, 'ego.csv'), trace)
    write_json(os.path.join(out, 'summary.json'), summary)
    if settings.plot:
        from dyngame.plots import plot_paths
        plot_paths(spec, trace.states, os.path.join(out, 'paths.svg'), title=f"{spec.name} closed loop")
    line = (f"{spec.name}: {trace.update_count} updates, {len(trace.failures)} fallbacks, "
            f"{trace.wall_frequency:.1f} Hz, min ego speed {summary['min_ego_speed']:.2f} m/s")
    if cfg.mismatch:
        line += f" (matched {summary['matched']['min_ego_speed']:.2f} m/s)"
    print(line)
    return EXIT_NOT_CONVERGED if trace.diverged else EXIT_OK


def run_montecarlo(cfg, spec, settings):
    out = cfg.output_dir
    batch = monte_carlo(spec, settings.perturbation, cfg.n_samples, settings.solver, workers=cfg.workers)
    write_samples_csv(os.path.join(out, 'samples.csv'), batch)
    write_json(os.path.join(out, 'summary.json'), {**batch.to_summary(), 'seed': cfg.seed})
    write_json(os.path.join(out, 'timings.json'), batch.timing_summary())
    if settings.plot:
        from dyngame.plots import plot_histograms
        plot_histograms(batch, os.path.join(out, 'histograms.svg'))
    print(f"{spec.name}: {batch.convergence_rate:.1%} of {batch.n_samples} converged, "
          f"{batch.fraction_within():.1%} within 16 newton steps, median {batch.time_quantiles['p50']:.1f} ms")
    return EXIT_OK


def run_bench(cfg, spec, settings):
    specs = [spec] if cfg.scenario_path is not None else list(ScenarioKind)
    rows = timing_benchmark(specs, cfg.players, cfg.repetitions, settings.solver)
    write_bench_csv(os.path.join(cfg.output_dir, 'bench.csv'), rows)
    for row in rows:
        print(f"{row.scenario} M={row.M}: {row.mean_ms:.1f} +/- {row.std_ms:.1f} ms, {row.failures} failures")
    return EXIT_OK


def run_nashcheck(cfg, spec, settings):
    prob = build_scenario(spec)
    y, al, report = solve(prob, None, settings.solver)
    nash = settings.nash
    reports = nash_check(prob, y, al, n_directions=int(nash['n_directions']), step_sizes=nash['step_sizes'],
                         epsilon=float(nash['epsilon']), tol_feas=settings.solver.tol_feas, rng_seed=cfg.seed)
    equilibrium = report.converged and all(r.is_equilibrium for r in reports)
    write_json(os.path.join(cfg.output_dir, 'nash.json'), {
        'scenario': spec.name,
        'status': report.status.value,
        'equilibrium': equilibrium,
        'players': [r.to_dict() for r in reports],
    })
    print(f"{spec.name}: {report.status.value}, "
          f"{sum(r.improving for r in reports)} improving deviations in {sum(r.tested for r in reports)} tested")
    return EXIT_OK if equilibrium else EXIT_NOT_CONVERGED


COMMANDS = {
    Command.SOLVE: run_solve,
    Command.MPC: run_mpc,
    Command.MONTECARLO: run_montecarlo,
    Command.BENCH: run_bench,
    Command.NASHCHECK: run_nashcheck,
}


def run(args=None):
    """
    The main routine.
    :param args: the command line, sys.argv if not supplied.
    :return: the exit status.
    """
    try:
        cfg = parse_args(args) if not isinstance(args, RunConfig) else args
    except UsageError as e:
        print(f"dyngame: {e}", file=sys.stderr)
        return EXIT_ERROR
    try:
        config = Config(cfg.config_home)
        config.configure_logger(debug=cfg.debug)
        settings = config.settings(cfg.overrides, seed=cfg.seed)
        if cfg.plot:
            settings.plot = True
        spec = resolve_scenario(cfg.scenario_path)
        os.makedirs(cfg.output_dir, exist_ok=True)
        logger.info(f"Running {cfg.command.value} on {spec.name}")
        return COMMANDS[cfg.command](cfg, spec, settings)
    except (ValueError, OSError) as e:
        logger.exception(f"{cfg.command.value} failed: {e}")
        return EXIT_ERROR


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
