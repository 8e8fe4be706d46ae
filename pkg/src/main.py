"""
Command-line entry point and experiment pipeline.
Runs fixed-point, ODE, stability, simulation and throughput analyses and
reproduces the two built-in examples end to end.
"""

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from macfield import dtmc, fpe, stability, throughput
from macfield.formatter import ReportFormatter, sanitize_for_json
from macfield.model import (MacFieldError, OccupancyState, Scenario, ScenarioError, check_scenario_conditions,
                            scenario_from_dict, scenario_to_dict)
from macfield.ode import IntegrationControls, MeanFieldModel, solve_trajectory
from macfield.scenarios import EXAMPLE_DOCUMENTS, REFERENCE, load_example

logger = logging.getLogger("macfield")

SUBCOMMANDS = ("fpe", "ode", "sim", "stability", "throughput", "repro")


def load_scenario(path: str) -> Scenario:
    """Read and validate a scenario JSON document; parse errors carry line and column."""
    try:
        with open(path, 'r') as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}:{e.lineno}:{e.colno}", e.msg) from None
    except OSError as e:
        raise ScenarioError(path, f"cannot read scenario: {e.strerror}") from None
    return scenario_from_dict(doc)


class MacFieldPipeline:
    """
    Analysis pipeline:

    1. Fixed points of the stationary equations
    2. Equilibrium classification
    3. Mean-field trajectory with cycle or basin analysis
    4. Finite-N simulation
    5. Summary with reference checks
    """

    def __init__(self, config: Dict[str, Any] = None):
        self.config = self._default_config()
        self.config.update(config or {})
        self.formatter: Optional[ReportFormatter] = None

        # Results storage
        self.solutions = None
        self.reports = None
        self.trajectory = None
        self.sim_stats = None

    def _default_config(self) -> Dict[str, Any]:
        """Default configuration for the pipeline."""
        return {
            'output_dir': 'results',
            'seed': 1,
            'total_slots': 20_000_000,
            'full_slots': 120_000_000,
            'window': 2000,
            'horizon': None,
            'full': False,
            'step_fraction': 0.05,
            'burn_in_slots': 1_000_000,
            'basin_points': 100,
            'basin_horizon': 300_000.0,
            'cycle_horizon': 450_000.0,
            'log_level': 'INFO',
        }

    def _formatter(self) -> ReportFormatter:
        if self.formatter is None:
            self.formatter = ReportFormatter(self.config['output_dir'])
        return self.formatter

    def _controls(self) -> IntegrationControls:
        return IntegrationControls(step_fraction=float(self.config['step_fraction']))

    def _slots(self) -> int:
        return int(self.config['full_slots'] if self.config['full'] else self.config['total_slots'])

    def default_horizon(self, scenario: Scenario) -> float:
        if self.config['horizon']:
            return float(self.config['horizon'])
        model = MeanFieldModel(scenario)
        slowest = min(float(q[q > 0].min()) for q in model.rates)
        return 200.0 / slowest * model.time_scale

    def run_phase1_fixed_points(self, scenario: Scenario) -> List[fpe.FpeSolution]:
        """
        Phase 1: Fixed points
        - Enumerate every root of the stationary equations
        - Export the roots and the residual curve
        """
        print("=" * 50)
        print("Phase 1: Fixed Points")
        print("=" * 50)

        self.solutions = fpe.solve(scenario)
        out = self._formatter()
        out.export_json('roots.json', {
            'scenario': scenario_to_dict(scenario),
            'conditions': check_scenario_conditions(scenario).to_dict(),
            'solutions': [s.to_dict() for s in self.solutions],
        })
        out.export_csv('residual.csv', fpe.residual_curve(scenario))
        for sol in self.solutions:
            print(f"  root {sol.index}: gamma={sol.gamma:.6f} qbar={[round(q, 6) for q in sol.qbar]} "
                  f"|residual|={sol.residual_norm:.2e}")
        return self.solutions

    def run_phase2_stability(self, scenario: Scenario) -> List[stability.EquilibriumReport]:
        """
        Phase 2: Equilibrium classification
        - Reduced Jacobian at each reconstructed equilibrium
        - Eigenvalue-based stable / unstable / marginal verdict
        """
        print("=" * 50)
        print("Phase 2: Equilibrium Stability")
        print("=" * 50)

        self.reports = stability.classify_equilibria(scenario, solutions=self.solutions)
        self._formatter().export_json('equilibria.json', [r.to_dict() for r in self.reports])
        for r in self.reports:
            print(f"  gamma={r.gamma:.4f}: {r.classification.value}")
        return self.reports

    def run_phase3_trajectory(self, scenario: Scenario, horizon: Optional[float] = None,
                              cycle: bool = False) -> Dict[str, Any]:
        """
        Phase 3: Mean-field trajectory
        - Integrate from all mass at stage 0
        - Cycle detection on the average attempt rate when requested
        """
        print("=" * 50)
        print("Phase 3: Mean-Field Trajectory")
        print("=" * 50)

        horizon = horizon or self.default_horizon(scenario)
        controls = self._controls()
        # cycle detection reads only the second half
        transient = horizon / 2 if cycle else 0.0
        coarse = IntegrationControls(step_fraction=4 * controls.step_fraction)
        self.trajectory = solve_trajectory(scenario, None, horizon, controls, transient=transient,
                                           transient_controls=coarse)
        out = self._formatter()
        out.export_csv('trajectory.csv', self.trajectory.to_frame())
        final = {k: float(v[-1]) for k, v in self.trajectory.derived.items()}
        result: Dict[str, Any] = {'horizon': horizon, 'time_unit': self.trajectory.time_unit, 'final': final}
        print(f"  integrated {horizon:.6g} {self.trajectory.time_unit}, final qbar_H={final['qbar_H']:.6f}")
        if cycle:
            report = stability.detect_limit_cycle(self.trajectory)
            out.export_json('cycle.json', report.to_dict())
            result['cycle'] = report.to_dict()
            print(f"  periodic={report.periodic} period={report.period:.6g}")
        return result

    def run_phase3_basins(self, scenario: Scenario) -> Dict[str, Any]:
        """
        Phase 3b: Basins of attraction
        - Random simplex starts plus the all-stage-0 start
        - Each labelled with the stable equilibrium it reaches
        """
        print("=" * 50)
        print("Phase 3b: Basins of Attraction")
        print("=" * 50)

        rng = np.random.default_rng(int(self.config['seed']))
        points = [OccupancyState.all_stage_zero(scenario)]
        points += [OccupancyState.random_simplex(scenario, rng) for _ in range(int(self.config['basin_points']))]
        labels = stability.basin_map(scenario, points, float(self.config['basin_horizon']),
                                     reports=self.reports, controls=self._controls())
        counts: Dict[str, int] = {}
        for label in labels[1:]:
            counts[label] = counts.get(label, 0) + 1
        result = {'all_stage_zero': labels[0], 'random_starts': counts}
        self._formatter().export_json('basins.json', result)
        print(f"  all-stage-0 start -> {labels[0]}; random starts: {counts}")
        return result

    def run_phase4_simulation(self, scenario: Scenario) -> dtmc.SimStats:
        """
        Phase 4: Finite-N simulation
        - Slot-level occupancy chain from all nodes in stage 0
        - Windowed collision statistics
        """
        print("=" * 50)
        print("Phase 4: Finite-N Simulation")
        print("=" * 50)

        slots = self._slots()
        self.sim_stats = dtmc.run(scenario, slots, seed=int(self.config['seed']), W=int(self.config['window']))
        out = self._formatter()
        out.export_csv('sim_windows.csv', self.sim_stats.windows)
        out.export_json('sim_summary.json', self.sim_stats.summary())
        print(f"  {slots} slots, overall gamma_hat={self.sim_stats.totals['gamma_hat']:.4f}, "
              f"{self.sim_stats.runtime_s:.1f} s")
        return self.sim_stats

    def _stage(self, name: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MacFieldError as e:
            raise _StageFailure(name, str(e)) from e

    def repro(self, example_id: str) -> Dict[str, Any]:
        """
        Reproduce a built-in example and compare against its reference values.

        Returns a result dict with per-check pass/fail; ``success`` is true
        only if every stage ran and every check passed.
        """
        print("📡 macfield reproduction")
        print("=" * 50)
        print(f"Example: {example_id}")
        print(f"Configuration: {self.config}")
        print("=" * 50)

        start_time = datetime.now()
        try:
            scenario = self._stage('load', load_example, example_id)
            ref = REFERENCE[example_id]
            checks: Dict[str, bool] = {}
            results: Dict[str, Any] = {}

            solutions = self._stage('fpe', self.run_phase1_fixed_points, scenario)
            gammas = [s.gamma for s in solutions]
            results['roots'] = gammas
            checks['root_count'] = len(gammas) == len(ref['roots'])
            checks['roots_match'] = checks['root_count'] and all(
                abs(g - r) <= ref['root_tol'] for g, r in zip(gammas, ref['roots']))

            reports = self._stage('stability', self.run_phase2_stability, scenario)
            pattern = [r.classification.value for r in reports]
            results['classification'] = pattern
            checks['classification'] = pattern == ref['classification']

            slots = self._slots()
            if example_id == 'example1':
                horizon = self.config['horizon'] or self.config['basin_horizon']
                traj = self._stage('ode', self.run_phase3_trajectory, scenario, float(horizon))
                final_gamma = traj['final']['gamma']
                nearest = min(reports, key=lambda r: abs(r.gamma - final_gamma))
                results['ode_final_gamma'] = final_gamma
                checks['ode_settles_stable'] = nearest.classification is stability.Stability.STABLE

                results['basins'] = self._stage('basins', self.run_phase3_basins, scenario)
                checks['bistable_basins'] = len([k for k in results['basins']['random_starts']
                                                 if k != stability.NON_CONVERGENT]) >= 2

                stats = self._stage('sim', self.run_phase4_simulation, scenario)
                burn_in = int(self.config['burn_in_slots'])
                share = dtmc.mode_concentration(stats, ref['sim_mode_centers'], ref['sim_mode_tol'],
                                                burn_in=burn_in)
                root_shares = dtmc.nearest_root_shares(stats, gammas, burn_in=burn_in)
                stable_share = sum(f for f, r in zip(root_shares, reports)
                                   if r.classification is stability.Stability.STABLE)
                results['sim_mode_share'] = share
                results['sim_root_shares'] = dict(zip((f"{g:.4f}" for g in gammas), root_shares))
                results['sim_gamma_hat'] = stats.totals['gamma_hat']
                checks['sim_mode_band'] = bool(share >= ref['sim_mode_share'])
                checks['sim_stable_concentration'] = bool(stable_share >= ref['sim_stable_share'])
                if self.config['full']:
                    lo, hi = ref['sim_full_range']
                    checks['sim_overall_gamma'] = bool(lo <= stats.totals['gamma_hat'] <= hi)
            else:
                horizon = self.config['horizon'] or self.config['cycle_horizon']
                traj = self._stage('ode', self.run_phase3_trajectory, scenario, float(horizon), cycle=True)
                cyc = traj['cycle']
                lo, hi = ref['ode_period_range']
                results['ode_period'] = cyc['period']
                checks['ode_periodic'] = bool(cyc['periodic']) and lo <= cyc['period'] <= hi
                stats = self._stage('sim', self.run_phase4_simulation, scenario)
                period = dtmc.dominant_period(stats, burn_in=int(self.config['burn_in_slots']))
                results['sim_period'] = period
                results['sim_gamma_hat'] = stats.totals['gamma_hat']
                lo, hi = ref['sim_period_range']
                checks['sim_period'] = bool(lo <= period <= hi)
                lo, hi = ref['sim_gamma_range']
                checks['sim_overall_gamma'] = bool(lo <= stats.totals['gamma_hat'] <= hi)
            results['sim_slots'] = slots
            results['reference'] = ref

            summary = self._formatter().export_summary('summary.json', results, checks)
            duration = datetime.now() - start_time

            print("=" * 50)
            for name, ok in checks.items():
                print(f"  {'PASS' if ok else 'FAIL'}  {name}")
            print(("✅ All checks passed" if summary['passed'] else "❌ Some checks failed"))
            print(f"⏱️  Total duration: {duration}")
            print(f"📁 Output: {self.config['output_dir']}/summary.json")
            print("=" * 50)
            return {'success': summary['passed'], 'checks': checks, 'results': results,
                    'duration': str(duration)}

        except _StageFailure as e:
            print(f"❌ Stage '{e.stage}' failed: {e.message}")
            return {'success': False, 'stage': e.stage, 'error': e.message}


class _StageFailure(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


def _coerce(value: str, default: Any) -> Any:
    if isinstance(default, bool):
        return value.lower() in ('1', 'true', 'yes', 'on')
    if isinstance(default, int):
        return int(float(value))
    if isinstance(default, float) or default is None:
        return float(value)
    return value


def build_config(args: argparse.Namespace) -> Dict[str, Any]:
    """Pipeline configuration from defaults, explicit flags and --set overrides."""
    config = MacFieldPipeline()._default_config()
    for item in args.set or []:
        if '=' not in item:
            raise ScenarioError('--set', f"expected key=value, got {item!r}")
        key, value = item.split('=', 1)
        if key not in config:
            raise ScenarioError('--set', f"unknown configuration key {key!r}")
        config[key] = _coerce(value, config[key])
    flags = {'output_dir': args.out, 'seed': args.seed, 'total_slots': args.slots,
             'window': args.window, 'horizon': args.horizon, 'log_level': args.log_level}
    config.update({k: v for k, v in flags.items() if v is not None})
    if args.full:
        config['full'] = True
    return config


def _scenario_from_args(args: argparse.Namespace) -> Scenario:
    if args.example:
        return load_example(args.example)
    if not args.scenario:
        raise ScenarioError('--scenario', "a scenario file or --example is required")
    return load_scenario(args.scenario)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='macfield', description='Mean-field analysis of slotted CSMA backoff')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p: argparse.ArgumentParser, scenario: bool = True):
        if scenario:
            p.add_argument('--scenario', help='Scenario JSON file')
            p.add_argument('--example', choices=sorted(EXAMPLE_DOCUMENTS), help='Built-in example scenario')
        p.add_argument('--out', help='Output directory')
        p.add_argument('--seed', type=int, help='Simulator seed')
        p.add_argument('--slots', type=int, help='Simulated slots')
        p.add_argument('--window', type=int, help='Statistics window in slots')
        p.add_argument('--horizon', type=float, help='Integration horizon in the scenario time unit')
        p.add_argument('--full', action='store_true', help='Use the full-length simulation')
        p.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override a configuration key')
        p.add_argument('--log-level', default=None, help='Logging level (default INFO)')

    common(sub.add_parser('fpe', help='Enumerate fixed points'))
    common(sub.add_parser('ode', help='Integrate the mean-field ODE'))
    common(sub.add_parser('sim', help='Run the finite-N simulator'))
    p = sub.add_parser('stability', help='Classify equilibria')
    common(p)
    p.add_argument('--cycle', action='store_true', help='Also integrate and run cycle detection')
    p = sub.add_parser('throughput', help='Throughput-optimal attempt rates')
    common(p, scenario=False)
    p.add_argument('--L', type=float, required=True, help='Successful transmission duration (slots)')
    p.add_argument('--Lc', type=float, default=1.0, help='Collision duration (slots)')
    p.add_argument('--Lo', type=float, default=0.0, help='Per-success overhead (slots)')
    p.add_argument('--K', type=int, default=6, help='Highest backoff stage')
    p = sub.add_parser('repro', help='Reproduce a built-in example')
    common(p, scenario=False)
    p.add_argument('example_id', choices=sorted(EXAMPLE_DOCUMENTS), help='Example to reproduce')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = build_config(args)
    except ScenarioError as e:
        parser.error(str(e))
    logging.basicConfig(level=getattr(logging, str(config['log_level']).upper(), logging.INFO),
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    pipeline = MacFieldPipeline(config)

    if args.command == 'repro':
        result = pipeline.repro(args.example_id)
        return 0 if result['success'] else 1

    try:
        if args.command == 'throughput':
            design = throughput.optimal_design(args.L, args.Lc, args.Lo, args.K)
            pipeline._formatter().export_json('throughput.json', design)
            print(json.dumps({k: design[k] for k in ('qstar', 'mstar', 'q_vector', 'omega_at_qstar')}, indent=2))
            return 0

        scenario = _scenario_from_args(args)
        if args.command == 'fpe':
            solutions = pipeline.run_phase1_fixed_points(scenario)
            print(json.dumps([s.to_dict() for s in solutions], indent=2))
        elif args.command == 'stability':
            pipeline.run_phase1_fixed_points(scenario)
            reports = pipeline.run_phase2_stability(scenario)
            report: Dict[str, Any] = {'equilibria': [r.to_dict() for r in reports]}
            if args.cycle:
                report['cycle'] = pipeline.run_phase3_trajectory(scenario, cycle=True)['cycle']
            print(json.dumps(sanitize_for_json(report), indent=2))
        elif args.command == 'ode':
            pipeline.run_phase3_trajectory(scenario)
        elif args.command == 'sim':
            pipeline.run_phase4_simulation(scenario)
        return 0
    except MacFieldError as e:
        print(f"❌ {args.command} failed: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
