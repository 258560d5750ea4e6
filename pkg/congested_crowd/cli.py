# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Batch front door: `<verb> <scenario...> [-o DIR] [--key=value ...] [--seed=N]`.

Exit codes: 0 success or verdict pass, 1 verdict fail, 2 usage or scenario
error, 3 any other failure. Verdict verbs end with a single
`VERDICT: PASS|FAIL max_slack=<x>` line on stdout.
"""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import argparse
import contextlib
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import TextIO
from typing import Tuple

from congested_crowd import analysis
from congested_crowd import artifacts
from congested_crowd import common
from congested_crowd import dynamics
from congested_crowd import pressure
from congested_crowd import scenario as scenario_mod
from congested_crowd import transport
from congested_crowd.common import log
from congested_crowd.scenario import Scenario

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_ERROR = 3

CONVERGENCE_MIN_RATIO = 1.5
CALIBRATION_LEVELS = 2


class UsageError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Command:
    verb: str
    scenarios: Tuple[Scenario, ...]
    output: str
    heatmaps: bool
    instances: int
    levels: int
    lam: Optional[float]


@dataclasses.dataclass(frozen=True)
class Outcome:
    """What a verb hands back: a verdict and its slack, or neither."""

    passed: Optional[bool] = None
    max_slack: Optional[float] = None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="congested_crowd",
        description="Simulate crowd motion under a density cap and check its "
        + "projection and contraction properties.",
        epilog="Any other --section.key=value or --key=value overrides a "
        + "scenario entry.",
    )
    parser.add_argument("verb", choices=sorted(VERBS))
    parser.add_argument("scenarios", nargs="+", metavar="scenario")
    parser.add_argument(
        "-o", "--output", default="out", help="artifact directory (default: out)"
    )
    parser.add_argument("--seed", type=int, default=None, help="override the seed")
    parser.add_argument("--pgm", action="store_true", help="write PGM heatmaps")
    parser.add_argument(
        "--instances", type=int, default=20, help="verify-lemmas instance count"
    )
    parser.add_argument(
        "--levels", type=int, default=3, help="convergence refinement levels"
    )
    parser.add_argument(
        "--lambda",
        dest="lam",
        type=float,
        default=None,
        help="contract-w2 monotonicity constant (default: analytic or estimated)",
    )
    return parser


def split_overrides(
    parser: argparse.ArgumentParser, extra: Sequence[str]
) -> List[Tuple[str, str]]:
    overrides = []
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            parser.error(f"unrecognized argument: {arg}")
        name, value = arg[2:].split("=", 1)
        if not name:
            parser.error(f"unrecognized argument: {arg}")
        overrides.append((name, value))
    return overrides


def load_scenarios(
    paths: Sequence[str], overrides: Sequence[Tuple[str, str]], seed: Optional[int]
) -> Tuple[Scenario, ...]:
    """Parse every file before any computation starts."""
    if seed is not None:
        overrides = list(overrides) + [("solver.seed", str(seed))]
    loaded = []
    for path in paths:
        try:
            scenario = scenario_mod.read_scenario(path)
        except OSError as e:
            raise UsageError(f"{path}: {e.strerror or e}") from e
        except scenario_mod.ScenarioError as e:
            raise UsageError(f"{path}: {e}") from e
        try:
            scenario = scenario_mod.apply_overrides(scenario, overrides)
        except scenario_mod.ScenarioError as e:
            raise UsageError(f"override {e}") from e
        loaded.append(scenario)
    return tuple(loaded)


def _expect_scenarios(command: Command, count: int) -> None:
    if len(command.scenarios) != count:
        raise UsageError(
            f"{command.verb} takes {count} scenario file(s), "
            + f"got {len(command.scenarios)}"
        )


def _path(command: Command, name: str) -> str:
    return os.path.join(command.output, name)


def _write_manifests(command: Command) -> None:
    for index, scenario in enumerate(command.scenarios):
        name = "manifest.txt" if index == 0 else f"manifest_{index + 1}.txt"
        artifacts.atomic_write(
            _path(command, name), scenario_mod.serialize_scenario(scenario, full=True)
        )


def _run_all(scenarios: Sequence[Scenario]) -> List[dynamics.Trajectory]:
    workers = min(len(scenarios), common.thread_cap() or len(scenarios))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(dynamics.run, s) for s in scenarios]
        return [f.result() for f in futures]


def _write_summary(command: Command, summary: Dict[str, object]) -> None:
    text = artifacts.summary_text(summary)
    artifacts.atomic_write(_path(command, "summary.txt"), text)


def _write_report(
    command: Command, report: analysis.ContractionReport, extra: Dict[str, object]
) -> None:
    artifacts.atomic_write(
        _path(command, "report.csv"),
        artifacts.table_csv(report.COLUMNS, report.rows()),
    )
    summary = {
        "mode": report.mode,
        "method": report.method,
        **extra,
        "max_slack": report.max_slack,
        "slack_tolerance": report.slack_tolerance,
        "verdict": "PASS" if report.verdict else "FAIL",
    }
    _write_summary(command, summary)


def do_simulate(command: Command) -> Outcome:
    _expect_scenarios(command, 1)
    scenario = command.scenarios[0]
    trajectory = dynamics.run(scenario)
    heatmaps = command.heatmaps or scenario.options.pgm
    artifacts.write_trajectory(command.output, trajectory, heatmaps)
    slack = scenario.options.step_bound_slack
    violations = trajectory.step_bound_violations(slack)
    if violations:
        quantized = trajectory.step_bound_violations(slack, allowance=True)
        log.warning(
            f"cli:do_simulate:{len(violations)} steps over the step-size bound, "
            + f"first at step {violations[0].step}; {len(quantized)} remain "
            + "over it with the cell-center allowance"
        )
    return Outcome()


def do_project(command: Command) -> Outcome:
    _expect_scenarios(command, 1)
    scenario = command.scenarios[0]
    certificate = transport.project_with_certificate(
        scenario.initial_density(), scenario.options
    )
    grid = scenario.grid
    artifacts.atomic_write(
        _path(command, "projected.csv"),
        artifacts.field_csv(certificate.density.values, grid, 0.0),
    )
    artifacts.atomic_write(
        _path(command, "plan.csv"), artifacts.plan_csv(certificate.plan)
    )
    summary = {
        "cost": certificate.cost,
        "rounds": certificate.rounds,
        "radius": certificate.radius,
        "dual_violation": certificate.dual_violation,
        "active": certificate.active,
        "max_density": certificate.density.max(),
        "mass": certificate.density.mass(),
    }
    _write_summary(command, summary)
    return Outcome()


def do_cone_project(command: Command) -> Outcome:
    _expect_scenarios(command, 1)
    scenario = command.scenarios[0]
    options = scenario.options
    rho = transport.wasserstein_project(scenario.initial_density(), options)
    u = scenario.velocity(0.0)
    result = pressure.admissible_project(rho, u, options)
    energy = pressure.energy_check(result, u, options)
    witnesses = pressure.sample_pressure_test_functions(rho, 8, scenario.seed, options)
    certificate = pressure.cone_certificate(rho, result, u, witnesses, options)

    grid = scenario.grid
    artifacts.atomic_write(
        _path(command, "pressure.csv"),
        artifacts.field_csv(result.pressure.values, grid, 0.0),
    )
    artifacts.atomic_write(
        _path(command, "velocity.csv"), artifacts.velocity_csv(result.velocity)
    )
    measured = (
        (result.kkt_residual, options.pressure_tolerance),
        (result.orthogonality, options.ortho_tolerance),
        (result.cone_residual, options.cone_tolerance),
        (result.complementarity, options.complementarity_tolerance),
        (energy.split_residual, options.ortho_tolerance),
        (certificate.max_ratio, options.cone_tolerance),
    )
    max_slack = max(value - allowed for value, allowed in measured)
    passed = result.converged and energy.passed and certificate.passed
    summary = {
        "converged": result.converged,
        "iterations": result.iterations,
        "kkt_residual": result.kkt_residual,
        "orthogonality": result.orthogonality,
        "cone_residual": result.cone_residual,
        "complementarity": result.complementarity,
        "drift_energy": energy.drift_energy,
        "pressure_energy": energy.pressure_energy,
        "velocity_energy": energy.velocity_energy,
        "split_residual": energy.split_residual,
        "witnesses": certificate.witnesses,
        "witness_max_ratio": certificate.max_ratio,
        "max_slack": max_slack,
        "verdict": "PASS" if passed else "FAIL",
    }
    _write_summary(command, summary)
    return Outcome(passed, max_slack)


def do_contract_w2(command: Command) -> Outcome:
    _expect_scenarios(command, 2)
    first, second = command.scenarios
    lam, source = analysis.resolve_lambda(
        first.velocity(0.0), command.lam, first.options, first.seed
    )
    log.info(f"cli:do_contract_w2:lambda {lam!r} ({source})")
    one, two = _run_all(command.scenarios)
    report = analysis.w2_contraction_report(one, two, lam, first.options, source)
    _write_report(command, report, {"lambda": lam, "lambda_source": source})
    return Outcome(report.verdict, report.max_slack)


def do_contract_l1(command: Command) -> Outcome:
    _expect_scenarios(command, 2)
    one, two = _run_all(command.scenarios)
    report = analysis.l1_contraction_report(one, two, command.scenarios[0].options)
    _write_report(command, report, {})
    return Outcome(report.verdict, report.max_slack)


def do_verify_lemmas(command: Command) -> Outcome:
    _expect_scenarios(command, 1)
    scenario = command.scenarios[0]
    sweep = analysis.lemma_sweep(
        scenario.grid,
        command.instances,
        scenario.seed,
        scenario.options,
        calibration_levels=CALIBRATION_LEVELS,
    )
    rows = [
        (c.check, c.instance, c.measured, c.allowed, c.passed) for c in sweep.checks
    ]
    artifacts.atomic_write(
        _path(command, "lemmas.csv"), artifacts.table_csv(sweep.COLUMNS, rows)
    )
    if sweep.calibration is not None:
        artifacts.atomic_write(
            _path(command, "calibration.csv"),
            artifacts.table_csv(
                sweep.calibration.COLUMNS, sweep.calibration.rows()
            ),
        )
    failed = sorted({c.check for c in sweep.checks if not c.passed})
    summary = {
        "instances": command.instances,
        "checks": len(sweep.checks),
        "failed": " ".join(failed),
        "max_slack": sweep.max_slack,
        "positivity_constant": scenario.options.positivity_constant,
        "positivity_calibrated": (
            sweep.calibration.constant if sweep.calibration is not None else None
        ),
        "verdict": "PASS" if sweep.passed else "FAIL",
    }
    _write_summary(command, summary)
    return Outcome(sweep.passed, sweep.max_slack)


def do_convergence(command: Command) -> Outcome:
    _expect_scenarios(command, 1)
    if command.levels < 3:
        raise UsageError("convergence needs --levels of at least 3")
    study = dynamics.convergence_study(command.scenarios[0], command.levels)
    rows = []
    for level, (cells, tau) in enumerate(zip(study.cells, study.taus)):
        gap = study.gaps[level] if level < len(study.gaps) else None
        ratio = study.ratios[level - 1] if 0 < level <= len(study.ratios) else None
        rows.append((level, "x".join(str(n) for n in cells), tau, gap, ratio))
    artifacts.atomic_write(
        _path(command, "convergence.csv"),
        artifacts.table_csv(("level", "cells", "tau", "gap", "ratio"), rows),
    )
    max_slack = max(CONVERGENCE_MIN_RATIO - r for r in study.ratios)
    passed = study.passed(CONVERGENCE_MIN_RATIO)
    summary = {
        "levels": command.levels,
        "min_ratio": CONVERGENCE_MIN_RATIO,
        "max_slack": max_slack,
        "verdict": "PASS" if passed else "FAIL",
    }
    _write_summary(command, summary)
    return Outcome(passed, max_slack)


VERBS: Dict[str, Callable[[Command], Outcome]] = {
    "simulate": do_simulate,
    "project": do_project,
    "cone-project": do_cone_project,
    "contract-w2": do_contract_w2,
    "contract-l1": do_contract_l1,
    "verify-lemmas": do_verify_lemmas,
    "convergence": do_convergence,
}


def parse_command(argv: Sequence[str]) -> Command:
    parser = build_parser()
    args, extra = parser.parse_known_args(list(argv))
    overrides = split_overrides(parser, extra)
    if args.instances < 1:
        parser.error("--instances must be at least 1")
    return Command(
        verb=args.verb,
        scenarios=load_scenarios(args.scenarios, overrides, args.seed),
        output=args.output,
        heatmaps=args.pgm,
        instances=args.instances,
        levels=args.levels,
        lam=args.lam,
    )


def main(
    argv: Optional[Sequence[str]] = None,
    stdout: Optional[TextIO] = None,
    stderr: Optional[TextIO] = None,
) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = sys.argv[1:] if argv is None else argv
    try:
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            command = parse_command(argv)
    except SystemExit as e:
        # argparse has already printed usage or help to the streams above
        return EXIT_OK if not e.code else EXIT_USAGE
    except UsageError as e:
        build_parser().print_usage(stderr)
        stderr.write(f"congested_crowd: error: {e}\n")
        return EXIT_USAGE

    try:
        os.makedirs(command.output, exist_ok=True)
        _write_manifests(command)
        outcome = VERBS[command.verb](command)
    except UsageError as e:
        build_parser().print_usage(stderr)
        stderr.write(f"congested_crowd: error: {e}\n")
        return EXIT_USAGE
    except Exception as e:
        log.exception(f"cli:main:{command.verb} failed: {e}")
        return EXIT_ERROR

    if outcome.passed is None:
        return EXIT_OK
    verdict = "PASS" if outcome.passed else "FAIL"
    slack = common.format_float(outcome.max_slack or 0.0)
    stdout.write(f"VERDICT: {verdict} max_slack={slack}\n")
    stdout.flush()
    return EXIT_OK if outcome.passed else EXIT_FAIL
