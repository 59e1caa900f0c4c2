import argparse
import sys
import time
import uuid

from modules.core_model import (
    Control,
    ControlError,
    GridError,
    ModelParseError,
    ModelValidationError,
    load_control,
    load_model_file,
    save_control,
)
from modules.pde_engine import (
    CFLViolationError,
    MonotonicityError,
    SchemeConfig,
    SchemeError,
    boundary_band,
    cfl_number,
    convergence_study,
    max_admissible_dt,
    solve,
)
from modules.run_report import (
    RUN_STATUS_COMPLETED,
    RUN_STATUS_FAILED,
    add_line,
    format_run_report,
    new_run_report,
    update_run_report,
    write_run_report,
)
from modules.stochastic_lab import DomainError, McConfig, check_start, mc_report, random_control, sample_path
from modules.verification import SUITES, run_suite
from utils.csv_export import write_checks, write_convergence, write_estimates, write_path_dump, write_value_fields
from utils.logger_config import setup_logger, get_run_logger, default_log_file
from utils.runtime_config import load_runtime_settings

logger = setup_logger(name=__name__, log_file=default_log_file())

EXIT_OK = 0
EXIT_LOAD = 1
EXIT_SCHEME = 2
EXIT_DOMAIN = 3
EXIT_VERIFY = 4

DUMPED_PATHS = 10


class VerificationFailed(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_LOAD)


def build_parser() -> CliParser:
    parser = CliParser(description="Time-consistent convex dynamic procedures on grids")
    subparsers = parser.add_subparsers(dest="command", help="Sub-commands")
    subparsers.required = True

    def common(sub):
        sub.add_argument("model", help="Model file path (TOML)")
        sub.add_argument("--output", "-o", default="-", help="CSV output path ('-' for stdout)")
        sub.add_argument("--threads", type=int, help="Worker cap (falls back to NONLOCAL_DP_THREADS)")
        sub.add_argument("--run-id", help="Identifier stamped on log lines (random by default)")

    def scheme_flags(sub):
        sub.add_argument("--boundary", choices=["linear-extrapolation", "clamp-to-payoff"],
                         default="linear-extrapolation", help="Ghost-cell rule at the box faces")
        sub.add_argument("--cfl", type=float, default=1.0, help="CFL safety factor in (0, 1]")

    # Backward sweep
    solve_parser = subparsers.add_parser("solve", help="Run the backward sweep and write the value fields")
    common(solve_parser)
    scheme_flags(solve_parser)
    solve_parser.add_argument("--level0-only", action="store_true", help="Only write the t=r rows")
    solve_parser.add_argument("--save-control", help="Write the optimal control to this .npz file")

    # Monte Carlo lab
    simulate_parser = subparsers.add_parser("simulate", help="Estimate expectation, penalty and lower bound")
    common(simulate_parser)
    scheme_flags(simulate_parser)
    simulate_parser.add_argument("--control", default="optimal",
                                 help="optimal | file:PATH | random:SEED (default: optimal)")
    simulate_parser.add_argument("--r", type=float, help="Start time (default: the model's r)")
    simulate_parser.add_argument("--y", type=float, nargs="+", required=True, help="Start state")
    simulate_parser.add_argument("--paths", type=int, default=100000, help="Number of paths")
    simulate_parser.add_argument("--seed", type=int, required=True, help="Base seed")
    simulate_parser.add_argument("--substeps", type=int, default=1, help="Euler substeps per grid step")
    simulate_parser.add_argument("--dump-paths", help=f"Write the first {DUMPED_PATHS} paths to this CSV")

    # Property suites
    verify_parser = subparsers.add_parser("verify", help="Run property suites")
    common(verify_parser)
    scheme_flags(verify_parser)
    verify_parser.add_argument("--suite", choices=list(SUITES) + ["all"], default="all", help="Suite to run")
    verify_parser.add_argument("--seed", type=int, help="Base seed (required by every suite except consistency)")
    verify_parser.add_argument("--paths", type=int, default=20000, help="Paths per statistical check")
    verify_parser.add_argument("--substeps", type=int, default=4, help="Euler substeps per grid step")

    # Refinement study
    converge_parser = subparsers.add_parser("converge", help="Refinement study with observed orders")
    common(converge_parser)
    scheme_flags(converge_parser)
    converge_parser.add_argument("--levels", type=int, default=4, help="Refinement levels (≥ 3)")
    converge_parser.add_argument("--oracle", choices=["closed-form", "finest"], default="closed-form",
                                 help="Reference for the errors")
    return parser


def _scheme(args, threads: int) -> SchemeConfig:
    return SchemeConfig(boundary=args.boundary, cfl_factor=args.cfl, threads=threads)


def _resolve_control(source: str, model, scheme, run_id) -> Control:
    if source == "optimal":
        return solve(model, scheme, run_id).control
    if source.startswith("file:"):
        return load_control(source[len("file:"):])
    if source.startswith("random:"):
        return random_control(model, int(source[len("random:"):]))
    raise ControlError(f"unknown control source '{source}'")


def _emit_report(report, output: str):
    if output == "-":
        sys.stderr.write(format_run_report(report))
    else:
        write_run_report(report, f"{output}.report.txt")


def run_solve(args, model, scheme, report, run_logger):
    result = solve(model, scheme, args.run_id)
    write_value_fields(result.history, model.space.points(), args.output, level0_only=args.level0_only)
    if args.save_control:
        save_control(result.control, args.save_control)
        run_logger.info(f"Optimal control saved to {args.save_control}")
    update_run_report(report, boundary_band=result.diagnostics["boundary_band"][0])


def run_simulate(args, model, scheme, settings, report, run_logger):
    mc = McConfig(n_paths=args.paths, seed=args.seed, substeps=args.substeps,
                  batch_size=settings.batch_size, threads=settings.threads)
    r = model.time.r if args.r is None else args.r
    check_start(model, r, args.y)
    control = _resolve_control(args.control, model, scheme, args.run_id)
    estimates = mc_report(control, r, args.y, model, mc, run_id=args.run_id)
    write_estimates(estimates, args.output)
    if args.dump_paths:
        samples = [sample_path(control, r, args.y, model, mc, i) for i in range(min(DUMPED_PATHS, args.paths))]
        write_path_dump(samples, args.dump_paths)
    for e in estimates:
        add_line(report, f"{e.quantity}: mean {e.mean!r} se {e.se!r} excursion {e.excursion_fraction:.4f}")
    update_run_report(report, seed=args.seed, n_paths=args.paths, control=args.control)


def run_verify(args, model, scheme, settings, report, run_logger):
    # the consistency suite draws no random numbers
    mc = McConfig(n_paths=args.paths, seed=args.seed or 0, substeps=args.substeps,
                  batch_size=settings.batch_size, threads=settings.threads)
    results = run_suite(args.suite, model, mc, scheme, args.run_id)
    write_checks(results, args.output)
    for r in results:
        add_line(report, f"{'PASS' if r.passed else 'FAIL'} {r.suite}/{r.name}: {r.value:.3g} "
                         f"(threshold {r.threshold:.3g}) {r.detail}".rstrip())
    update_run_report(report, seed=args.seed, n_paths=args.paths, suite=args.suite)
    failed = [r for r in results if not r.passed]
    if failed:
        raise VerificationFailed(f"{len(failed)} of {len(results)} check(s) failed")


def run_converge(args, model, scheme, report, run_logger):
    rows = convergence_study(model, args.levels, args.oracle, scheme, args.run_id)
    write_convergence(rows, args.output)
    for row in rows:
        order = "-" if row.observed_order is None else f"{row.observed_order:.3f}"
        add_line(report, f"level {row.level}: dx {row.dx:.4g} dt {row.dt:.4g} "
                         f"sup error {row.sup_error:.3e} observed order {order}")
    update_run_report(report, levels=args.levels, oracle=args.oracle)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "converge" and args.levels < 3:
        parser.error("--levels must be ≥ 3")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be ≥ 1")
    if args.command == "verify" and args.seed is None and args.suite != "consistency":
        parser.error(f"--seed is required for the '{args.suite}' suite")

    args.run_id = args.run_id or uuid.uuid4().hex[:8]
    run_logger = get_run_logger(logger, args.run_id)
    report = new_run_report(args.command, args.model, args.run_id)
    started = time.perf_counter()
    exit_code = EXIT_OK
    error_message = None

    try:
        settings = load_runtime_settings(args.threads)
        scheme = _scheme(args, settings.threads)
        model = load_model_file(args.model, run_id=args.run_id)
        update_run_report(report, grid=list(model.space.shape), N=model.time.N, dt=model.time.dt,
                          cfl_number=cfl_number(model), max_admissible_dt=max_admissible_dt(model, scheme),
                          boundary=scheme.boundary, threads=settings.threads, output=args.output)

        run_logger.info(f"Running '{args.command}' on {args.model}")
        if args.command == "solve":
            run_solve(args, model, scheme, report, run_logger)
        elif args.command == "simulate":
            run_simulate(args, model, scheme, settings, report, run_logger)
        elif args.command == "verify":
            run_verify(args, model, scheme, settings, report, run_logger)
        elif args.command == "converge":
            run_converge(args, model, scheme, report, run_logger)

        if "boundary_band" not in report:
            update_run_report(report, boundary_band=boundary_band(model, scheme, model.time.T - model.time.r).tolist())

    except VerificationFailed as e:
        run_logger.error(f"Verification failed: {e}")
        error_message = str(e)
        exit_code = EXIT_VERIFY
    except (CFLViolationError, MonotonicityError, SchemeError) as e:
        run_logger.error(f"Scheme refused: {e}")
        error_message = str(e)
        exit_code = EXIT_SCHEME
    except DomainError as e:
        run_logger.error(f"Domain error: {e}")
        error_message = str(e)
        exit_code = EXIT_DOMAIN
    except (ModelParseError, ModelValidationError, ControlError, GridError, ValueError, OSError) as e:
        run_logger.error(f"Error loading or validating input: {e}")
        error_message = str(e)
        run_logger.debug("Traceback", exc_info=True)
        exit_code = EXIT_LOAD

    update_run_report(report, status=RUN_STATUS_COMPLETED if exit_code == EXIT_OK else RUN_STATUS_FAILED,
                      error_message=error_message, wall_time=time.perf_counter() - started)
    _emit_report(report, args.output)
    sys.exit(exit_code)


if __name__ == "__main__":
    main()
