"""Command-line entry point: ``basinscope run|analyze|report|verify``.

Exit codes: 0 success, 1 configuration or usage error, 2 data, model or
analysis error, 3 integrity failure (including a failed ``verify``).
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence
import argparse
import logging
import sys

from basinscope import __version__
from basinscope.config.experiment import ExperimentConfig, load_config, parse_split_list
from basinscope.config.settings import Settings
from basinscope.errors import BasinscopeError, ConfigError, IntegrityError
from basinscope.logging_setup import configure_logging

logger = logging.getLogger('basinscope.cli')


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f'{self.prog}: error: {message}\n')


def _add_experiment_flags(p: argparse.ArgumentParser, jobs: bool = True) -> None:
    p.add_argument('--config', required=True, type=Path, help='experiment TOML file')
    p.add_argument('--experiment', help='experiment table name (needed when the file has several)')
    p.add_argument('--output', type=Path, help='output directory (overrides output_dir)')
    p.add_argument('--splits', help='split seeds, e.g. "100-104" or "100,103"')
    p.add_argument('--runs', type=int, help='runs per split (overrides runs)')
    if jobs:
        p.add_argument('--jobs', type=int, help='worker processes (default: BASINSCOPE_JOBS)')
        p.add_argument('--resume', action='store_true', help='keep completed chunks and compute only missing runs')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='basinscope', description='Explanation-stability diagnostics for repeated training.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging and tracebacks')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    _add_experiment_flags(sub.add_parser('run', help='train, explain, analyse and report'))
    _add_experiment_flags(sub.add_parser('analyze', help='aggregate existing chunks and write the envelope'), jobs=False)

    report = sub.add_parser('report', help='write tables and figures from an envelope')
    report.add_argument('--output', type=Path, required=True, help='directory holding envelope.json')

    verify = sub.add_parser('verify', help='run the brute-force oracle and property suites')
    verify.add_argument('--suite', action='append', default=[],
                        help='run only this suite (repeatable)')
    return parser


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config, args.experiment)
    return config.with_overrides(
        output_dir=args.output,
        split_seeds=parse_split_list(args.splits) if args.splits else None,
        runs=args.runs,
    )


def _analyze_and_report(config: ExperimentConfig, figures: bool) -> None:
    from basinscope.services import reporting

    envelope = reporting.analyze_experiment(config)
    reporting.write_envelope(envelope, config.output_dir)
    reporting.write_tables(envelope, config.output_dir)
    if figures:
        from basinscope.services.figures import render_figures

        render_figures(envelope, config.output_dir)


def cmd_run(args: argparse.Namespace, env: Settings) -> int:
    from basinscope.services.runtime import run_experiment

    config = _experiment(args)
    jobs = args.jobs if args.jobs is not None else env.JOBS
    logger.info('experiment %s: %d split(s) x %d runs, %d worker(s)', config.name,
                len(config.split_seeds), config.runs, jobs)
    run_experiment(config, jobs=max(1, jobs), resume=args.resume)
    _analyze_and_report(config, figures=True)
    return 0


def cmd_analyze(args: argparse.Namespace, env: Settings) -> int:
    _analyze_and_report(_experiment(args), figures=False)
    return 0


def cmd_report(args: argparse.Namespace, env: Settings) -> int:
    from basinscope.services import reporting
    from basinscope.services.figures import render_figures

    envelope = reporting.read_envelope(args.output)
    reporting.write_tables(envelope, args.output)
    render_figures(envelope, args.output)
    return 0


def cmd_verify(args: argparse.Namespace, env: Settings) -> int:
    from basinscope.services.oracles import SUITES, run_verify_suite

    unknown = sorted(set(args.suite) - set(SUITES))
    if unknown:
        raise ConfigError(f'unknown suite(s) {unknown}; choose from {sorted(SUITES)}')
    results = run_verify_suite(args.suite)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise IntegrityError(f'verify failed: {", ".join(failed)}')
    logger.info('all %d suite(s) passed', len(results))
    return 0


COMMANDS = {'run': cmd_run, 'analyze': cmd_analyze, 'report': cmd_report, 'verify': cmd_verify}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    env = Settings.from_env()
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging('DEBUG' if args.verbose else env.LOG_LEVEL)
    try:
        return COMMANDS[args.command](args, env)
    except BasinscopeError as exc:
        logger.error('%s', exc, exc_info=args.verbose)
        return exc.exit_code
    except KeyboardInterrupt:
        logger.warning('interrupted; rerun with --resume to continue')
        return 130


def main() -> None:
    sys.exit(cli_main())


if __name__ == '__main__':
    main()
