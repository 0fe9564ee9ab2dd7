"""
Management command to run a laboratory suite
"""
import logging
import traceback

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from laboratory.exceptions import ConfigurationError, LabError
from laboratory.services.experiment_services import SUITES, ExperimentService
from torus_lab.utils.output_utils import ResultSink
from torus_lab.utils.report_utils import (
    NUMERICAL_FAILURE_CODE,
    error_report,
    exit_code_for,
    success_report,
)

logger = logging.getLogger(__name__)

U64_MAX = 2 ** 64 - 1


def parse_seed(raw):
    """Seed as an unsigned 64-bit integer, or None when not given."""
    if raw is None:
        return None
    try:
        seed = int(raw, 10)
    except (TypeError, ValueError):
        raise ConfigurationError(f"--seed must be an unsigned 64-bit integer, got {raw!r}")
    if not 0 <= seed <= U64_MAX:
        raise ConfigurationError(f"--seed must lie in [0, 2^64 - 1], got {seed}")
    return seed


class Command(BaseCommand):
    help = 'Run a laboratory suite: ' + ', '.join(SUITES)

    def add_arguments(self, parser):
        parser.add_argument('suite', choices=SUITES, help='Suite to run')
        parser.add_argument('--config', default=None, help='JSON experiment config (default: Arnold config)')
        parser.add_argument('--out', default=None, help='Output directory (default: LAB OUTPUT_DIR)')
        parser.add_argument('--threads', type=int, default=None, help='Worker threads for scans')
        parser.add_argument('--seed', default=None, help='Seed for quasi-random multistart (U64)')

    def handle(self, *args, **options):
        suite = options['suite']
        out_dir = options['out']
        config = None
        try:
            seed = parse_seed(options['seed'])
            threads = options['threads']
            if threads is not None and threads < 1:
                raise ConfigurationError(f"--threads must be at least 1, got {threads}")
            config = ExperimentService.load_config(options['config'])
            config = config.override(threads=threads, seed=seed)
            out_dir = out_dir or config.output_dir or settings.LAB["OUTPUT_DIR"]
            sink = ResultSink(out_dir)

            self.stdout.write(f'Running {suite} into {out_dir}...')
            data = ExperimentService.run(suite, config, sink)
        except LabError as e:
            self._fail(suite, out_dir, e.code, e.message, {
                "suite": suite,
                "error": type(e).__name__,
                "invariant": getattr(e, "invariant", None),
                "witness": e.witness,
            })
        except Exception as e:
            logger.error(f"Unexpected error in lab {suite}: {str(e)}")
            logger.error(f"Full traceback: {traceback.format_exc()}")
            self._fail(suite, out_dir, NUMERICAL_FAILURE_CODE, str(e), {
                "suite": suite,
                "error": type(e).__name__,
                "invariant": None,
                "witness": None,
            })

        sink.write_json('report.json', success_report(data, f'{suite} passed'))
        self.stdout.write(self.style.SUCCESS(f'{suite} passed; artifacts in {out_dir}'))

    def _fail(self, suite, out_dir, code, message, data):
        report = error_report(code, message, data)
        target = out_dir or settings.LAB["OUTPUT_DIR"]
        try:
            ResultSink(target).write_json('failure.json', report)
        except TypeError:
            # witness not plain data; keep the report without it
            report["data"]["witness"] = repr(data["witness"])
            ResultSink(target).write_json('failure.json', report)
        style = self.style.WARNING if exit_code_for(report) == 2 else self.style.ERROR
        self.stderr.write(style(f'{suite} failed [{code}]: {message}'))
        raise CommandError(message, returncode=exit_code_for(report))
