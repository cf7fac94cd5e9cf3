from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError

from aggregator.config import parse_config
from aggregator.errors import AggregatorError
from aggregator.runner import bench


class Command(BaseCommand):
    help = 'Measure SecNorm cost and S0-S1 traffic across compression ratios'

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON file of ExperimentConfig fields')
        parser.add_argument('--override', action='append', default=[], metavar='KEY=VALUE')
        parser.add_argument('--output', help='Output directory (defaults to AGGREGATOR_OUTPUT_DIR)')

    def handle(self, *args, **options):
        call_command('migrate', verbosity=0, interactive=False)
        try:
            config = parse_config(options['config'], options['override'])
            result = bench(config, options['output'])
        except (AggregatorError, OSError) as error:
            raise CommandError(str(error))

        for row in result.rows:
            self.stdout.write(
                f'ratio {row.ratio:g}: k={row.k} secnorm={row.secnorm_ms:.1f}ms speedup={row.speedup:.1f}x '
                f'exp={row.exponentiations}/{row.expected_exponentiations} '
                f'bytes={row.bytes_s0s1}/{row.closed_form_bytes} max_cos_err={row.max_cosine_error:.4f}')
        self.stdout.write(self.style.SUCCESS(f'Benchmark written to {result.csv_path}'))
