from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError

from aggregator.config import parse_config
from aggregator.errors import AggregatorError
from aggregator.runner import run_experiment


class Command(BaseCommand):
    help = 'Run one federated training experiment and write metrics, transcripts and an accuracy chart'

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON file of ExperimentConfig fields')
        parser.add_argument('--override', action='append', default=[], metavar='KEY=VALUE',
                            help='Override a config field; values are parsed as JSON when possible')
        parser.add_argument('--output', help='Output directory (defaults to AGGREGATOR_OUTPUT_DIR)')

    def handle(self, *args, **options):
        try:
            config = parse_config(options['config'], options['override'])
        except (AggregatorError, OSError) as error:
            raise CommandError(str(error))

        call_command('migrate', verbosity=0, interactive=False)
        result = run_experiment(config, options['output'])

        self.stdout.write(f'Metrics: {result.metrics_path}')
        if result.chart_path:
            self.stdout.write(f'Chart: {result.chart_path}')
        if result.failed:
            raise CommandError(f'{config.name} failed, partial metrics written: {result.error}')

        last = result.experiment.metrics.last()
        summary = f'{config.name}: {config.rounds} rounds'
        if last is not None:
            summary += f', final accuracy {last.accuracy:.4f}'
        self.stdout.write(self.style.SUCCESS(summary))
