from django.core.management.base import BaseCommand, CommandError

from aggregator.selftest import FAULTS, selftest


class Command(BaseCommand):
    help = 'Run the invariant checks of every module at tiny parameters'

    def add_arguments(self, parser):
        parser.add_argument('--fault', choices=FAULTS, help='Inject a fault into one module')
        parser.add_argument('--seed', type=int, default=0)

    def handle(self, *args, **options):
        report = selftest(seed=options['seed'], fault=options['fault'])
        for result in report.results:
            style = self.style.SUCCESS if result.passed else self.style.ERROR
            self.stdout.write(style(result.line()))
        if not report.passed:
            raise CommandError(f'selftest failed: {", ".join(report.failed_modules)}')
        self.stdout.write(self.style.SUCCESS('selftest: PASS'))
