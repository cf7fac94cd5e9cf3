import csv
from io import StringIO
import os
import shutil
import tempfile
from unittest import mock

from django.core.management import CommandError, call_command
from django.test import TestCase, TransactionTestCase, override_settings, tag

from aggregator import paillier
from aggregator.config import ExperimentConfig
from aggregator.errors import DecryptionError
from aggregator.models import BENCHMARK_COLUMNS, METRICS_COLUMNS, Experiment, MetricsRow
from aggregator.runner import bench, run_experiment
from aggregator.transport.accounting import expected_exponentiations


def tiny_config(**overrides):
    values = dict(
        name='runner-test', n=5, rounds=3, selection_fraction=1.0, features=4, classes=3,
        samples=200, test_samples=50, trusted_samples=20, kappa1=80, insecure_test=True, k=8,
        learning_rate=0.5,
    )
    values.update(overrides)
    return ExperimentConfig(**values).validate()


def read_csv(path):
    with open(path, encoding='utf-8-sig', newline='') as handle:
        return list(csv.reader(handle))


class OutputDirMixin:
    def make_output_dir(self):
        path = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, path, ignore_errors=True)
        return path


class RunExperimentTest(OutputDirMixin, TestCase):
    def test_plain_run_writes_one_row_per_round(self):
        result = run_experiment(tiny_config(scheme='fedavg'), self.make_output_dir())
        self.assertFalse(result.failed)
        self.assertEqual(result.experiment.status, 'done')
        rows = read_csv(result.metrics_path)
        self.assertEqual(rows[0], list(METRICS_COLUMNS))
        self.assertEqual([row[0] for row in rows[1:]], ['0', '1', '2'])
        self.assertTrue(os.path.exists(result.chart_path))
        self.assertEqual(result.experiment.metrics.count(), 3)

    def test_zero_rounds_writes_a_header_only(self):
        result = run_experiment(tiny_config(rounds=0), self.make_output_dir())
        self.assertEqual(read_csv(result.metrics_path), [list(METRICS_COLUMNS)])
        self.assertIsNone(result.chart_path)

    def test_secure_run_records_traffic_and_transcripts(self):
        config = tiny_config(rounds=2)
        result = run_experiment(config, self.make_output_dir())
        self.assertFalse(result.failed, result.error)
        self.assertEqual(len(result.transcript_paths), 2)
        for path in result.transcript_paths:
            self.assertTrue(os.path.exists(path))
        for row in MetricsRow.objects.filter(experiment=result.experiment):
            self.assertGreater(row.bytes_c2s, 0)
            self.assertGreater(row.bytes_s0s1, 0)
            self.assertGreater(row.bytes_s1s0, 0)
            self.assertGreater(row.bytes_s2c, 0)
        self.assertTrue(result.chart_path.endswith('accuracy.svg'))

    def test_runs_without_timings_are_byte_identical(self):
        config = tiny_config(rounds=2, timings=False, transcripts=False)
        first = run_experiment(config, self.make_output_dir())
        second = run_experiment(config, self.make_output_dir())
        with open(first.metrics_path, 'rb') as a, open(second.metrics_path, 'rb') as b:
            self.assertEqual(a.read(), b.read())
        self.assertEqual(first.transcript_paths, [])

    def test_uncompressed_protocol_tracks_the_plaintext_baseline(self):
        common = dict(rounds=3, test_samples=200, k=None, timings=False, transcripts=False)
        secure = run_experiment(tiny_config(scheme='ours-uncompressed', **common), self.make_output_dir())
        plain = run_experiment(tiny_config(scheme='fltrust-plain', **common), self.make_output_dir())
        secure_rows = list(secure.experiment.metrics.values_list('accuracy', flat=True))
        plain_rows = list(plain.experiment.metrics.values_list('accuracy', flat=True))
        self.assertEqual(len(secure_rows), 3)
        for ours, baseline in zip(secure_rows, plain_rows):
            self.assertAlmostEqual(ours, baseline, delta=0.005)

    @mock.patch('aggregator.runner.sentry_sdk.capture_message')
    def test_failed_round_is_reported(self, capture_message):
        with mock.patch.object(paillier, 'decrypt', side_effect=DecryptionError('corrupted')):
            result = run_experiment(tiny_config(rounds=2), self.make_output_dir())
        self.assertTrue(result.failed)
        self.assertIn('DecryptionError', result.error)
        experiment = Experiment.objects.get(pk=result.experiment.pk)
        self.assertEqual(experiment.status, 'failed')
        self.assertEqual(experiment.metrics.count(), 0)
        self.assertEqual(read_csv(result.metrics_path), [list(METRICS_COLUMNS)])
        capture_message.assert_called_once()
        self.assertEqual(capture_message.call_args.kwargs['level'], 'error')

    @override_settings(LONG_ROUND_SECONDS=0)
    @mock.patch('aggregator.runner.sentry_sdk.capture_message')
    def test_slow_rounds_are_reported(self, capture_message):
        run_experiment(tiny_config(scheme='fedavg', rounds=2), self.make_output_dir())
        self.assertEqual(capture_message.call_count, 2)
        self.assertEqual(capture_message.call_args.kwargs['level'], 'warning')

    @mock.patch('aggregator.runner.sentry_sdk.capture_message')
    def test_fast_rounds_are_not_reported(self, capture_message):
        run_experiment(tiny_config(scheme='krum', byzantine_fraction=0.2, attack='gaussian'), self.make_output_dir())
        capture_message.assert_not_called()


class BenchTest(OutputDirMixin, TestCase):
    def test_ratio_grid(self):
        config = tiny_config(n=3, jl_epsilon=0.9, jl_delta=0.5, bench_ratios=(1.0, 0.5), k=None, bench_trials=20)
        result = bench(config, self.make_output_dir())
        self.assertEqual([row.ratio for row in result.rows], [1.0, 0.5])
        baseline, compressed = result.rows
        self.assertEqual(baseline.speedup, 1.0)
        self.assertEqual(baseline.k, 15)
        self.assertEqual(compressed.k, 8)
        self.assertEqual(baseline.max_cosine_error, 0.0)
        for row in result.rows:
            self.assertEqual(row.exponentiations, expected_exponentiations(row.k, 3))
            self.assertEqual(row.exponentiations, row.expected_exponentiations)
            self.assertGreater(row.bytes_s0s1, 0)
        self.assertEqual(read_csv(result.csv_path)[0], list(BENCHMARK_COLUMNS))
        self.assertTrue(os.path.exists(result.chart_path))

    @tag('slow')
    def test_compression_at_full_key_size(self):
        config = tiny_config(
            name='bench-512', n=2, features=199, classes=10, kappa1=512, insecure_test=False, k=None,
            jl_epsilon=0.9, jl_delta=0.5, bench_ratios=(1.0, 0.01), bench_trials=5)
        baseline, compressed = bench(config, self.make_output_dir()).rows
        self.assertEqual((baseline.d, baseline.k, compressed.k), (2000, 2000, 20))
        self.assertEqual(baseline.exponentiations, 2000 * 2 + 2)
        self.assertEqual(compressed.exponentiations, 20 * 2 + 2)
        # measured traffic only adds framing to the closed form
        for row in (baseline, compressed):
            self.assertGreater(row.byte_ratio, 0.99)
            self.assertLess(row.byte_ratio, 1.05)
        self.assertGreaterEqual(compressed.speedup, 10)


@tag('slow')
class RobustnessTest(OutputDirMixin, TestCase):
    ATTACKS = ('signflip', 'labelflip', 'gaussian', 'scaling', 'minmax', 'minsum')

    def final_accuracy(self, **overrides):
        config = tiny_config(
            n=10, rounds=40, features=64, classes=10, samples=2000, test_samples=1000, trusted_samples=100,
            k=None, timings=False, transcripts=False, **overrides)
        result = run_experiment(config, self.make_output_dir())
        self.assertFalse(result.failed, result.error)
        return result.experiment.metrics.order_by('round').last().accuracy

    def test_secure_rounds_track_plaintext_fltrust_under_attack(self):
        for attack in self.ATTACKS:
            with self.subTest(attack=attack):
                ours = self.final_accuracy(scheme='ours-compressed', attack=attack, byzantine_fraction=0.4)
                plain = self.final_accuracy(scheme='fltrust-plain', attack=attack, byzantine_fraction=0.4)
                self.assertAlmostEqual(ours, plain, delta=0.02)

    def test_benign_secure_run_matches_fedavg(self):
        ours = self.final_accuracy(scheme='ours-compressed')
        fedavg = self.final_accuracy(scheme='fedavg')
        self.assertAlmostEqual(ours, fedavg, delta=0.01)


class CommandTest(OutputDirMixin, TransactionTestCase):
    def test_run_command(self):
        out = StringIO()
        call_command(
            'run', override=['scheme=fedavg', 'n=4', 'rounds=2', 'features=4', 'classes=3', 'samples=80',
                             'test_samples=20', 'trusted_samples=10', 'name="command-test"'],
            output=self.make_output_dir(), stdout=out)
        self.assertIn('metrics.csv', out.getvalue())
        self.assertIn('command-test: 2 rounds', out.getvalue())

    def test_run_command_rejects_bad_config(self):
        with self.assertRaises(CommandError):
            call_command('run', override=['rounds'], stdout=StringIO())

    def test_selftest_command(self):
        out = StringIO()
        call_command('selftest', stdout=out)
        self.assertIn('selftest: PASS', out.getvalue())
        with self.assertRaisesMessage(CommandError, 'paillier'):
            call_command('selftest', fault='paillier', stdout=StringIO())
