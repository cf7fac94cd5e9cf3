"""
Experiment orchestration: one MetricsRow per round in the database, mirrored
to a CSV file, per-round transcripts and an accuracy chart in the output
directory. Benchmarks go through the same protocol code path with one round.
"""
from dataclasses import dataclass, field
import logging
import os

from django.conf import settings
import djqscsv
import numpy as np
import pygal
from pygal.style import LightColorizedStyle
import sentry_sdk

from aggregator.errors import AggregatorError, RoundError
from aggregator.jl import distortion_trials
from aggregator.learning import Model, evaluate
from aggregator.models import BENCHMARK_COLUMNS, METRICS_COLUMNS, BenchmarkRow, Experiment, MetricsRow
from aggregator.oracle import aggregate_plain, fltrust_plain
from aggregator.protocol import initialize, run_round, select_clients
from aggregator.protocol.entities import ClientState, reference_gradient_at
from aggregator.protocol.rounds import build_data, poisoned_gradients
from aggregator.attacks import AttackPlan
from aggregator.helpers import derive_int, stopwatch
from aggregator.transport.accounting import closed_form_s0s1_bits, expected_exponentiations


logger = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    experiment: Experiment
    output_dir: str
    metrics_path: str
    chart_path: str = None
    transcript_paths: list = field(default_factory=list)
    error: str = ''

    @property
    def failed(self):
        return bool(self.error)


def output_directory(name, base=None):
    path = os.path.join(base or settings.AGGREGATOR_OUTPUT_DIR, name)
    os.makedirs(path, exist_ok=True)
    return path


def write_metrics_csv(experiment, path):
    rows = MetricsRow.objects.filter(experiment=experiment).order_by('round').values(*METRICS_COLUMNS)
    with open(path, 'wb') as csv_file:
        djqscsv.write_csv(rows, csv_file, use_verbose_names=False, field_order=list(METRICS_COLUMNS))
    return path


def write_benchmark_csv(experiment, path):
    rows = BenchmarkRow.objects.filter(experiment=experiment).values(*BENCHMARK_COLUMNS)
    with open(path, 'wb') as csv_file:
        djqscsv.write_csv(rows, csv_file, use_verbose_names=False, field_order=list(BENCHMARK_COLUMNS))
    return path


def render_accuracy_chart(experiment, path):
    rows = list(MetricsRow.objects.filter(experiment=experiment).order_by('round').values('round', 'accuracy'))
    chart = pygal.Line(height=300, show_legend=False, style=LightColorizedStyle)
    chart.title = f'{experiment.scheme} / {experiment.attack}: test accuracy'
    chart.add('Accuracy', [row['accuracy'] for row in rows])
    chart.x_labels = [str(row['round']) for row in rows]
    chart.render_to_file(path)
    return path


def render_speedup_chart(experiment, path):
    rows = list(BenchmarkRow.objects.filter(experiment=experiment).values('ratio', 'speedup'))
    chart = pygal.Bar(height=300, show_legend=False, style=LightColorizedStyle)
    chart.title = 'SecNorm speedup over the uncompressed protocol'
    chart.add('Speedup', [row['speedup'] for row in rows])
    chart.x_labels = [str(row['ratio']) for row in rows]
    chart.render_to_file(path)
    return path


def report_round(experiment, round, duration_ms, error=''):
    """Sentry events for failed and slow rounds, tagged with the experiment."""
    threshold_ms = settings.LONG_ROUND_SECONDS * 1000
    if not error and duration_ms <= threshold_ms:
        return
    with sentry_sdk.new_scope() as scope:
        scope.set_extra('experiment', experiment.name)
        scope.set_extra('scheme', experiment.scheme)
        scope.set_extra('attack', experiment.attack)
        scope.set_extra('round', round)
        scope.set_extra('round_duration_ms', duration_ms)
        if error:
            sentry_sdk.capture_message(f'Round {round} failed: {error}', level='error')
        else:
            sentry_sdk.capture_message(f'Long running round detected: {duration_ms / 1000:.2f}s', level='warning')


class PlainFederation:
    """Clients and the global model for the plaintext baselines; no masks, no keys."""

    def __init__(self, config, data=None):
        data = data or build_data(config)
        self.config = config
        self.model_spec = config.model_spec
        self.attack_plan = AttackPlan.build(
            config.attack, config.byzantine_fraction, config.n, config.attack_seed, config.scaling_factor)
        self.W = Model.initialize(self.model_spec, derive_int(config.protocol_seed, 'model')).W
        self.trusted = data.trusted
        self.test_set = data.test
        self.clients = {}
        for client_id, shard in enumerate(data.shards):
            shard = shard.with_labels(self.attack_plan.poison_labels(client_id, shard.labels, shard.classes))
            self.clients[client_id] = ClientState(
                client_id=client_id, W=self.W, mask_seed=None, shard=shard, params=None,
                model_spec=self.model_spec, batch_size=config.batch_size, batch_seed=config.data_seed)

    def global_model(self):
        return Model(self.model_spec, self.W)

    def run_round(self, round):
        """One plaintext round; returns (selected, no_trust)."""
        config = self.config
        selected = select_clients(config, round)
        if not selected:
            return selected, False
        gradients = poisoned_gradients(self, round, selected)
        stacked = [gradients[cid] for cid in selected]
        g_standard = None
        no_trust = False
        if config.scheme == 'fltrust-plain':
            g_standard = reference_gradient_at(self.model_spec, self.W, self.trusted, config.data_seed, round)
            if not np.any(g_standard):
                raise RoundError('Reference gradient is zero; trust scores are undefined')
            no_trust = not np.any(fltrust_plain(stacked, g_standard).weights)
        g_global = aggregate_plain(
            config.scheme, stacked, g_standard, config.resolved_krum_f, config.resolved_trim_beta)
        self.W = self.W - config.learning_rate * g_global
        for client in self.clients.values():
            client.W = self.W
        return selected, no_trust

    def close(self):
        pass


def run_experiment(config, output_dir=None, data=None):
    config.validate()
    directory = output_directory(config.name, output_dir)
    experiment = Experiment.objects.create(
        name=config.name, kind='run', scheme=config.scheme, attack=config.attack, config=config.to_dict())
    result = ExperimentResult(
        experiment=experiment, output_dir=directory, metrics_path=os.path.join(directory, 'metrics.csv'))
    logger.info(f'Starting {config.name}: {config.scheme}, {config.attack} at {config.byzantine_fraction:.0%}')

    federation = None
    try:
        federation = initialize(config, data) if config.secure else PlainFederation(config, data)
        offline_ms = getattr(federation, 'offline_ms', 0.0) if config.timings else 0.0

        for round in range(config.rounds):
            row = MetricsRow(
                experiment=experiment, round=round, scheme=config.scheme, attack=config.attack,
                byz_frac=config.byzantine_fraction, offline_ms=offline_ms)

            if config.secure:
                transcript = run_round(federation, round)
                duration_ms, error = transcript.online_ms, transcript.error
                link_bytes = transcript.link_bytes()
                row.bytes_c2s, row.bytes_s0s1 = link_bytes['c2s'], link_bytes['s0s1']
                row.bytes_s1s0, row.bytes_s2c = link_bytes['s1s0'], link_bytes['s2c']
                row.saturation_count = transcript.saturated
                row.no_trust_flag = transcript.no_trust
                if config.transcripts:
                    path = os.path.join(directory, 'transcripts', f'round-{round:04d}.json')
                    os.makedirs(os.path.dirname(path), exist_ok=True)
                    transcript.save(path)
                    result.transcript_paths.append(path)
            else:
                error = ''
                with stopwatch() as timer:
                    try:
                        _, row.no_trust_flag = federation.run_round(round)
                    except AggregatorError as exc:
                        error = f'{type(exc).__name__}: {exc}'
                duration_ms = timer['ms']

            row.accuracy, row.loss = evaluate(federation.global_model(), federation.test_set)
            row.online_round_ms = duration_ms if config.timings else 0.0
            report_round(experiment, round, duration_ms, error)

            if error:
                # The failed round's metrics are not written; earlier rounds are flushed below
                result.error = f'Round {round}: {error}'
                logger.error(f'{config.name} stopped at round {round}: {error}')
                break
            row.save()
            logger.info(f'{config.name} round {round}: accuracy {row.accuracy:.4f}, loss {row.loss:.4f}')
    except AggregatorError as exc:
        result.error = f'{type(exc).__name__}: {exc}'
        logger.error(f'{config.name} failed: {result.error}')
    finally:
        if federation is not None:
            federation.close()
        experiment.status = 'failed' if result.error else 'done'
        experiment.error = result.error
        experiment.save()
        write_metrics_csv(experiment, result.metrics_path)
        if MetricsRow.objects.filter(experiment=experiment).exists():
            result.chart_path = render_accuracy_chart(experiment, os.path.join(directory, 'accuracy.svg'))

    return result


@dataclass
class BenchmarkResult:
    experiment: Experiment
    rows: list
    csv_path: str
    chart_path: str = None


def bench(config, output_dir=None):
    """SecNorm cost, ciphertext traffic and JL error per compression ratio, one round each."""
    directory = output_directory(f'{config.name}-bench', output_dir)
    experiment = Experiment.objects.create(
        name=config.name, kind='bench', scheme='ours-compressed', attack='none', config=config.to_dict())
    measurements = []
    for ratio in config.bench_ratios:
        uncompressed = ratio >= 1
        variant = config.with_overrides(
            scheme='ours-uncompressed' if uncompressed else 'ours-compressed', compression_ratio=ratio, k=None,
            rounds=1, attack='none', byzantine_fraction=0.0, selection_fraction=1.0).validate()
        federation = initialize(variant)
        try:
            transcript = run_round(federation, 0)
        finally:
            federation.close()
        if transcript.failed:
            raise RoundError(f'Benchmark round at ratio {ratio} failed: {transcript.error}')

        k, d, n = federation.k, federation.d, variant.n
        link_bytes = transcript.link_bytes()
        measured = federation.offline_bytes['s1s0'] + link_bytes['s0s1'] + link_bytes['s1s0']
        closed_form = closed_form_s0s1_bits(k, n, d, variant.kappa1, 8 * federation.s1.params.width) // 8
        cosine_error = 0.0 if uncompressed else distortion_trials(
            d, k, config.bench_trials, derive_int(config.protocol_seed, 'bench', ratio)).max_cosine_error
        measurements.append(dict(
            ratio=ratio, k=k, d=d, n=n, secnorm_ms=transcript.secnorm_ms,
            exponentiations=transcript.secnorm_exponentiations,
            expected_exponentiations=expected_exponentiations(k, n),
            bytes_s0s1=measured, closed_form_bytes=closed_form, byte_ratio=measured / closed_form,
            max_cosine_error=cosine_error))
        logger.info(
            f'ratio {ratio}: k={k}, SecNorm {transcript.secnorm_ms:.1f} ms, '
            f'{transcript.secnorm_exponentiations} exponentiations, {measured} S0-S1 bytes')

    baseline = next((m for m in measurements if m['ratio'] >= 1), measurements[0] if measurements else None)
    rows = []
    for measurement in measurements:
        speedup = baseline['secnorm_ms'] / measurement['secnorm_ms'] if measurement['secnorm_ms'] else 0.0
        if measurement is baseline:
            speedup = 1.0
        rows.append(BenchmarkRow.objects.create(experiment=experiment, speedup=speedup, **measurement))

    experiment.status = 'done'
    experiment.save()
    result = BenchmarkResult(
        experiment=experiment, rows=rows, csv_path=write_benchmark_csv(experiment, os.path.join(directory, 'bench.csv')))
    if rows:
        result.chart_path = render_speedup_chart(experiment, os.path.join(directory, 'speedup.svg'))
    return result
