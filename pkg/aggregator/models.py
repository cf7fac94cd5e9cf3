from django.db import models


METRICS_COLUMNS = (
    'round', 'scheme', 'attack', 'byz_frac', 'accuracy', 'loss', 'online_round_ms', 'offline_ms',
    'bytes_c2s', 'bytes_s0s1', 'bytes_s1s0', 'bytes_s2c', 'saturation_count', 'no_trust_flag',
)

BENCHMARK_COLUMNS = (
    'ratio', 'k', 'd', 'n', 'secnorm_ms', 'speedup', 'exponentiations', 'expected_exponentiations',
    'bytes_s0s1', 'closed_form_bytes', 'byte_ratio', 'max_cosine_error',
)


class Experiment(models.Model):
    name = models.CharField(max_length=200)
    kind = models.CharField(max_length=10, default='run', choices=(('run', 'Run'), ('bench', 'Benchmark')))
    scheme = models.CharField(max_length=32)
    attack = models.CharField(max_length=16, default='none')
    config = models.JSONField(default=dict)
    created_date = models.DateTimeField(auto_now_add=True, db_index=True)

    status = models.CharField(max_length=10, default='running', db_index=True)
    error = models.TextField(blank=True)

    def __str__(self):
        return f'{self.name} ({self.scheme}, {self.attack})'


class MetricsRow(models.Model):
    experiment = models.ForeignKey(Experiment, on_delete=models.CASCADE, related_name='metrics')
    round = models.IntegerField()
    scheme = models.CharField(max_length=32)
    attack = models.CharField(max_length=16)
    byz_frac = models.FloatField()
    accuracy = models.FloatField()
    loss = models.FloatField()
    online_round_ms = models.FloatField(default=0)
    offline_ms = models.FloatField(default=0)
    bytes_c2s = models.BigIntegerField(default=0)
    bytes_s0s1 = models.BigIntegerField(default=0)
    bytes_s1s0 = models.BigIntegerField(default=0)
    bytes_s2c = models.BigIntegerField(default=0)
    saturation_count = models.IntegerField(default=0)
    no_trust_flag = models.BooleanField(default=False)

    class Meta:
        ordering = ['round']
        constraints = [
            models.UniqueConstraint(fields=['experiment', 'round', 'scheme'], name='one_row_per_round_scheme'),
        ]

    def __str__(self):
        return f'{self.experiment.name} round {self.round}'


class BenchmarkRow(models.Model):
    experiment = models.ForeignKey(Experiment, on_delete=models.CASCADE, related_name='benchmarks')
    ratio = models.FloatField()
    k = models.IntegerField()
    d = models.IntegerField()
    n = models.IntegerField()
    secnorm_ms = models.FloatField()
    speedup = models.FloatField()
    exponentiations = models.BigIntegerField()
    expected_exponentiations = models.BigIntegerField()
    bytes_s0s1 = models.BigIntegerField()
    closed_form_bytes = models.BigIntegerField()
    byte_ratio = models.FloatField()
    max_cosine_error = models.FloatField()

    class Meta:
        ordering = ['-ratio']

    def __str__(self):
        return f'{self.experiment.name} ratio {self.ratio}'
