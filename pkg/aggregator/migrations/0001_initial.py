from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='Experiment',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=200)),
                ('kind', models.CharField(choices=[('run', 'Run'), ('bench', 'Benchmark')], default='run', max_length=10)),
                ('scheme', models.CharField(max_length=32)),
                ('attack', models.CharField(default='none', max_length=16)),
                ('config', models.JSONField(default=dict)),
                ('created_date', models.DateTimeField(auto_now_add=True, db_index=True)),
                ('status', models.CharField(db_index=True, default='running', max_length=10)),
                ('error', models.TextField(blank=True)),
            ],
        ),
        migrations.CreateModel(
            name='MetricsRow',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('round', models.IntegerField()),
                ('scheme', models.CharField(max_length=32)),
                ('attack', models.CharField(max_length=16)),
                ('byz_frac', models.FloatField()),
                ('accuracy', models.FloatField()),
                ('loss', models.FloatField()),
                ('online_round_ms', models.FloatField(default=0)),
                ('offline_ms', models.FloatField(default=0)),
                ('bytes_c2s', models.BigIntegerField(default=0)),
                ('bytes_s0s1', models.BigIntegerField(default=0)),
                ('bytes_s1s0', models.BigIntegerField(default=0)),
                ('bytes_s2c', models.BigIntegerField(default=0)),
                ('saturation_count', models.IntegerField(default=0)),
                ('no_trust_flag', models.BooleanField(default=False)),
                ('experiment', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='aggregator.experiment')),
            ],
            options={
                'ordering': ['round'],
            },
        ),
        migrations.AddConstraint(
            model_name='metricsrow',
            constraint=models.UniqueConstraint(fields=('experiment', 'round', 'scheme'), name='one_row_per_round_scheme'),
        ),
        migrations.CreateModel(
            name='BenchmarkRow',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('ratio', models.FloatField()),
                ('k', models.IntegerField()),
                ('d', models.IntegerField()),
                ('n', models.IntegerField()),
                ('secnorm_ms', models.FloatField()),
                ('speedup', models.FloatField()),
                ('exponentiations', models.BigIntegerField()),
                ('expected_exponentiations', models.BigIntegerField()),
                ('bytes_s0s1', models.BigIntegerField()),
                ('closed_form_bytes', models.BigIntegerField()),
                ('byte_ratio', models.FloatField()),
                ('max_cosine_error', models.FloatField()),
                ('experiment', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='benchmarks', to='aggregator.experiment')),
            ],
            options={
                'ordering': ['-ratio'],
            },
        ),
    ]
