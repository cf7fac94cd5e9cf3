import json
import os
import tempfile

from django.test import SimpleTestCase

from aggregator.config import (
    DEFAULT_BENCH_RATIOS, ExperimentConfig, config_from_dict, parse_config, parse_overrides, parse_value
)
from aggregator.errors import ConfigurationError


class ConfigFileTest(SimpleTestCase):
    def write(self, text):
        handle = tempfile.NamedTemporaryFile('w', suffix='.json', delete=False)
        handle.write(text)
        handle.close()
        self.addCleanup(os.remove, handle.name)
        return handle.name

    def test_empty_file_gives_defaults(self):
        config = parse_config(self.write(''))
        self.assertEqual(config, ExperimentConfig())
        self.assertEqual(config.d, 650)
        self.assertEqual(config.resolved_k, 331)
        self.assertEqual(config.resolved_kappa2, 67)

    def test_override_beats_file(self):
        path = self.write(json.dumps({'n': 20, 'scheme': 'fedavg', 'rounds': 3}))
        config = parse_config(path, ['n=30', 'attack=signflip', 'byzantine_fraction=0.2'])
        self.assertEqual(config.n, 30)
        self.assertEqual(config.rounds, 3)
        self.assertEqual(config.attack, 'signflip')
        self.assertEqual(config.byzantine_fraction, 0.2)

    def test_kappa2_too_small_fails_bound_a(self):
        with self.assertRaisesMessage(ConfigurationError, 'FAIL on bound a'):
            parse_config(overrides=['features=999', 'classes=10', 'kappa2=8'])

    def test_unknown_key(self):
        with self.assertRaisesMessage(ConfigurationError, 'Unknown configuration keys: colour'):
            parse_config(self.write(json.dumps({'colour': 'blue'})))

    def test_not_an_object(self):
        with self.assertRaises(ConfigurationError):
            parse_config(self.write('[1, 2]'))
        with self.assertRaises(ConfigurationError):
            parse_config(self.write('{"n": '))


class OverrideTest(SimpleTestCase):
    def test_parse_value(self):
        self.assertEqual(parse_value('3'), 3)
        self.assertEqual(parse_value('0.25'), 0.25)
        self.assertIs(parse_value('false'), False)
        self.assertIsNone(parse_value('null'))
        self.assertEqual(parse_value('[1.0, 0.1]'), [1.0, 0.1])
        self.assertEqual(parse_value('krum'), 'krum')

    def test_malformed_override(self):
        with self.assertRaises(ConfigurationError):
            parse_overrides(['rounds'])

    def test_bench_ratios_become_a_tuple(self):
        config = config_from_dict({'bench_ratios': [1.0, 0.5]})
        self.assertEqual(config.bench_ratios, (1.0, 0.5))
        self.assertEqual(ExperimentConfig().bench_ratios, DEFAULT_BENCH_RATIOS)
        self.assertEqual(config.to_dict()['bench_ratios'], [1.0, 0.5])


class DerivedFieldTest(SimpleTestCase):
    def test_small_keys_need_the_test_flag(self):
        with self.assertRaisesMessage(ConfigurationError, 'insecure_test'):
            ExperimentConfig(kappa1=80).validate()
        with self.assertRaises(ConfigurationError):
            ExperimentConfig(kappa1=8, insecure_test=True).validate()
        ExperimentConfig(kappa1=80, insecure_test=True).validate()

    def test_plain_schemes_skip_key_checks(self):
        ExperimentConfig(scheme='krum', kappa1=8).validate()

    def test_compression(self):
        self.assertTrue(ExperimentConfig().compressed)
        self.assertFalse(ExperimentConfig(compression_ratio=1.0).compressed)
        self.assertFalse(ExperimentConfig(scheme='ours-uncompressed').compressed)
        self.assertEqual(ExperimentConfig(scheme='ours-uncompressed').resolved_k, 650)
        self.assertEqual(ExperimentConfig(k=40).resolved_k, 40)
        with self.assertRaises(ConfigurationError):
            ExperimentConfig(k=651).validate()

    def test_baseline_defaults_follow_the_attacker_count(self):
        config = ExperimentConfig(n=10, byzantine_fraction=0.25)
        self.assertEqual(config.resolved_krum_f, 3)
        self.assertEqual(config.resolved_trim_beta, 3)
        self.assertEqual(ExperimentConfig(krum_f=1).resolved_krum_f, 1)

    def test_range_checks(self):
        for changes in ({'scheme': 'median'}, {'selection_fraction': 1.5}, {'n': 0}, {'transport': 'carrier-pigeon'}):
            with self.subTest(changes=changes):
                with self.assertRaises(ConfigurationError):
                    ExperimentConfig(**changes).validate()

    def test_with_overrides_keeps_the_original(self):
        base = ExperimentConfig()
        changed = base.with_overrides(rounds=5)
        self.assertEqual(base.rounds, 100)
        self.assertEqual(changed.rounds, 5)
