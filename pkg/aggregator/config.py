"""
Experiment configuration: a JSON object whose keys are the ExperimentConfig
fields, plus `key=value` overrides from the command line. Unknown keys are an
error. Values left out take the defaults below.
"""
from dataclasses import asdict, dataclass, field, fields, replace
import json
import logging
import math

from aggregator.attacks import ATTACKS, DEFAULT_SCALING_FACTOR
from aggregator.encoding import (
    DEFAULT_CLIP, DEFAULT_F, DEFAULT_FW, FixedPointParams, modulus_bits, suggest_kappa2, validate_parameters
)
from aggregator.errors import ConfigurationError
from aggregator.jl import compressed_dimension
from aggregator.learning import ModelSpec
from aggregator.paillier import MIN_SECURE_KAPPA1, MIN_TEST_KAPPA1
from aggregator.transport.network import TRANSPORTS


logger = logging.getLogger(__name__)

SECURE_SCHEMES = ('ours-compressed', 'ours-uncompressed')
PLAIN_SCHEMES = ('fltrust-plain', 'fedavg', 'krum', 'trimmed-mean')
SCHEMES = SECURE_SCHEMES + PLAIN_SCHEMES
PARTITIONS = ('iid', 'label-skew')
DEFAULT_BENCH_RATIOS = (1.0, 0.01, 0.001, 0.0001)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = 'experiment'
    scheme: str = 'ours-compressed'

    # Federation
    n: int = 50
    rounds: int = 100
    selection_fraction: float = 0.1

    # Data and model
    features: int = 64
    classes: int = 10
    hidden: int = 0
    samples: int = 5000
    test_samples: int = 1000
    trusted_samples: int = 100
    separation: float = 3.0
    partition: str = 'iid'
    alpha: float = 0.5
    batch_size: int = 32
    learning_rate: float = 0.1

    # Cryptography and encoding; kappa2 None means the smallest passing size
    kappa1: int = 512
    insecure_test: bool = False
    kappa2: int = None
    f: int = DEFAULT_F
    fw: int = DEFAULT_FW
    clip: float = DEFAULT_CLIP

    # Compression; an explicit k wins over the ratio
    compression_ratio: float = 0.01
    k: int = None
    jl_epsilon: float = 0.2
    jl_delta: float = 0.01

    # Attack
    attack: str = 'none'
    byzantine_fraction: float = 0.0
    scaling_factor: float = DEFAULT_SCALING_FACTOR

    # Baselines
    krum_f: int = None
    trim_beta: int = None

    # Seeds
    data_seed: int = 0
    protocol_seed: int = 1
    attack_seed: int = 2

    transport: str = 'memory'
    timings: bool = True
    transcripts: bool = True

    # Benchmark grid
    bench_ratios: tuple = field(default=DEFAULT_BENCH_RATIOS)
    bench_trials: int = 100

    @property
    def model_spec(self):
        return ModelSpec(self.features, self.classes, self.hidden)

    @property
    def d(self):
        return self.model_spec.dim

    @property
    def secure(self):
        return self.scheme in SECURE_SCHEMES

    @property
    def compressed(self):
        if self.scheme != 'ours-compressed':
            return False
        return self.k is not None or self.compression_ratio < 1

    @property
    def resolved_k(self):
        if not self.compressed:
            return self.d
        if self.k is not None:
            return self.k
        return compressed_dimension(self.d, self.compression_ratio, self.jl_epsilon, self.jl_delta)

    @property
    def resolved_kappa2(self):
        if self.kappa2 is not None:
            return self.kappa2
        return suggest_kappa2(
            self.d, self.resolved_k, self.n, self.f, self.fw, self.clip, compressed=self.compressed)

    @property
    def resolved_krum_f(self):
        if self.krum_f is not None:
            return self.krum_f
        return max(0, math.ceil(self.byzantine_fraction * self.n))

    @property
    def resolved_trim_beta(self):
        if self.trim_beta is not None:
            return self.trim_beta
        return max(0, math.ceil(self.byzantine_fraction * self.n))

    def fixed_point_params(self):
        return FixedPointParams.from_kappa2(self.resolved_kappa2, f=self.f, fw=self.fw, clip=self.clip)

    def validation_report(self):
        return validate_parameters(
            self.d, self.resolved_k, self.n, self.fixed_point_params(), modulus_bits(self.kappa1),
            compressed=self.compressed)

    def validate(self):
        checks = [
            (self.scheme in SCHEMES, f'scheme must be one of {SCHEMES}'),
            (self.attack in ATTACKS, f'attack must be one of {ATTACKS}'),
            (self.transport in TRANSPORTS, f'transport must be one of {TRANSPORTS}'),
            (self.partition in PARTITIONS, f'partition must be one of {PARTITIONS}'),
            (self.n >= 1, 'n must be at least 1'),
            (self.rounds >= 0, 'rounds must be non-negative'),
            (0 <= self.selection_fraction <= 1, 'selection_fraction must lie in [0, 1]'),
            (0 <= self.byzantine_fraction <= 1, 'byzantine_fraction must lie in [0, 1]'),
            (self.samples >= self.n, 'samples must be at least n'),
            (self.trusted_samples >= 1, 'trusted_samples must be at least 1'),
            (self.test_samples >= 1, 'test_samples must be at least 1'),
            (self.batch_size >= 1, 'batch_size must be at least 1'),
            (self.k is None or 1 <= self.k <= self.d, f'k must lie in [1, d={self.d}]'),
            (self.compression_ratio > 0, 'compression_ratio must be positive'),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)

        if not self.secure:
            return self
        if self.kappa1 < MIN_TEST_KAPPA1 or (self.kappa1 < MIN_SECURE_KAPPA1 and not self.insecure_test):
            raise ConfigurationError(
                f'kappa1={self.kappa1} needs insecure_test (allowed down to {MIN_TEST_KAPPA1})')
        report = self.validation_report()
        if not report:
            raise ConfigurationError(f'Parameter validation {report.message}')
        logger.info(f'{self.name}: kappa2={self.resolved_kappa2}, k={self.resolved_k}, {report.message}')
        return self

    def with_overrides(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        data = asdict(self)
        data['bench_ratios'] = list(self.bench_ratios)
        return data


FIELD_NAMES = {item.name for item in fields(ExperimentConfig)}


def parse_value(raw):
    """Override values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(overrides):
    values = {}
    for item in overrides or ():
        key, sep, raw = item.partition('=')
        if not sep:
            raise ConfigurationError(f'Override {item!r} is not of the form key=value')
        values[key.strip()] = parse_value(raw.strip())
    return values


def config_from_dict(values):
    unknown = sorted(set(values) - FIELD_NAMES)
    if unknown:
        raise ConfigurationError(f'Unknown configuration keys: {", ".join(unknown)}')
    values = dict(values)
    if 'bench_ratios' in values:
        values['bench_ratios'] = tuple(values['bench_ratios'])
    return ExperimentConfig(**values)


def parse_config(path=None, overrides=()):
    values = {}
    if path:
        with open(path) as handle:
            text = handle.read()
        if text.strip():
            try:
                values = json.loads(text)
            except json.JSONDecodeError as error:
                raise ConfigurationError(f'{path} is not valid JSON: {error}')
            if not isinstance(values, dict):
                raise ConfigurationError(f'{path} must hold a JSON object')
    values.update(parse_overrides(overrides))
    return config_from_dict(values).validate()
