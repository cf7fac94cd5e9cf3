"""
Invariant checks over every module at tiny parameters (insecure test keys).
Each check is deterministic given the seed, so two runs print the same report.
"""
from dataclasses import dataclass, field
import logging
import math
from unittest import mock

import numpy as np

from aggregator import paillier
from aggregator.attacks import label_flip, sign_flip
from aggregator.config import ExperimentConfig
from aggregator.encoding import (
    FixedPointParams, dequantize, quantize, validate_parameters
)
from aggregator.errors import AggregatorError
from aggregator.helpers import derive_int, derive_seed, seeded_random
from aggregator.jl import ProjectionMatrix, project_mod_q, required_dimension
from aggregator.learning import Model, ModelSpec, generate_synthetic
from aggregator.masking import MaskSeed, apply_mask, derive_mask, unmask
from aggregator.oracle import (
    construct_equivalent_gradient, fltrust_plain, masked_uniformity_pvalues, trimmed_mean_plain
)
from aggregator.protocol import audit_privacy, initialize, replay_round, run_round
from aggregator.protocol.rounds import _frames_of
from aggregator.transport import messages
from aggregator.transport.frames import MsgType
from aggregator.transport.network import S0, Network, client_name


logger = logging.getLogger(__name__)

FAULTS = ('paillier',)
SELFTEST_KAPPA1 = 16
PROTOCOL_KAPPA1 = 80


class CheckFailed(AggregatorError):
    pass


def expect(condition, message):
    if not condition:
        raise CheckFailed(message)


@dataclass
class CheckResult:
    module: str
    passed: bool
    detail: str

    def line(self):
        return f'{"PASS" if self.passed else "FAIL"} {self.module:<10} {self.detail}'


@dataclass
class SelftestReport:
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(result.passed for result in self.results)

    @property
    def failed_modules(self):
        return [result.module for result in self.results if not result.passed]

    def lines(self):
        summary = 'PASS' if self.passed else f'FAIL ({", ".join(self.failed_modules)})'
        return [result.line() for result in self.results] + [f'selftest: {summary}']


def check_paillier(seed):
    rng = seeded_random(seed, 'selftest-paillier')
    pk, sk = paillier.keygen(SELFTEST_KAPPA1, rng=rng, insecure_test=True)
    cases = 50
    for _ in range(cases):
        a, b, k = rng.randrange(pk.N), rng.randrange(pk.N), rng.randrange(pk.N)
        ca, cb = paillier.encrypt(a, pk, rng), paillier.encrypt(b, pk, rng)
        expect(paillier.decrypt(ca, sk, pk) == a, f'decrypt(encrypt({a})) != {a}')
        expect(paillier.decrypt(paillier.add_ct([ca, cb], pk), sk, pk) == (a + b) % pk.N, 'additive homomorphism')
        expect(paillier.decrypt(paillier.scalar_mul(ca, k, pk), sk, pk) == a * k % pk.N, 'scalar homomorphism')
    return f'{cases} encrypt/add/scalar cases at kappa1={SELFTEST_KAPPA1}'


def check_encoding(seed):
    params = FixedPointParams.from_kappa2(64)
    rng = np.random.default_rng(derive_int(seed, 'selftest-encoding'))
    x = rng.uniform(-params.clip, params.clip, size=200)
    qv, saturated = quantize(x, params)
    error = float(np.max(np.abs(dequantize(qv) - x)))
    expect(saturated == 0, 'values within clip were reported saturated')
    expect(error <= 2.0 ** (-params.f - 1), f'round-trip error {error} above half an ulp')

    big = FixedPointParams.from_kappa2(128)
    expect(validate_parameters(10 ** 4, 331, 50, big, 1024), 'd=10^4, k=331, kappa2=128 should pass')
    small = FixedPointParams(q=1 << 8, f=0, clip=1.0)
    report = validate_parameters(10 ** 4, 331, 50, small, 1024)
    expect(not report and report.failed_bound == 'a', 'kappa2=8 at d=10^4 should fail bound (a)')
    return '200 quantize round trips, validator PASS and FAIL cases'


def check_jl(seed):
    expect(required_dimension(0.2, 0.01) == 331, 'required_dimension(0.2, 0.01) != 331')
    rng = np.random.default_rng(derive_int(seed, 'selftest-jl'))
    params = FixedPointParams.from_kappa2(64)
    entries = rng.choice([-1, 1], size=(5, 12))
    values = rng.integers(-1000, 1000, size=12)
    projected = project_mod_q(ProjectionMatrix.from_entries(entries), quantize(values / params.scale, params)[0])
    expected = [int(v) % params.q for v in entries.astype(object) @ values.astype(object)]
    expect([int(v) for v in projected.residues] == expected, 'project_mod_q disagrees with integer product')
    return 'dimension bound and exact projection mod q'


def check_masking(seed):
    params = FixedPointParams.from_kappa2(64)
    mask_seed = MaskSeed(0, derive_seed(seed, 'selftest-mask'))
    expect(derive_mask(mask_seed, 3, 8, params) == derive_mask(mask_seed, 3, 8, params), 'mask not deterministic')
    expect(derive_mask(mask_seed, 3, 8, params) != derive_mask(mask_seed, 4, 8, params), 'masks repeat across rounds')
    g, _ = quantize(np.linspace(-1, 1, 8), params)
    expect(unmask(apply_mask(g, derive_mask(mask_seed, 0, 8, params)), derive_mask(mask_seed, 0, 8, params)) == g,
           'unmask(apply_mask) is not the identity')
    samples = [apply_mask(g, derive_mask(mask_seed, t, 8, params)).residues for t in range(400)]
    pvalues = masked_uniformity_pvalues(samples, params.q)
    expect(float(np.min(pvalues)) > 1e-4, f'masked coordinates look non-uniform (min p={np.min(pvalues):.2g})')
    return 'mask determinism, unmasking and uniformity of 400 masked updates'


def check_transport(seed):
    params = FixedPointParams.from_kappa2(64)
    with Network('memory') as network:
        network.start_recording()
        for client_id in range(2):
            vector, _ = quantize(np.zeros(4), params)
            network.deliver(client_name(client_id), S0, messages.masked_update(0, client_id, vector))
        recorded = network.stop_recording()
        sizes = network.link_bytes()
    expect(len(recorded) == 2, 'network did not record both frames')
    expect(sizes['c2s'] == 2 * (9 + 4 + 4 * 8), f'client->S0 bytes {sizes["c2s"]} != {2 * (9 + 4 + 32)}')
    return 'framing and per-link byte counters'


def check_learning(seed):
    spec = ModelSpec(features=3, classes=3, hidden=2)
    data = generate_synthetic(derive_int(seed, 'selftest-learning'), 20, 3, 3, 2.0)
    model = Model.initialize(spec, seed)
    _, gradient = model.loss_and_gradient(data.features, data.labels)
    step = 1e-6
    for index in range(0, spec.dim, 5):
        bumped = model.W.copy()
        bumped[index] += step
        lowered = model.W.copy()
        lowered[index] -= step
        numeric = (model.loss(data.features, data.labels, bumped) - model.loss(data.features, data.labels, lowered)) / (2 * step)
        expect(math.isclose(numeric, gradient[index], rel_tol=1e-4, abs_tol=1e-7),
               f'gradient entry {index}: analytic {gradient[index]:.6g} vs numeric {numeric:.6g}')
    return 'finite-difference gradient check with a hidden layer'


def check_attacks(seed):
    expect(int(label_flip([3], 100)[0]) == 96, 'label flip of 3 with 100 classes should be 96')
    expect(np.array_equal(sign_flip(np.array([3.0, 4.0])), np.array([-3.0, -4.0])), 'sign flip')
    return 'label flip and sign flip'


def check_oracle(seed):
    mean = trimmed_mean_plain(np.array([[0.0], [5.0], [10.0], [100.0]]), 1)
    expect(float(mean[0]) == 7.5, f'trimmed mean {mean[0]} != 7.5')
    rng = np.random.default_rng(derive_int(seed, 'selftest-oracle'))
    g_std = rng.standard_normal(10)
    for trial in range(20):
        norm = float(rng.uniform(0.1, 5))
        rho = float(rng.uniform(-1, 1)) * norm * float(np.linalg.norm(g_std))
        psi = construct_equivalent_gradient(rho, norm, g_std, trial)
        expect(math.isclose(float(psi @ g_std), rho, rel_tol=1e-9, abs_tol=1e-9), 'inner product observable')
        expect(math.isclose(float(np.linalg.norm(psi)), norm, rel_tol=1e-9), 'norm observable')
    return 'trimmed mean and 20 equivalent-gradient constructions'


def check_protocol(seed):
    config = ExperimentConfig(
        name='selftest', n=4, rounds=1, selection_fraction=1.0, features=4, classes=3,
        samples=80, test_samples=20, trusted_samples=10, kappa1=PROTOCOL_KAPPA1, insecure_test=True,
        k=8, data_seed=seed, protocol_seed=derive_int(seed, 'protocol'), attack='signflip',
        byzantine_fraction=0.25, attack_seed=derive_int(seed, 'attack')).validate()

    federation = initialize(config)
    try:
        s1, params = federation.s1, federation.s1.params
        transcript = run_round(federation, 0)
        expect(not transcript.failed, f'round failed: {transcript.error}')

        R = s1.projection.materialize().astype(object)
        decoded, norms = {}, {}
        for _, message in _frames_of(transcript, MsgType.MASKED_UPDATE):
            cid = message.sender_id
            g_q = unmask(messages.read_masked_update(message, params), derive_mask(s1.mask_seeds[cid], 0, config.d, params))
            lifted = g_q.lifted()
            exact = int(sum(int(v) ** 2 for v in R @ lifted))
            expect(transcript.squared_norm_lifts[cid] == exact,
                   f'client {cid}: SecNorm lift {transcript.squared_norm_lifts[cid]} != {exact}')
            decoded[cid] = dequantize(g_q)
            norms[cid] = transcript.estimated_norms[cid]

        std_message = next(message for _, message in _frames_of(transcript, MsgType.STD_GRAD))
        g_std = dequantize(messages.read_std_grad(std_message, params))
        order = sorted(decoded)
        expect(order == sorted(transcript.weights), 'weighted clients differ from the clients that sent updates')
        oracle = fltrust_plain([decoded[cid] for cid in order], g_std, [norms[cid] for cid in order])
        protocol = np.array([transcript.weights[cid] for cid in order])
        expect(np.allclose(protocol, oracle.weights, rtol=1e-9, atol=1e-12), 'weights differ from the plaintext oracle')
        for cid in transcript.attackers:
            expect(transcript.weights[cid] == 0 or transcript.cosines[cid] > 0, f'sign-flipped client {cid} kept weight')

        expect(replay_round(transcript, s1) == [], 'replay disagrees with the recorded transcript')
        audit_privacy(federation, [transcript])
    finally:
        federation.close()
    return f'one round, n={config.n}, d={config.d}, k={config.resolved_k}, kappa1={PROTOCOL_KAPPA1}: exact SecNorm, oracle weights, replay, privacy audit'


CHECKS = (
    ('paillier', check_paillier),
    ('encoding', check_encoding),
    ('jl', check_jl),
    ('masking', check_masking),
    ('transport', check_transport),
    ('learning', check_learning),
    ('attacks', check_attacks),
    ('oracle', check_oracle),
    ('protocol', check_protocol),
)


def _off_by_one_decrypt(decrypt):
    def corrupted(c, sk, pk):
        return (decrypt(c, sk, pk) + 1) % pk.N
    return corrupted


def selftest(seed=0, fault=None):
    if fault is not None and fault not in FAULTS:
        raise AggregatorError(f'Unknown fault {fault!r}, expected one of {FAULTS}')

    report = SelftestReport()
    patch = mock.patch.object(paillier, 'decrypt', _off_by_one_decrypt(paillier.decrypt)) if fault else None
    if patch is not None:
        patch.start()
    try:
        for module, check in CHECKS:
            try:
                detail = check(seed)
                report.results.append(CheckResult(module, True, detail))
            except Exception as error:
                logger.debug(f'selftest {module} failed', exc_info=True)
                report.results.append(CheckResult(module, False, f'{type(error).__name__}: {error}'))
    finally:
        if patch is not None:
            patch.stop()
    return report
