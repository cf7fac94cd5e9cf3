import math
import random
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, tag

from aggregator import paillier
from aggregator.attacks import sign_flip
from aggregator.config import ExperimentConfig
from aggregator.encoding import (
    FixedPointParams, QuantizedVector, dequantize, modulus_bits, quantize, residue_vector, suggest_kappa1,
    suggest_kappa2, validate_parameters
)
from aggregator.errors import ArgumentError, DecryptionError, IntegrityError
from aggregator.helpers import derive_seed
from aggregator.jl import norm_estimate_from_projection, project_mod_q, required_dimension, sample_matrix
from aggregator.masking import MaskSeed, apply_mask, derive_mask, unmask
from aggregator.oracle import fltrust_plain
from aggregator.protocol import (
    ClientState, RoundTranscript, audit_privacy, client_local_round, initialize, replay_round, run_round
)
from aggregator.protocol import secure
from aggregator.protocol.rounds import _frames_of
from aggregator.transport import messages
from aggregator.transport.frames import MsgType

TOY = FixedPointParams(q=101, f=0, fw=0, clip=1.0)
PARAMS = FixedPointParams.from_kappa2(64)


def tiny_config(**overrides):
    values = dict(
        name='protocol-test', n=5, rounds=2, selection_fraction=1.0, features=4, classes=3,
        samples=200, test_samples=50, trusted_samples=20, kappa1=80, insecure_test=True, k=8,
        learning_rate=0.5,
    )
    values.update(overrides)
    return ExperimentConfig(**values).validate()


class SecNormTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.pk, cls.sk = paillier.keygen(16, rng=random.Random(5), insecure_test=True)

    def test_toy_instance(self):
        masked, mask = QuantizedVector([13, 24], TOY), QuantizedVector([10, 20], TOY)
        self.assertEqual(secure.squared_norm_mod(masked), 38)
        self.assertEqual(secure.squared_norm_mod(mask), 96)
        self.assertEqual(secure.dot_mod(masked, mask), 4)

        ciphertexts = paillier.encrypt_vector(mask.residues, self.pk, random.Random(1))
        sq_norm_mod, c_sum = secure.masked_norm_share(masked, ciphertexts, self.pk)
        self.assertEqual(sq_norm_mod, 38)
        self.assertEqual(paillier.decrypt(c_sum, self.sk, self.pk) % 101, 4)
        self.assertEqual(secure.recover_squared_norm(38, c_sum, 96, self.sk, self.pk, 101), 25)

    def test_negative_lift_is_an_integrity_error(self):
        c_sum = paillier.encrypt(0, self.pk, random.Random(2))
        with self.assertRaises(IntegrityError):
            secure.recover_squared_norm(100, c_sum, 0, self.sk, self.pk, 101)

    def test_pack_size_must_match(self):
        with self.assertRaises(ArgumentError):
            secure.masked_norm_share(QuantizedVector([1, 2], TOY), [], self.pk)

    @tag('slow')
    def test_lifted_norms_match_integer_projections(self):
        d, k = 1000, required_dimension(0.2, 0.01)
        params = FixedPointParams.from_kappa2(suggest_kappa2(d, k, 1))
        kappa1 = suggest_kappa1(k, params)
        self.assertTrue(validate_parameters(d, k, 1, params, modulus_bits(kappa1)))
        pk, sk = paillier.keygen(kappa1, rng=random.Random(13), insecure_test=True)
        rng = np.random.default_rng(21)
        outside = 0
        for instance in range(100):
            R = sample_matrix(derive_seed(instance, 'projection'), k, d)
            g_q, _ = quantize(rng.uniform(-params.clip, params.clip, size=d), params)
            r = derive_mask(MaskSeed(0, derive_seed(instance, 'mask', 0)), 0, d, params)
            r_star = project_mod_q(R, r)
            pack = paillier.encrypt_vector(r_star.residues, pk, random.Random(instance))
            sq_norm_mod, c_sum = secure.masked_norm_share(project_mod_q(R, apply_mask(g_q, r)), pack, pk)
            lifted = secure.recover_squared_norm(
                sq_norm_mod, c_sum, secure.squared_norm_mod(r_star), sk, pk, params.q)

            plain = R.materialize().astype(np.int64) @ np.array([int(v) for v in g_q.lifted()], dtype=np.int64)
            self.assertEqual(lifted, sum(int(v) ** 2 for v in plain))
            ratio = norm_estimate_from_projection(lifted % params.q, k, params) / np.linalg.norm(dequantize(g_q))
            outside += not math.sqrt(0.8) <= ratio <= math.sqrt(1.2)
        # one expected miss at delta=0.01, plus 3 sigma
        self.assertLessEqual(outside, 4)


class SecCosTest(SimpleTestCase):
    def test_toy_instance(self):
        inner = secure.recover_inner_product(21, 17, TOY)
        self.assertEqual(inner, 4)
        self.assertAlmostEqual(secure.cosine_from_inner(inner, 5.0, 1.0, TOY), 0.8)

    def test_shares_recover_the_exact_dot_product(self):
        g, _ = quantize([0.5, -1.25, 3.0], PARAMS)
        g_std, _ = quantize([1.0, 2.0, -0.5], PARAMS)
        r = derive_mask(MaskSeed(0, derive_seed(0, 'mask', 0)), 0, 3, PARAMS)
        p0, p1 = secure.cos_share(apply_mask(g, r), g_std), secure.cos_share(r, g_std)
        inner = secure.recover_inner_product(p0, p1, PARAMS)
        self.assertEqual(inner, sum(int(a) * int(b) for a, b in zip(g.lifted(), g_std.lifted())))

    def test_degenerate_norms(self):
        self.assertEqual(secure.cosine_from_inner(5, 0.0, 1.0, TOY), 0.0)
        self.assertEqual(secure.cosine_from_inner(500, 1.0, 1.0, TOY), 1.0)

    @tag('slow')
    def test_cosines_track_real_arithmetic(self):
        d, k = 500, required_dimension(0.2, 0.01)
        params = FixedPointParams.from_kappa2(suggest_kappa2(d, k, 1))
        rng = np.random.default_rng(31)
        for instance in range(100):
            g, g_std = rng.uniform(-1, 1, size=d), rng.uniform(-1, 1, size=d)
            (g_q, _), (g_std_q, _) = quantize(g, params), quantize(g_std, params)
            r = derive_mask(MaskSeed(0, derive_seed(instance, 'mask', 0)), 0, d, params)
            inner = secure.recover_inner_product(
                secure.cos_share(apply_mask(g_q, r), g_std_q), secure.cos_share(r, g_std_q), params)
            self.assertEqual(inner, sum(int(a) * int(b) for a, b in zip(g_q.lifted(), g_std_q.lifted())))

            real = float(g @ g_std) / (np.linalg.norm(g) * np.linalg.norm(g_std))
            norm, norm_std = np.linalg.norm(dequantize(g_q)), np.linalg.norm(dequantize(g_std_q))
            exact = secure.cosine_from_inner(inner, norm, norm_std, params)
            self.assertLessEqual(abs(exact - real), 2 * 2.0 ** -params.f)

            R = sample_matrix(derive_seed(instance, 'projection'), k, d)
            estimate = norm_estimate_from_projection(secure.squared_norm_mod(project_mod_q(R, g_q)), k, params)
            compressed = secure.cosine_from_inner(inner, estimate, norm_std, params)
            allowance = 2 * 2.0 ** -params.f + abs(exact) * abs(norm / estimate - 1) + 1e-12
            self.assertLessEqual(abs(compressed - real), allowance)


class TrustWeightTest(SimpleTestCase):
    def test_negative_cosine_is_annihilated(self):
        trust, weights, no_trust = secure.compute_trust_weights({0: 0.8, 1: -0.5}, {0: 5.0, 1: 2.0}, 5.0)
        self.assertEqual(weights, {0: 1.0, 1: 0.0})
        self.assertEqual(trust[1], 0.0)
        self.assertFalse(no_trust)

    def test_no_trust(self):
        _, weights, no_trust = secure.compute_trust_weights({0: -0.1, 1: 0.0}, {0: 1.0, 1: 1.0}, 1.0)
        self.assertTrue(no_trust)
        self.assertEqual(set(weights.values()), {0.0})

    def test_zero_norm_client(self):
        _, weights, _ = secure.compute_trust_weights({0: 0.0, 1: 0.5}, {0: 0.0, 1: 1.0}, 1.0)
        self.assertEqual(weights[0], 0.0)

    def test_quantized_weights(self):
        self.assertEqual(secure.quantize_weights({0: 1.0, 1: 0.25}, PARAMS), {0: 1 << 20, 1: 1 << 18})
        with self.assertRaises(IntegrityError):
            secure.quantize_weights({0: 2.0 ** 50, 1: 0.0}, PARAMS)
        with self.assertRaises(IntegrityError):
            secure.quantize_weights({0: 2.0 ** 30, 1: 2.0 ** 30}, PARAMS)

    def test_tiny_update_gets_a_large_weight(self):
        _, weights, no_trust = secure.compute_trust_weights(
            {'a': 0.9, 'b': 0.9, 'c': 0.9}, {'a': 1e-4, 'b': 1.0, 'c': 1.0}, 1.0)
        self.assertFalse(no_trust)
        self.assertGreater(sum(weights.values()), len(weights))
        quantized = secure.quantize_weights(weights, PARAMS)
        self.assertEqual(quantized['b'], round(weights['b'] * (1 << PARAMS.fw)))
        with self.assertRaises(ArgumentError):
            secure.compute_trust_weights({}, {}, 1.0)


class SecAggTest(SimpleTestCase):
    def aggregate(self, gradients, weights):
        masks, updates = {}, {}
        for cid, g in gradients.items():
            g_q, _ = quantize(g, PARAMS)
            masks[cid] = derive_mask(MaskSeed(cid, derive_seed(1, 'mask', cid)), 0, len(g), PARAMS)
            updates[cid] = apply_mask(g_q, masks[cid])
        quantized = secure.quantize_weights(weights, PARAMS)
        total = secure.aggregate_masked(updates, quantized, secure.mask_sum(quantized, masks, PARAMS))
        return secure.decode_aggregate(total, PARAMS)

    def test_identity_aggregation(self):
        result = self.aggregate({0: np.array([0.5, -0.25])}, {0: 1.0})
        np.testing.assert_allclose(result, [0.5, -0.25], atol=2.0 ** -PARAMS.f)

    def test_annihilated_client(self):
        result = self.aggregate({0: np.array([0.5, -0.25]), 1: np.array([3.0, 3.0])}, {0: 1.0, 1: 0.0})
        np.testing.assert_allclose(result, [0.5, -0.25], atol=2.0 ** -PARAMS.f)

    def test_weighted_sum_error_bound(self):
        rng = np.random.default_rng(4)
        gradients = {cid: rng.uniform(-2, 2, size=6) for cid in range(5)}
        weights = {cid: float(w) for cid, w in enumerate(rng.uniform(0, 0.4, size=5))}
        expected = sum(weights[cid] * gradients[cid] for cid in gradients)
        bound = 5 * (2.0 ** -PARAMS.fw * PARAMS.clip + 2.0 ** -PARAMS.f)
        np.testing.assert_allclose(self.aggregate(gradients, weights), expected, atol=bound)

    @tag('slow')
    def test_matches_plaintext_fltrust(self):
        n, d = 10, 100
        bound = n * (2.0 ** -PARAMS.fw * PARAMS.clip + 2.0 ** -PARAMS.f)
        rng = np.random.default_rng(41)
        for _ in range(100):
            gradients = {cid: rng.uniform(-2, 2, size=d) for cid in range(n)}
            g_std = rng.uniform(-2, 2, size=d)
            oracle = fltrust_plain([gradients[cid] for cid in range(n)], g_std)
            weights = {cid: float(oracle.weights[cid]) for cid in range(n)}
            result = self.aggregate(gradients, weights)
            np.testing.assert_allclose(result, oracle.aggregate, rtol=0, atol=bound)

    def test_large_weight_on_a_tiny_update(self):
        honest = np.array([0.5, -0.25])
        gradients = {0: honest * 1e-3, 1: honest, 2: honest}
        quantized = {cid: dequantize(quantize(g, PARAMS)[0]) for cid, g in gradients.items()}
        norms = {cid: float(np.linalg.norm(g)) for cid, g in quantized.items()}
        _, weights, _ = secure.compute_trust_weights(dict.fromkeys(gradients, 1.0), norms, 1.0)
        self.assertGreater(weights[0], len(weights))
        expected = sum(weights[cid] * quantized[cid] for cid in gradients)
        result = self.aggregate(gradients, weights)
        np.testing.assert_allclose(result, expected, atol=1e-5)
        self.assertAlmostEqual(float(np.linalg.norm(result)), 1.0, places=4)

    def test_weights_without_updates(self):
        mask_sum = QuantizedVector.zeros(2, PARAMS)
        with self.assertRaises(IntegrityError):
            secure.aggregate_masked({}, {3: 1}, mask_sum)


class ClientRoundTest(SimpleTestCase):
    def test_attack_is_applied_before_masking(self):
        mask_seed = MaskSeed(0, derive_seed(0, 'mask', 0))
        client = ClientState(
            client_id=0, W=np.zeros(2), mask_seed=mask_seed, shard=None, params=PARAMS,
            model_spec=None, batch_size=1, batch_seed=0)
        message, _, saturated = client_local_round(client, 3, sign_flip([3.0, 4.0]))
        self.assertEqual(message.msg_type, MsgType.MASKED_UPDATE)
        masked = messages.read_masked_update(message, PARAMS)
        np.testing.assert_array_equal(dequantize(unmask(masked, derive_mask(mask_seed, 3, 2, PARAMS))), [-3.0, -4.0])
        self.assertEqual(saturated, 0)


class EndToEndTest(SimpleTestCase):
    def test_rounds_track_the_plaintext_oracle(self):
        config = tiny_config(attack='signflip', byzantine_fraction=0.4)
        federation = initialize(config)
        self.addCleanup(federation.close)
        s1, params = federation.s1, federation.s1.params
        R = s1.projection.materialize().astype(object)

        for round in range(config.rounds):
            transcript = run_round(federation, round)
            self.assertFalse(transcript.failed, transcript.error)
            self.assertEqual(len(transcript.attackers), 2)

            decoded = {}
            for _, message in _frames_of(transcript, MsgType.MASKED_UPDATE):
                cid = message.sender_id
                g_q = unmask(messages.read_masked_update(message, params), derive_mask(s1.mask_seeds[cid], round, config.d, params))
                exact = sum(int(v) ** 2 for v in R @ g_q.lifted())
                self.assertEqual(transcript.squared_norm_lifts[cid], exact)
                decoded[cid] = dequantize(g_q)

            std_message = next(message for _, message in _frames_of(transcript, MsgType.STD_GRAD))
            g_std = dequantize(messages.read_std_grad(std_message, params))
            order = sorted(decoded)
            oracle = fltrust_plain(
                [decoded[cid] for cid in order], g_std, [transcript.estimated_norms[cid] for cid in order])
            np.testing.assert_allclose(
                [transcript.weights[cid] for cid in order], oracle.weights, rtol=1e-9, atol=1e-12)
            self.assertEqual(replay_round(transcript, s1), [])

        # Sign-flipped clients point away from the reference in the first round
        fresh = initialize(tiny_config(attack='signflip', byzantine_fraction=0.4, rounds=1))
        self.addCleanup(fresh.close)
        first = run_round(fresh, 0)
        for cid in first.attackers:
            self.assertLess(first.cosines[cid], 0)
            self.assertEqual(first.weights[cid], 0.0)

    def test_shrunken_updates_do_not_stop_the_round(self):
        federation = initialize(tiny_config(attack='scaling', scaling_factor=0.01, byzantine_fraction=0.2))
        self.addCleanup(federation.close)
        transcript = run_round(federation, 0)
        self.assertFalse(transcript.failed, transcript.error)
        self.assertEqual(len(transcript.attackers), 1)
        attacker = transcript.attackers[0]
        self.assertGreater(transcript.cosines[attacker], 0)
        self.assertGreater(transcript.weights[attacker], 1.0)
        self.assertGreater(sum(transcript.weights.values()), len(transcript.weights))
        self.assertEqual(replay_round(transcript, federation.s1), [])
        self.assertTrue(np.all(np.isfinite(federation.s1.W)))

    def test_every_entity_holds_the_same_model(self):
        federation = initialize(tiny_config())
        self.addCleanup(federation.close)
        W0 = federation.s0.W.copy()
        run_round(federation, 0)
        clients, s0, s1 = federation
        self.assertFalse(np.array_equal(s0.W, W0))
        for client in clients:
            np.testing.assert_array_equal(client.W, s1.W)
        np.testing.assert_allclose(s0.W, s1.W)

    def test_uncompressed_norms_are_exact(self):
        federation = initialize(tiny_config(scheme='ours-uncompressed', k=None))
        self.addCleanup(federation.close)
        self.assertFalse(federation.compressed)
        self.assertEqual(federation.k, federation.d)
        transcript = run_round(federation, 0)
        for cid, norm in transcript.estimated_norms.items():
            self.assertAlmostEqual(norm, transcript.oracle_norms[cid], places=12)

    def test_offline_phase_ships_every_pack(self):
        config = tiny_config(rounds=3)
        federation = initialize(config)
        self.addCleanup(federation.close)
        self.assertEqual(len(federation.s0.mask_packs), config.n * config.rounds)
        self.assertEqual({len(pack) for pack in federation.s0.mask_packs.values()}, {config.resolved_k})
        self.assertGreater(federation.offline_bytes['s1s0'], 0)
        run_round(federation, 0)
        self.assertEqual(len(federation.s0.mask_packs), config.n * (config.rounds - 1))

    def test_empty_selection_is_a_no_op(self):
        federation = initialize(tiny_config())
        self.addCleanup(federation.close)
        W = federation.s1.W.copy()
        transcript = run_round(federation, 0, selected=[])
        self.assertTrue(transcript.skipped)
        self.assertEqual(transcript.deliveries, [])
        np.testing.assert_array_equal(federation.s1.W, W)

    def test_all_negative_round_freezes_the_model(self):
        federation = initialize(tiny_config(attack='signflip', byzantine_fraction=1.0))
        self.addCleanup(federation.close)
        W = federation.s1.W.copy()
        transcript = run_round(federation, 0)
        self.assertTrue(transcript.no_trust)
        self.assertEqual(set(transcript.weights.values()), {0.0})
        np.testing.assert_array_equal(federation.s1.W, W)

    def test_decryption_failure_marks_the_round_failed(self):
        federation = initialize(tiny_config())
        self.addCleanup(federation.close)
        W = federation.s1.W.copy()
        with mock.patch.object(paillier, 'decrypt', side_effect=DecryptionError('corrupted')):
            transcript = run_round(federation, 0)
        self.assertTrue(transcript.failed)
        self.assertIn('DecryptionError', transcript.error)
        np.testing.assert_array_equal(federation.s1.W, W)
        with self.assertRaises(ArgumentError):
            replay_round(transcript, federation.s1)

    def test_transcripts_are_deterministic_across_transports(self):
        texts = []
        for transport in ('memory', 'memory', 'socket'):
            federation = initialize(tiny_config(transport=transport, rounds=1))
            texts.append(run_round(federation, 0).to_json())
            federation.close()
        self.assertEqual(texts[0], texts[1])
        self.assertEqual(texts[0], texts[2])
        restored = RoundTranscript.from_json(texts[0])
        self.assertEqual(restored.to_json(), texts[0])

    def test_transcript_file_replays(self):
        federation = initialize(tiny_config(rounds=1))
        self.addCleanup(federation.close)
        transcript = RoundTranscript.from_json(run_round(federation, 0).to_json())
        self.assertEqual(replay_round(transcript, federation.s1), [])
        transcript.cosines[0] = 0.123
        self.assertIn('cosines', replay_round(transcript, federation.s1))

    def test_privacy_audit(self):
        federation = initialize(tiny_config(rounds=1))
        self.addCleanup(federation.close)
        transcript = run_round(federation, 0)
        self.assertTrue(audit_privacy(federation, [transcript]))

        federation.s0.leaked = federation.s1.mask_seeds[0]
        with self.assertRaises(IntegrityError):
            audit_privacy(federation)
        del federation.s0.leaked

        update = next(message for _, message in _frames_of(transcript, MsgType.MASKED_UPDATE))
        federation.s1.leaked = messages.read_masked_update(update, federation.s1.params)
        with self.assertRaises(IntegrityError):
            audit_privacy(federation, [transcript])

    def test_masked_updates_hide_small_gradients(self):
        federation = initialize(tiny_config(rounds=1))
        self.addCleanup(federation.close)
        transcript = run_round(federation, 0)
        params = federation.s1.params
        for _, message in _frames_of(transcript, MsgType.MASKED_UPDATE):
            lifted = messages.read_masked_update(message, params).lifted()
            self.assertGreater(max(abs(int(v)) for v in lifted), params.max_magnitude)

    def test_residue_vector_helper(self):
        self.assertEqual(list(residue_vector([-1, 102], TOY).residues), [100, 1])
