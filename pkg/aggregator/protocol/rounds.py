"""
Entity set-up and the per-round workflow. Every value that crosses an entity
boundary is framed and delivered through the Network, and the receiving side
only works with what it decoded from the frame.
"""
import logging

import numpy as np

from aggregator import paillier
from aggregator.attacks import AttackPlan
from aggregator.encoding import dequantize, quantize
from aggregator.errors import AggregatorError, ArgumentError, ConfigurationError, IntegrityError, RoundError
from aggregator.helpers import derive_int, derive_seed, seeded_random, stopwatch
from aggregator.jl import norm_estimate_from_projection, project_mod_q, sample_matrix
from aggregator.learning import Model, federated_data
from aggregator.masking import MaskSeed, apply_mask, derive_mask
from aggregator.paillier import PaillierSecretKey
from aggregator.protocol import secure
from aggregator.protocol.entities import ClientState, Federation, ServerS0State, ServerS1State
from aggregator.protocol.transcript import RoundTranscript
from aggregator.transport import messages
from aggregator.transport.frames import S0_ID, S1_ID, MsgType, decode_frame
from aggregator.transport.network import S0, S1, Network, client_name


logger = logging.getLogger(__name__)


def build_data(config):
    return federated_data(
        config.data_seed, config.n, config.samples, config.test_samples, config.trusted_samples,
        config.features, config.classes, config.separation, config.partition, config.alpha)


def _compress(projection, vector):
    return project_mod_q(projection, vector) if projection is not None else vector


def initialize(config, data=None):
    """Key, seed and model distribution, then the offline mask precompute."""
    report = config.validation_report()
    if not report:
        raise ConfigurationError(f'Parameter validation {report.message}')

    data = data or build_data(config)
    if len(data.shards) != config.n:
        raise ConfigurationError(f'{len(data.shards)} shards for {config.n} clients')

    spec = config.model_spec
    params = config.fixed_point_params()
    d, k = spec.dim, config.resolved_k
    plan = AttackPlan.build(
        config.attack, config.byzantine_fraction, config.n, config.attack_seed, config.scaling_factor)
    network = Network(config.transport)
    network.start_recording()

    try:
        # S1 owns the key pair; S0 only ever receives the public half
        pk, sk = paillier.keygen(
            config.kappa1, rng=seeded_random(config.protocol_seed, 'paillier'), insecure_test=config.insecure_test)
        pk_at_s0 = messages.read_init_pk(network.deliver(S1, S0, messages.init_pk(0, S1_ID, pk)))

        projection_seed = derive_seed(config.protocol_seed, 'projection')
        seed, k_at_s1, d_at_s1, compressed = messages.read_init_proj_seed(network.deliver(
            S0, S1, messages.init_proj_seed(0, S0_ID, projection_seed, k, d, config.compressed)))
        projection_s0 = sample_matrix(projection_seed, k, d) if config.compressed else None
        projection_s1 = sample_matrix(seed, k_at_s1, d_at_s1) if compressed else None

        W0 = Model.initialize(spec, derive_int(config.protocol_seed, 'model')).W
        clients, seeds = {}, {}
        for client_id, shard in enumerate(data.shards):
            name = client_name(client_id)
            W = messages.read_init_model(network.deliver(S0, name, messages.init_model(0, S0_ID, W0)))
            shard = shard.with_labels(plan.poison_labels(client_id, shard.labels, shard.classes))
            mask_seed = MaskSeed(client_id, derive_seed(config.protocol_seed, 'mask', client_id))
            registered = messages.read_seed_reg(network.deliver(name, S1, messages.seed_reg(0, client_id, mask_seed)))
            if registered.client_id in seeds:
                raise ConfigurationError(f'Duplicate client id {registered.client_id}')
            seeds[registered.client_id] = registered
            clients[client_id] = ClientState(
                client_id=client_id, W=W, mask_seed=mask_seed, shard=shard, params=params,
                model_spec=spec, batch_size=config.batch_size, batch_seed=config.data_seed)
        W_s1 = messages.read_init_model(network.deliver(S0, S1, messages.init_model(0, S0_ID, W0)))

        s0 = ServerS0State(projection_seed=projection_seed, projection=projection_s0, pk=pk_at_s0, params=params, W=W0.copy())
        s1 = ServerS1State(
            pk=pk, sk=sk, mask_seeds=seeds, trusted=data.trusted, projection=projection_s1, params=params,
            model_spec=spec, W=W_s1, reference_seed=config.data_seed)
        init_deliveries = network.stop_recording()

        federation = Federation(
            config=config, clients=clients, s0=s0, s1=s1, network=network, attack_plan=plan,
            test_set=data.test, model_spec=spec, k=k, init_deliveries=init_deliveries)

        before = network.link_bytes()
        with stopwatch() as offline:
            precompute_masks(federation, range(config.rounds))
        after = network.link_bytes()
    except Exception:
        network.close()
        raise

    federation.offline_ms = offline['ms']
    federation.offline_bytes = {link: after[link] - before[link] for link in after}
    logger.info(
        f'Initialized {config.n} clients, d={d}, k={k}, q=2^{params.kappa2}; '
        f'offline precompute {offline["ms"]:.0f} ms')
    return federation


def precompute_masks(federation, rounds):
    """S1 projects and encrypts every client's mask for `rounds` and ships the packs to S0."""
    s0, s1, network = federation.s0, federation.s1, federation.network
    d, params = federation.d, s1.params
    rng = seeded_random(federation.config.protocol_seed, 'encrypt')
    for round in rounds:
        for client_id in sorted(s1.mask_seeds):
            mask = derive_mask(s1.mask_seeds[client_id], round, d, params)
            compressed = _compress(s1.projection, mask)
            s1.mask_norms[(client_id, round)] = secure.squared_norm_mod(compressed)
            pack = paillier.encrypt_vector(compressed.residues, s1.pk, rng)
            received = network.deliver(S1, S0, messages.enc_mask_pack(round, S1_ID, client_id, pack))
            pack_client, ciphertexts = messages.read_enc_mask_pack(received)
            s0.mask_packs[(pack_client, received.round)] = ciphertexts


def select_clients(config, round):
    count = int(np.floor(config.selection_fraction * config.n + 0.5))
    if count == 0:
        return []
    rng = np.random.default_rng(derive_int(config.protocol_seed, 'selection', round))
    return sorted(int(c) for c in rng.choice(config.n, size=count, replace=False))


def client_local_round(client, round, gradient=None):
    """Quantize and mask the client's gradient. Returns (message, quantized gradient, saturated)."""
    g = client.local_gradient(round) if gradient is None else np.asarray(gradient, dtype=np.float64)
    g_q, saturated = quantize(g, client.params)
    mask = derive_mask(client.mask_seed, round, g_q.dim, client.params)
    return messages.masked_update(round, client.client_id, apply_mask(g_q, mask)), g_q, saturated


def poisoned_gradients(federation, round, selected):
    """Local training for the selected clients, with the attack plan applied before masking."""
    plan = federation.attack_plan
    benign = {cid: federation.clients[cid].local_gradient(round) for cid in selected}
    submitted = dict(benign)
    submitted.update(plan.collude({cid: g for cid, g in benign.items() if plan.is_attacker(cid)}))
    return {cid: plan.perturb(cid, submitted[cid], round) for cid in selected}


def run_round(federation, round, selected=None):
    config = federation.config
    if selected is None:
        selected = select_clients(config, round)
    transcript = RoundTranscript(
        round=round, selected=list(selected),
        attackers=[cid for cid in selected if federation.attack_plan.is_attacker(cid)])
    if not selected:
        logger.info(f'Round {round}: no clients selected, model unchanged')
        return transcript

    network = federation.network
    federation.s0.reset_round()
    network.start_recording()
    try:
        with stopwatch() as online:
            _run_round(federation, round, list(selected), transcript)
    except AggregatorError as error:
        transcript.failed = True
        transcript.error = f'{type(error).__name__}: {error}'
        logger.warning(f'Round {round} failed: {transcript.error}')
    finally:
        transcript.deliveries = network.stop_recording()
        for client_id in federation.clients:
            federation.s0.mask_packs.pop((client_id, round), None)
            federation.s1.mask_norms.pop((client_id, round), None)
    transcript.online_ms = online['ms']
    return transcript


def _run_round(federation, round, selected, transcript):
    s0, s1, network = federation.s0, federation.s1, federation.network
    params, learning_rate = s1.params, federation.config.learning_rate

    # S1: reference gradient, shared with S0 for SecCos
    g_std_q, _ = quantize(s1.reference_gradient(round), params)
    norm_std = float(np.linalg.norm(dequantize(g_std_q)))
    if norm_std == 0:
        raise RoundError('Reference gradient is zero; trust scores are undefined')
    s1.references = {round: g_std_q}
    s0.std_grad = messages.read_std_grad(network.deliver(S1, S0, messages.std_grad(round, S1_ID, g_std_q)), params)
    transcript.norm_std = norm_std

    # Clients: local gradient, attack, quantize, mask
    for client_id, g in poisoned_gradients(federation, round, selected).items():
        message, g_q, saturated = client_local_round(federation.clients[client_id], round, g)
        received = network.deliver(client_name(client_id), S0, message)
        s0.masked_updates[received.sender_id] = messages.read_masked_update(received, params)
        transcript.saturated += saturated
        transcript.oracle_norms[client_id] = float(np.linalg.norm(dequantize(g_q)))

    # SecNorm and SecCos, one client at a time
    masks, norms, cosines = {}, {}, {}
    for client_id in selected:
        with paillier.count_operations() as s0_ops, stopwatch() as s0_time:
            masked = s0.masked_updates[client_id]
            pack = s0.mask_packs.pop((client_id, round), None)
            if pack is None:
                raise IntegrityError(f'No encrypted mask pack for client {client_id} in round {round}')
            sq_norm_mod, c_sum = secure.masked_norm_share(_compress(s0.projection, masked), pack, s0.pk)
        norm_frame = network.deliver(S0, S1, messages.norm_pair(round, S0_ID, client_id, c_sum, sq_norm_mod, params))
        cos_frame = network.deliver(S0, S1, messages.cos_p0(round, S0_ID, client_id, secure.cos_share(masked, s0.std_grad), params))

        cid, c_sum_at_s1, sq_at_s1 = messages.read_norm_pair(norm_frame, params)
        with paillier.count_operations() as s1_ops, stopwatch() as s1_time:
            lifted = secure.recover_squared_norm(
                sq_at_s1, c_sum_at_s1, s1.mask_norms.pop((cid, round)), s1.sk, s1.pk, params.q)
            norms[cid] = norm_estimate_from_projection(lifted % params.q, s1.k, params)
        transcript.secnorm_ms += s0_time['ms'] + s1_time['ms']
        transcript.secnorm_exponentiations += s0_ops['exp'] + s1_ops['exp']

        cos_cid, p0 = messages.read_cos_p0(cos_frame, params)
        masks[cos_cid] = derive_mask(s1.mask_seeds[cos_cid], round, federation.d, params)
        inner = secure.recover_inner_product(p0, secure.cos_share(masks[cos_cid], g_std_q), params)
        cosines[cos_cid] = secure.cosine_from_inner(inner, norms[cos_cid], norm_std, params)

        transcript.squared_norm_lifts[cid] = lifted
        transcript.estimated_norms[cid] = norms[cid]
        transcript.inner_products[cos_cid] = inner
        transcript.cosines[cos_cid] = cosines[cos_cid]

    # SecAgg
    trust, weights, no_trust = secure.compute_trust_weights(cosines, norms, norm_std)
    quantized = secure.quantize_weights(weights, params)
    masked_sum = secure.mask_sum(quantized, masks, params)
    weights_frame = network.deliver(S1, S0, messages.weights_and_masksum(round, S1_ID, quantized, masked_sum))
    weights_at_s0, sum_at_s0 = messages.read_weights_and_masksum(weights_frame, params)
    aggregate = secure.aggregate_masked(s0.masked_updates, weights_at_s0, sum_at_s0)
    transcript.trust_scores, transcript.weights, transcript.quantized_weights = trust, weights, quantized
    transcript.mask_sum = [int(v) for v in masked_sum.residues]
    transcript.no_trust = no_trust

    # Broadcast; every receiver decodes its own copy before anyone updates
    scale_bits = params.f + params.fw
    received = {}
    for client_id in federation.clients:
        frame = network.deliver(S0, client_name(client_id), messages.global_grad(round, S0_ID, aggregate))
        received[client_id] = dequantize(messages.read_global_grad(frame, params), scale_bits)
    frame = network.deliver(S0, S1, messages.global_grad(round, S0_ID, aggregate))
    g_at_s1 = dequantize(messages.read_global_grad(frame, params), scale_bits)

    g_global = secure.decode_aggregate(aggregate, params)
    s0.apply_update(g_global, learning_rate)
    s1.apply_update(g_at_s1, learning_rate)
    for client_id, g in received.items():
        federation.clients[client_id].apply_update(g, learning_rate)
    transcript.global_gradient = [float(v) for v in g_global]
    logger.debug(
        f'Round {round}: {len(selected)} clients, {sum(w > 0 for w in weights.values())} weighted'
        + (', no trust' if no_trust else ''))


def _frames_of(transcript, msg_type):
    for delivery in transcript.deliveries:
        message = decode_frame(delivery.frame)
        if message.msg_type == msg_type:
            yield delivery, message


def replay_round(transcript, s1):
    """
    Recompute every derived field of a completed round from its recorded frames
    and S1's key material. Returns the names of the fields that differ.
    """
    if transcript.failed or transcript.skipped:
        raise ArgumentError('Only completed rounds can be replayed')
    params, round = s1.params, transcript.round
    derived = RoundTranscript(round=round)

    std_frames = [message for _, message in _frames_of(transcript, MsgType.STD_GRAD)]
    if len(std_frames) != 1:
        raise IntegrityError(f'Expected one STD_GRAD frame, found {len(std_frames)}')
    std_msg = std_frames[0]
    g_std_q = messages.read_std_grad(std_msg, params)
    norm_std = float(np.linalg.norm(dequantize(g_std_q)))
    derived.norm_std = norm_std

    masks, norms, cosines = {}, {}, {}
    for _, message in _frames_of(transcript, MsgType.NORM_PAIR):
        cid, c_sum, sq_norm_mod = messages.read_norm_pair(message, params)
        masks[cid] = derive_mask(s1.mask_seeds[cid], round, g_std_q.dim, params)
        mask_norm = secure.squared_norm_mod(_compress(s1.projection, masks[cid]))
        lifted = secure.recover_squared_norm(sq_norm_mod, c_sum, mask_norm, s1.sk, s1.pk, params.q)
        norms[cid] = norm_estimate_from_projection(lifted % params.q, s1.k, params)
        derived.squared_norm_lifts[cid] = lifted
        derived.estimated_norms[cid] = norms[cid]
    for _, message in _frames_of(transcript, MsgType.COS_P0):
        cid, p0 = messages.read_cos_p0(message, params)
        inner = secure.recover_inner_product(p0, secure.cos_share(masks[cid], g_std_q), params)
        cosines[cid] = secure.cosine_from_inner(inner, norms[cid], norm_std, params)
        derived.inner_products[cid] = inner
        derived.cosines[cid] = cosines[cid]

    trust, weights, no_trust = secure.compute_trust_weights(cosines, norms, norm_std)
    quantized = secure.quantize_weights(weights, params)
    masked_sum = secure.mask_sum(quantized, masks, params)
    derived.trust_scores, derived.weights, derived.quantized_weights = trust, weights, quantized
    derived.no_trust = no_trust
    derived.mask_sum = [int(v) for v in masked_sum.residues]

    updates = {
        message.sender_id: messages.read_masked_update(message, params)
        for _, message in _frames_of(transcript, MsgType.MASKED_UPDATE)
    }
    aggregate = secure.aggregate_masked(updates, quantized, masked_sum)
    derived.global_gradient = [float(v) for v in secure.decode_aggregate(aggregate, params)]

    compared = (
        'norm_std', 'squared_norm_lifts', 'estimated_norms', 'inner_products', 'cosines',
        'trust_scores', 'weights', 'quantized_weights', 'no_trust', 'mask_sum', 'global_gradient',
    )
    return [name for name in compared if getattr(derived, name) != getattr(transcript, name)]


def _walk(value, path, seen):
    if id(value) in seen or isinstance(value, (str, bytes, int, float, np.ndarray)) or value is None:
        return
    seen.add(id(value))
    yield path, value
    if isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f'{path}[{key!r}]', seen)
    elif isinstance(value, (list, tuple, set, frozenset)):
        for index, item in enumerate(value):
            yield from _walk(item, f'{path}[{index}]', seen)
    elif hasattr(value, '__dict__'):
        for key, item in vars(value).items():
            yield from _walk(item, f'{path}.{key}', seen)


def audit_privacy(federation, transcripts=()):
    """
    Structural privacy check: S0 holds no secret key and no mask seed, and S1
    holds no full-dimension masked update that crossed the wire in `transcripts`.
    """
    violations = []
    for path, value in _walk(federation.s0, 'S0', set()):
        if isinstance(value, (PaillierSecretKey, MaskSeed)):
            violations.append(f'{path} is a {type(value).__name__}')

    masked_payloads = set()
    for transcript in transcripts:
        for _, message in _frames_of(transcript, MsgType.MASKED_UPDATE):
            masked_payloads.add(bytes(message.payload))
    for path, value in _walk(federation.s1, 'S1', set()):
        if hasattr(value, 'residues') and hasattr(value, 'to_bytes') and value.to_bytes() in masked_payloads:
            violations.append(f'{path} holds a masked client update')

    if violations:
        raise IntegrityError('Privacy audit failed: ' + '; '.join(violations))
    return True
