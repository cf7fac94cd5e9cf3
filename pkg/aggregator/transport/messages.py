"""
Payload codecs for each message type. Numeric payloads reuse the wire forms of
the encoding (QuantizedVector) and paillier (Ciphertext, public key) modules.
"""
import struct

import numpy as np

from aggregator.encoding import QuantizedVector
from aggregator.errors import ArgumentError, FrameError
from aggregator.masking import MaskSeed
from aggregator.paillier import Ciphertext, PaillierPublicKey
from aggregator.transport.frames import Message, MsgType


U32 = struct.Struct('>I')


def _u32(value):
    return U32.pack(value)


def _read_u32(data, offset):
    if len(data) < offset + 4:
        raise FrameError('Truncated payload')
    return U32.unpack_from(data, offset)[0], offset + 4


def _residue(value, params):
    return int(value).to_bytes(params.width, 'big')


def _read_residue(data, offset, params):
    end = offset + params.width
    if len(data) < end:
        raise FrameError('Truncated residue')
    value = int.from_bytes(data[offset:end], 'big')
    if value >= params.q:
        raise FrameError('Residue outside [0, q)')
    return value, end


def _vector(data, params, offset=0):
    try:
        return QuantizedVector.from_bytes(data, params, offset)
    except ArgumentError as error:
        raise FrameError(str(error))


def _expect(msg, msg_type):
    if msg.msg_type != msg_type:
        raise FrameError(f'Expected {msg_type.name}, got {msg.msg_type.name}')


# INIT_MODEL: dim, then float64 parameters

def init_model(round, sender_id, weights):
    weights = np.asarray(weights, dtype='>f8')
    return Message(MsgType.INIT_MODEL, round, sender_id, _u32(len(weights)) + weights.tobytes())


def read_init_model(msg):
    _expect(msg, MsgType.INIT_MODEL)
    dim, offset = _read_u32(msg.payload, 0)
    if len(msg.payload) != offset + 8 * dim:
        raise FrameError('INIT_MODEL payload size mismatch')
    return np.frombuffer(msg.payload, dtype='>f8', offset=offset, count=dim).astype(np.float64)


# INIT_PROJ_SEED: 32 raw seed bytes, k, d, compressed flag

def init_proj_seed(round, sender_id, seed, k, d, compressed=True):
    return Message(MsgType.INIT_PROJ_SEED, round, sender_id, bytes(seed) + _u32(k) + _u32(d) + bytes([int(compressed)]))


def read_init_proj_seed(msg):
    _expect(msg, MsgType.INIT_PROJ_SEED)
    if len(msg.payload) != 41:
        raise FrameError('INIT_PROJ_SEED payload must be 41 bytes')
    seed = msg.payload[:32]
    k, offset = _read_u32(msg.payload, 32)
    d, offset = _read_u32(msg.payload, offset)
    return seed, k, d, bool(msg.payload[offset])


def init_pk(round, sender_id, pk):
    return Message(MsgType.INIT_PK, round, sender_id, pk.to_bytes())


def read_init_pk(msg):
    _expect(msg, MsgType.INIT_PK)
    try:
        return PaillierPublicKey.from_bytes(msg.payload)
    except ArgumentError as error:
        raise FrameError(str(error))


def seed_reg(round, sender_id, mask_seed):
    return Message(MsgType.SEED_REG, round, sender_id, mask_seed.to_bytes())


def read_seed_reg(msg):
    _expect(msg, MsgType.SEED_REG)
    try:
        return MaskSeed.from_bytes(msg.payload)
    except ArgumentError as error:
        raise FrameError(str(error))


# ENC_MASK_PACK: client id, count, length-prefixed ciphertexts; frame round is the target round

def enc_mask_pack(round, sender_id, client_id, ciphertexts):
    body = b''.join(c.to_bytes() for c in ciphertexts)
    return Message(MsgType.ENC_MASK_PACK, round, sender_id, _u32(client_id) + _u32(len(ciphertexts)) + body)


def read_enc_mask_pack(msg):
    _expect(msg, MsgType.ENC_MASK_PACK)
    client_id, offset = _read_u32(msg.payload, 0)
    count, offset = _read_u32(msg.payload, offset)
    ciphertexts = []
    try:
        for _ in range(count):
            c, offset = Ciphertext.from_bytes(msg.payload, offset)
            ciphertexts.append(c)
    except ArgumentError as error:
        raise FrameError(str(error))
    if offset != len(msg.payload):
        raise FrameError('Trailing bytes in ENC_MASK_PACK')
    return client_id, ciphertexts


def _vector_message(msg_type):
    def build(round, sender_id, vector):
        return Message(msg_type, round, sender_id, vector.to_bytes())

    def read(msg, params):
        _expect(msg, msg_type)
        vector, offset = _vector(msg.payload, params)
        if offset != len(msg.payload):
            raise FrameError(f'Trailing bytes in {msg_type.name}')
        return vector

    return build, read


masked_update, read_masked_update = _vector_message(MsgType.MASKED_UPDATE)
std_grad, read_std_grad = _vector_message(MsgType.STD_GRAD)
global_grad, read_global_grad = _vector_message(MsgType.GLOBAL_GRAD)


# NORM_PAIR: client id, c_sum, squared norm of the masked projection mod q

def norm_pair(round, sender_id, client_id, c_sum, sq_norm_mod, params):
    return Message(MsgType.NORM_PAIR, round, sender_id, _u32(client_id) + c_sum.to_bytes() + _residue(sq_norm_mod, params))


def read_norm_pair(msg, params):
    _expect(msg, MsgType.NORM_PAIR)
    client_id, offset = _read_u32(msg.payload, 0)
    try:
        c_sum, offset = Ciphertext.from_bytes(msg.payload, offset)
    except ArgumentError as error:
        raise FrameError(str(error))
    sq_norm_mod, offset = _read_residue(msg.payload, offset, params)
    if offset != len(msg.payload):
        raise FrameError('Trailing bytes in NORM_PAIR')
    return client_id, c_sum, sq_norm_mod


def cos_p0(round, sender_id, client_id, p0, params):
    return Message(MsgType.COS_P0, round, sender_id, _u32(client_id) + _residue(p0, params))


def read_cos_p0(msg, params):
    _expect(msg, MsgType.COS_P0)
    client_id, offset = _read_u32(msg.payload, 0)
    p0, offset = _read_residue(msg.payload, offset, params)
    if offset != len(msg.payload):
        raise FrameError('Trailing bytes in COS_P0')
    return client_id, p0


# WEIGHTS_AND_MASKSUM: count, (client id, quantized weight) pairs, then the mask sum vector

def weights_and_masksum(round, sender_id, quantized_weights, mask_sum):
    pairs = b''.join(_u32(cid) + _residue(w, mask_sum.params) for cid, w in quantized_weights.items())
    return Message(
        MsgType.WEIGHTS_AND_MASKSUM, round, sender_id,
        _u32(len(quantized_weights)) + pairs + mask_sum.to_bytes())


def read_weights_and_masksum(msg, params):
    _expect(msg, MsgType.WEIGHTS_AND_MASKSUM)
    count, offset = _read_u32(msg.payload, 0)
    weights = {}
    for _ in range(count):
        cid, offset = _read_u32(msg.payload, offset)
        weights[cid], offset = _read_residue(msg.payload, offset, params)
    mask_sum, offset = _vector(msg.payload, params, offset)
    if offset != len(msg.payload):
        raise FrameError('Trailing bytes in WEIGHTS_AND_MASKSUM')
    return weights, mask_sum
