"""
Bit-exact frame layout, big-endian throughout:

    length (4) | msg_type (1) | round (4) | sender_id (4) | payload

length counts everything after itself (9 header bytes plus the payload).
"""
from dataclasses import dataclass
from enum import IntEnum
import struct

from django.conf import settings

from aggregator.errors import FrameError, OversizeFrame, TruncatedFrame, UnknownMessageType


PREFIX = struct.Struct('>I')
HEADER = struct.Struct('>BII')
HEADER_BYTES = HEADER.size

S0_ID = 0xFFFFFFFE
S1_ID = 0xFFFFFFFF


class MsgType(IntEnum):
    INIT_MODEL = 1
    INIT_PROJ_SEED = 2
    INIT_PK = 3
    SEED_REG = 4
    ENC_MASK_PACK = 5
    MASKED_UPDATE = 6
    STD_GRAD = 7
    NORM_PAIR = 8
    COS_P0 = 9
    WEIGHTS_AND_MASKSUM = 10
    GLOBAL_GRAD = 11


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    round: int
    sender_id: int
    payload: bytes = b''


def max_frame_bytes():
    return getattr(settings, 'MAX_FRAME_BYTES', 256 * 1024 * 1024)


def encode_frame(msg, max_size=None):
    max_size = max_size or max_frame_bytes()
    length = HEADER_BYTES + len(msg.payload)
    if length > max_size:
        raise OversizeFrame(f'Frame of {length} bytes exceeds the {max_size} byte limit')
    return PREFIX.pack(length) + HEADER.pack(int(msg.msg_type), msg.round, msg.sender_id) + msg.payload


def frame_length(prefix, max_size=None):
    max_size = max_size or max_frame_bytes()
    if len(prefix) < PREFIX.size:
        raise TruncatedFrame('Frame shorter than its length prefix')
    (length,) = PREFIX.unpack_from(prefix)
    if length > max_size:
        raise OversizeFrame(f'Frame of {length} bytes exceeds the {max_size} byte limit')
    if length < HEADER_BYTES:
        raise TruncatedFrame(f'Frame length {length} is shorter than the header')
    return length


def decode_frame(data, max_size=None):
    data = bytes(data)
    length = frame_length(data, max_size)
    if len(data) < PREFIX.size + length:
        raise TruncatedFrame(f'Frame declares {length} bytes, buffer holds {len(data) - PREFIX.size}')
    if len(data) > PREFIX.size + length:
        raise FrameError(f'{len(data) - PREFIX.size - length} trailing bytes after frame')
    msg_type, round, sender_id = HEADER.unpack_from(data, PREFIX.size)
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise UnknownMessageType(f'Unknown message type {msg_type}')
    return Message(msg_type=msg_type, round=round, sender_id=sender_id, payload=data[PREFIX.size + HEADER_BYTES:])
