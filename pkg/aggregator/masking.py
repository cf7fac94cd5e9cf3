"""
Per-round additive masks r_i^t = G(s_i, t) mod q, derived identically by a
client and S1 from the seed the client registered at initialization.
"""
from dataclasses import dataclass
import hashlib
import logging

import numpy as np

from aggregator.encoding import QuantizedVector
from aggregator.errors import ArgumentError


logger = logging.getLogger(__name__)

BLOCK_COORDINATES = 512
# Extra bits drawn per residue when q is not a power of two
UNIFORMITY_SLACK_BITS = 64


@dataclass(frozen=True)
class MaskSeed:
    client_id: int
    seed: bytes

    def __post_init__(self):
        if len(self.seed) != 32:
            raise ArgumentError('Mask seeds are 32 bytes')

    def to_bytes(self):
        return self.client_id.to_bytes(4, 'big') + self.seed

    @classmethod
    def from_bytes(cls, data):
        if len(data) != 36:
            raise ArgumentError(f'Seed registration is 36 bytes, got {len(data)}')
        return cls(client_id=int.from_bytes(data[:4], 'big'), seed=bytes(data[4:]))


def _residue_bytes(q):
    bits = (q - 1).bit_length()
    if q & (q - 1) == 0:
        return (bits + 7) // 8, bits
    return (bits + UNIFORMITY_SLACK_BITS + 7) // 8, None


def derive_mask(seed, round, d, params):
    if round < 0:
        raise ArgumentError(f'Round must be non-negative, got {round}')
    q = params.q
    width, power_bits = _residue_bytes(q)
    truncate = (1 << power_bits) - 1 if power_bits is not None else None

    residues = []
    for block in range(0, (d + BLOCK_COORDINATES - 1) // BLOCK_COORDINATES):
        count = min(BLOCK_COORDINATES, d - block * BLOCK_COORDINATES)
        stream = hashlib.shake_256(
            b'mask' + seed.seed + round.to_bytes(8, 'big') + block.to_bytes(4, 'big')
        ).digest(count * width)
        for i in range(count):
            value = int.from_bytes(stream[i * width:(i + 1) * width], 'big')
            residues.append(value & truncate if truncate is not None else value % q)
    return QuantizedVector(np.array(residues, dtype=object), params)


def _check_compatible(a, b):
    if a.dim != b.dim:
        raise ArgumentError(f'Dimension mismatch: {a.dim} vs {b.dim}')
    if a.params != b.params:
        raise ArgumentError('Vectors use different fixed-point parameters')


def apply_mask(g, r):
    _check_compatible(g, r)
    return QuantizedVector((g.residues + r.residues) % g.params.q, g.params)


def unmask(masked, r):
    _check_compatible(masked, r)
    return QuantizedVector((masked.residues - r.residues) % masked.params.q, masked.params)
