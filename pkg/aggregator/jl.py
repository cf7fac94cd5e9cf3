"""
Integer Johnson-Lindenstrauss projection.

R has Rademacher entries generated row by row from a public 32-byte seed, so both
servers regenerate the same matrix without shipping k*d entries. Entries are
integers and the 1/sqrt(k) factor is applied only in the real domain, which lets
the projection commute with masking mod q.
"""
from dataclasses import dataclass, field
import hashlib
import logging
import math

import numpy as np

from aggregator.encoding import QuantizedVector, center_lift
from aggregator.errors import ArgumentError, IntegrityError
from aggregator.helpers import derive_seed


logger = logging.getLogger(__name__)

BLOCK_ROWS = 256
LIMB_BITS = 16
LIMB_MASK = (1 << LIMB_BITS) - 1


def required_dimension(epsilon, delta):
    if not 0 < epsilon < 1 or not 0 < delta < 1:
        raise ArgumentError(f'epsilon and delta must lie in (0, 1), got {epsilon}, {delta}')
    return math.ceil((4 + 2 * math.log(1 / delta)) / epsilon ** 2)


def compressed_dimension(d, ratio, epsilon=0.2, delta=0.01):
    """k for a compression ratio; required_dimension is the floor and d the cap."""
    if ratio >= 1:
        return d
    k = max(math.ceil(ratio * d), required_dimension(epsilon, delta))
    return min(k, d)


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    seed: bytes
    k: int
    d: int
    # Explicit entries, only for hand-built test doubles
    entries: np.ndarray = field(default=None, repr=False)

    def row_block(self, start, stop):
        if self.entries is not None:
            return self.entries[start:stop]
        width = (self.d + 7) // 8
        block = np.empty((stop - start, self.d), dtype=np.int8)
        for offset, row in enumerate(range(start, stop)):
            digest = hashlib.shake_256(b'jl-row' + self.seed + row.to_bytes(4, 'big')).digest(width)
            bits = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))[:self.d]
            block[offset] = 1 - 2 * bits.astype(np.int8)
        return block

    def blocks(self):
        for start in range(0, self.k, BLOCK_ROWS):
            stop = min(start + BLOCK_ROWS, self.k)
            yield start, self.row_block(start, stop)

    def materialize(self):
        return self.row_block(0, self.k)

    def entry(self, i, j):
        return int(self.row_block(i, i + 1)[0, j])

    @classmethod
    def from_entries(cls, entries):
        entries = np.asarray(entries, dtype=np.int8)
        k, d = entries.shape
        return cls(seed=bytes(32), k=k, d=d, entries=entries)


def sample_matrix(seed, k, d):
    if len(seed) != 32:
        raise ArgumentError('Projection seed must be 32 bytes')
    if not 1 <= k <= d:
        raise ArgumentError(f'Need 1 <= k <= d, got k={k}, d={d}')
    return ProjectionMatrix(seed=bytes(seed), k=k, d=d)


def _limbs(residues, q):
    """Split residues into 16-bit int64 limbs so int64 matmuls stay exact."""
    count = max(1, math.ceil((q - 1).bit_length() / LIMB_BITS))
    return [
        (shift, np.array([(int(v) >> shift) & LIMB_MASK for v in residues], dtype=np.int64))
        for shift in range(0, count * LIMB_BITS, LIMB_BITS)
    ]


def project_mod_q(matrix, vector):
    if vector.dim != matrix.d:
        raise ArgumentError(f'Vector has dim {vector.dim}, projection expects {matrix.d}')
    q = vector.params.q
    limbs = _limbs(vector.residues, q)
    out = np.array([0] * matrix.k, dtype=object)
    for start, block in matrix.blocks():
        rows = block.astype(np.int64)
        for shift, limb in limbs:
            partial = (rows @ limb).astype(object)
            out[start:start + len(rows)] += partial * (1 << shift)
    return QuantizedVector(out % q, vector.params)


def project_real(matrix, vector):
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (matrix.d,):
        raise ArgumentError(f'Vector has shape {vector.shape}, projection expects ({matrix.d},)')
    out = np.empty(matrix.k, dtype=np.float64)
    for start, block in matrix.blocks():
        out[start:start + len(block)] = block.astype(np.float64) @ vector
    return out / math.sqrt(matrix.k)


def norm_estimate_from_projection(sq_norm_mod, k, params):
    lifted = center_lift(sq_norm_mod, params.q)
    if lifted < 0:
        raise IntegrityError(f'Squared norm lifted to a negative value ({lifted})')
    return math.sqrt(lifted / k) / params.scale


@dataclass
class DistortionReport:
    d: int
    k: int
    epsilon: float
    squared_ratios: np.ndarray
    cosine_errors: np.ndarray

    @property
    def trials(self):
        return len(self.squared_ratios)

    @property
    def violation_rate(self):
        outside = (self.squared_ratios < 1 - self.epsilon) | (self.squared_ratios > 1 + self.epsilon)
        return float(np.mean(outside))

    @property
    def max_cosine_error(self):
        return float(np.max(self.cosine_errors)) if len(self.cosine_errors) else 0.0


def distortion_trials(d, k, trials, seed, epsilon=0.2):
    """Monte-Carlo squared-norm distortion and cosine error of random projections."""
    rng = np.random.default_rng(seed)
    ratios = np.empty(trials)
    cosine_errors = np.empty(trials)
    for trial in range(trials):
        matrix = sample_matrix(derive_seed(seed, 'distortion', trial), k, d)
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        w = u + rng.standard_normal(d) / math.sqrt(d)
        pu, pw = project_real(matrix, u), project_real(matrix, w)
        ratios[trial] = float(pu @ pu)
        original = float(u @ w) / (np.linalg.norm(u) * np.linalg.norm(w))
        compressed = float(pu @ pw) / (np.linalg.norm(pu) * np.linalg.norm(pw))
        cosine_errors[trial] = abs(compressed - original)
    logger.debug(f'JL distortion d={d} k={k}: {trials} trials')
    return DistortionReport(d=d, k=k, epsilon=epsilon, squared_ratios=ratios, cosine_errors=cosine_errors)
