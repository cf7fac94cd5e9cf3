"""
Fixed-point encoding of real gradients as residues modulo the mask modulus q,
and the parameter validator that keeps every SecNorm/SecCos/SecAgg intermediate
liftable from Z_q back to the integers.
"""
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from aggregator.errors import ArgumentError


logger = logging.getLogger(__name__)

DEFAULT_KAPPA2 = 64
DEFAULT_F = 16
DEFAULT_FW = 20
DEFAULT_CLIP = 8.0


@dataclass(frozen=True)
class FixedPointParams:
    q: int
    f: int = DEFAULT_F
    fw: int = DEFAULT_FW
    clip: float = DEFAULT_CLIP

    def __post_init__(self):
        if self.q < 3:
            raise ArgumentError(f'Modulus q must be at least 3, got {self.q}')
        if self.f < 0 or self.fw < 0:
            raise ArgumentError('Fractional bit counts must be non-negative')
        if self.clip <= 0:
            raise ArgumentError('Clipping bound must be positive')

    @classmethod
    def from_kappa2(cls, kappa2=DEFAULT_KAPPA2, f=DEFAULT_F, fw=DEFAULT_FW, clip=DEFAULT_CLIP):
        return cls(q=1 << kappa2, f=f, fw=fw, clip=clip)

    @property
    def kappa2(self):
        return (self.q - 1).bit_length()

    @property
    def width(self):
        """Bytes per residue on the wire."""
        return (self.kappa2 + 7) // 8

    @property
    def scale(self):
        return 1 << self.f

    @property
    def max_magnitude(self):
        return self.scale * self.clip


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    residues: np.ndarray
    params: FixedPointParams

    def __post_init__(self):
        if not isinstance(self.residues, np.ndarray) or self.residues.dtype != object:
            object.__setattr__(self, 'residues', np.array([int(v) for v in self.residues], dtype=object))

    @property
    def dim(self):
        return len(self.residues)

    def __eq__(self, other):
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        return self.params == other.params and self.dim == other.dim and all(
            int(a) == int(b) for a, b in zip(self.residues, other.residues))

    def __len__(self):
        return self.dim

    def lifted(self):
        return np.array([center_lift(int(v), self.params.q) for v in self.residues], dtype=object)

    def to_bytes(self):
        width = self.params.width
        return self.dim.to_bytes(4, 'big') + b''.join(int(v).to_bytes(width, 'big') for v in self.residues)

    @classmethod
    def from_bytes(cls, data, params, offset=0):
        if len(data) < offset + 4:
            raise ArgumentError('Truncated vector header')
        dim = int.from_bytes(data[offset:offset + 4], 'big')
        width = params.width
        end = offset + 4 + dim * width
        if len(data) < end:
            raise ArgumentError(f'Truncated vector: {dim} residues of {width} bytes expected')
        body = data[offset + 4:end]
        residues = [int.from_bytes(body[i * width:(i + 1) * width], 'big') for i in range(dim)]
        if any(v >= params.q for v in residues):
            raise ArgumentError('Residue outside [0, q) in vector payload')
        return cls(np.array(residues, dtype=object), params), end

    @classmethod
    def zeros(cls, dim, params):
        return cls(np.array([0] * dim, dtype=object), params)


def residue_vector(values, params):
    """Wrap already-reduced integers as a QuantizedVector."""
    residues = np.array([int(v) % params.q for v in values], dtype=object)
    return QuantizedVector(residues, params)


def encode(x, params):
    x = min(max(float(x), -params.clip), params.clip)
    return int(round(x * params.scale)) % params.q


def decode(v, params):
    if not 0 <= v < params.q:
        raise ArgumentError(f'Residue out of range [0, q): {v}')
    return center_lift(v, params.q) / params.scale


def center_lift(v, q):
    v = int(v) % q
    return v - q if v >= (q + 1) // 2 else v


def quantize(vector, params):
    """Clamp to +/-clip, scale by 2^f and reduce mod q. Returns (vector, saturated count)."""
    vector = np.asarray(vector, dtype=np.float64)
    saturated = int(np.count_nonzero(np.abs(vector) > params.clip))
    # int() of each float keeps magnitudes past 2^63 exact
    scaled = np.rint(np.clip(vector, -params.clip, params.clip) * float(params.scale))
    residues = np.array([int(v) % params.q for v in scaled], dtype=object)
    return QuantizedVector(residues, params), saturated


def dequantize(qv, scale_bits=None):
    scale_bits = qv.params.f if scale_bits is None else scale_bits
    return np.array([float(v) for v in qv.lifted()], dtype=np.float64) / float(1 << scale_bits)


@dataclass
class ValidationReport:
    passed: bool
    failed_bound: str = None
    margins: dict = field(default_factory=dict)

    @property
    def message(self):
        margins = ', '.join(f'{name}: {margin:+.1f} bits' for name, margin in self.margins.items())
        if self.passed:
            return f'PASS ({margins})'
        return f'FAIL on bound {self.failed_bound} ({margins})'

    def __bool__(self):
        return self.passed


def _margin_bits(limit_bits, value):
    if value <= 0:
        return math.inf
    return limit_bits - math.log2(value)


def parameter_bounds(d, k, n, params, N_bits, compressed=True):
    """Margins (in bits) of the four exactness bounds; positive means satisfied."""
    half_q_bits = math.log2(params.q) - 1
    magnitude = params.max_magnitude
    # compressed rows are sums of d signed terms; uncompressed ones are single coordinates
    row = d * magnitude if compressed else magnitude
    return {
        'a': _margin_bits(half_q_bits, k * row ** 2),
        # full-dimension inner product for SecCos
        'b': _margin_bits(half_q_bits, d * magnitude * magnitude),
        # weighted aggregate per coordinate, weight rounding included
        'c': _margin_bits(half_q_bits, (n * (1 << params.fw) + n) * magnitude),
        # Paillier plaintext space holds the sum of k products of residues
        'd': _margin_bits(N_bits, k * params.q ** 2),
    }


def validate_parameters(d, k, n, params, N_bits, compressed=True):
    if min(d, k, n, N_bits) <= 0:
        raise ArgumentError('validate_parameters needs positive d, k, n and N_bits')
    margins = parameter_bounds(d, k, n, params, N_bits, compressed)
    for name, margin in margins.items():
        if margin <= 0:
            return ValidationReport(passed=False, failed_bound=name, margins=margins)
    return ValidationReport(passed=True, margins=margins)


def suggest_kappa2(d, k, n, f=DEFAULT_F, fw=DEFAULT_FW, clip=DEFAULT_CLIP, floor=DEFAULT_KAPPA2, compressed=True):
    """Smallest power-of-two modulus size passing bounds (a)-(c)."""
    kappa2 = floor
    while True:
        if (1 << f) * clip < (1 << (kappa2 - 1)):
            params = FixedPointParams.from_kappa2(kappa2, f=f, fw=fw, clip=clip)
            margins = parameter_bounds(d, k, n, params, N_bits=1, compressed=compressed)
            if all(margins[name] > 0 for name in 'abc'):
                return kappa2
        kappa2 += 1


def modulus_bits(kappa1):
    """Guaranteed floor of log2(N) for keygen(kappa1)."""
    return 2 * kappa1 - 1


def suggest_kappa1(k, params):
    """Smallest prime size whose modulus N satisfies bound (d)."""
    needed = math.log2(k * params.q ** 2)
    return max(16, math.floor((needed + 1) / 2) + 1)
