"""
The arithmetic of the two-server sub-protocols, one function per side.

SecNorm: S0 sends |m*|^2 mod q and Enc(m* . r*); S1 removes the mask with
|g*|^2 = |m*|^2 + |r*|^2 - 2 m* . r* (mod q).
SecCos: S0 sends p0 = m . g_std, S1 subtracts p1 = r . g_std.
SecAgg: S1 sends the quantized weights and the weighted mask sum; S0 subtracts
it from the weighted sum of masked updates.

Every function that decrypts goes through `paillier.decrypt` at call time.
"""
import logging

import numpy as np

from aggregator import paillier
from aggregator.encoding import QuantizedVector, center_lift, dequantize
from aggregator.errors import ArgumentError, IntegrityError


logger = logging.getLogger(__name__)


def squared_norm_mod(v):
    q = v.params.q
    return sum(int(x) * int(x) for x in v.residues) % q


def dot_mod(a, b):
    if a.dim != b.dim:
        raise ArgumentError(f'Dimension mismatch: {a.dim} vs {b.dim}')
    return sum(int(x) * int(y) for x, y in zip(a.residues, b.residues)) % a.params.q


# SecNorm

def masked_norm_share(masked_star, ciphertexts, pk):
    """S0: squared norm of the compressed masked update and the encrypted cross term."""
    if len(ciphertexts) != masked_star.dim:
        raise ArgumentError(f'{len(ciphertexts)} encrypted mask entries for a {masked_star.dim}-dim vector')
    c_sum = paillier.encrypted_dot(ciphertexts, [int(v) for v in masked_star.residues], pk)
    return squared_norm_mod(masked_star), c_sum


def recover_squared_norm(sq_norm_mod, c_sum, mask_sq_norm_mod, sk, pk, q):
    """S1: the exact integer |g*|^2 from S0's share and |r*|^2 mod q."""
    cross = paillier.decrypt(c_sum, sk, pk) % q
    lifted = center_lift((sq_norm_mod + mask_sq_norm_mod - 2 * cross) % q, q)
    if lifted < 0:
        raise IntegrityError(f'Squared norm lifted to {lifted}; parameters do not bound the projection')
    return lifted


# SecCos

def cos_share(v, g_std_q):
    return dot_mod(v, g_std_q)


def recover_inner_product(p0, p1, params):
    return center_lift((p0 - p1) % params.q, params.q)


def cosine_from_inner(inner, norm, norm_std, params):
    if norm == 0 or norm_std == 0:
        return 0.0
    real_inner = inner / float(params.scale) ** 2
    return min(1.0, max(-1.0, real_inner / (norm * norm_std)))


# Trust scores and weights

def compute_trust_weights(cosines, norms, norm_std):
    """Returns (trust scores, weights, no_trust) keyed like `cosines`."""
    if not cosines:
        raise ArgumentError('No clients to weight')
    trust = {cid: max(0.0, cos) for cid, cos in cosines.items()}
    total = sum(trust.values())
    if total == 0:
        return trust, dict.fromkeys(cosines, 0.0), True
    weights = {}
    for cid, score in trust.items():
        norm = norms[cid]
        weights[cid] = score / total * norm_std / norm if norm > 0 and score > 0 else 0.0
    return trust, weights, False


def quantize_weights(weights, params):
    """Weights scaled by 2^fw; each must fit in one residue.

    The weighted sum of clipped coordinates must also stay below q/2, or the
    aggregate would wrap.
    """
    quantized = {cid: int(round(w * (1 << params.fw))) for cid, w in weights.items()}
    for cid, w in quantized.items():
        if not 0 <= w < params.q:
            raise IntegrityError(f'Quantized weight of client {cid} is outside [0, q): {w}')
    if sum(quantized.values()) * params.max_magnitude >= params.q // 2:
        raise IntegrityError(f'Quantized weights sum to {sum(quantized.values())}; the aggregate could wrap mod q')
    return quantized


# SecAgg

def _weighted_sum(vectors, quantized_weights):
    total = np.array([0] * _common_dim(vectors), dtype=object)
    for cid, weight in quantized_weights.items():
        if weight:
            total = total + vectors[cid].residues * weight
    return total


def _common_dim(vectors):
    dims = {v.dim for v in vectors.values()}
    if len(dims) != 1:
        raise ArgumentError(f'Vectors have mixed dimensions {sorted(dims)}')
    return dims.pop()


def mask_sum(quantized_weights, masks, params):
    """S1: m = sum_i w_i r_i mod q."""
    return QuantizedVector(_weighted_sum(masks, quantized_weights) % params.q, params)


def aggregate_masked(masked_updates, quantized_weights, masked_sum):
    """S0: sum_i w_i (g_i + r_i) - m mod q, still scaled by 2^(f+fw)."""
    params = masked_sum.params
    missing = set(quantized_weights) - set(masked_updates)
    if missing:
        raise IntegrityError(f'Weights for clients without an update: {sorted(missing)}')
    total = _weighted_sum(masked_updates, quantized_weights) - masked_sum.residues
    return QuantizedVector(total % params.q, params)


def decode_aggregate(aggregate, params):
    return dequantize(aggregate, params.f + params.fw)
