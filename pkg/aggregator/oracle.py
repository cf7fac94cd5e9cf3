"""
Plaintext reference aggregators and the executable pieces of the privacy
argument. Nothing here touches masks or ciphertexts.
"""
from dataclasses import dataclass
import logging

import numpy as np
from scipy import stats

from aggregator.errors import ArgumentError


logger = logging.getLogger(__name__)

RESAMPLE_ATTEMPTS = 100
PARALLEL_TOLERANCE = 1e-12


@dataclass
class FLTrustResult:
    aggregate: np.ndarray
    weights: np.ndarray
    trust_scores: np.ndarray
    cosines: np.ndarray
    norms: np.ndarray


def _stack(gradients):
    if len(gradients) == 0:
        raise ArgumentError('Need at least one gradient')
    return np.stack([np.asarray(g, dtype=np.float64) for g in gradients])


def fltrust_plain(gradients, g_standard, norms=None):
    """FLTrust in the clear. `norms` overrides the client norms (e.g. JL estimates)."""
    G = _stack(gradients)
    g_standard = np.asarray(g_standard, dtype=np.float64)
    norm_std = float(np.linalg.norm(g_standard))
    if norm_std == 0:
        raise ArgumentError('Reference gradient has zero norm')

    norms = np.linalg.norm(G, axis=1) if norms is None else np.asarray(norms, dtype=np.float64)
    cosines = np.zeros(len(G))
    positive = norms > 0
    cosines[positive] = (G[positive] @ g_standard) / (norms[positive] * norm_std)
    cosines = np.clip(cosines, -1.0, 1.0)

    trust_scores = np.maximum(cosines, 0.0)
    weights = np.zeros(len(G))
    total = trust_scores.sum()
    if total > 0:
        weights[positive] = trust_scores[positive] / total * norm_std / norms[positive]
    return FLTrustResult(
        aggregate=weights @ G, weights=weights, trust_scores=trust_scores, cosines=cosines, norms=norms)


def fedavg_plain(gradients):
    return _stack(gradients).mean(axis=0)


def krum_scores(gradients, f_count):
    G = _stack(gradients)
    n = len(G)
    if n <= 2 * f_count + 2:
        raise ArgumentError(f'Krum needs more than {2 * f_count + 2} clients, got {n}')
    squared = np.sum((G[:, None, :] - G[None, :, :]) ** 2, axis=2)
    neighbours = n - f_count - 2
    return np.array([np.sort(np.delete(squared[i], i))[:neighbours].sum() for i in range(n)])


def krum_plain(gradients, f_count):
    scores = krum_scores(gradients, f_count)
    return np.asarray(gradients[int(np.argmin(scores))], dtype=np.float64)


def trimmed_mean_plain(gradients, beta):
    G = _stack(gradients)
    if beta < 0 or 2 * beta >= len(G):
        raise ArgumentError(f'Trimmed mean needs 2*beta < n, got beta={beta}, n={len(G)}')
    ordered = np.sort(G, axis=0)
    return ordered[beta:len(G) - beta].mean(axis=0)


def aggregate_plain(scheme, gradients, g_standard=None, krum_f=0, trim_beta=0):
    """Dispatch for the plaintext baselines."""
    if scheme == 'fltrust-plain':
        return fltrust_plain(gradients, g_standard).aggregate
    if scheme == 'fedavg':
        return fedavg_plain(gradients)
    if scheme == 'krum':
        return krum_plain(gradients, krum_f)
    if scheme == 'trimmed-mean':
        return trimmed_mean_plain(gradients, trim_beta)
    raise ArgumentError(f'{scheme!r} is not a plaintext scheme')


def construct_equivalent_gradient(rho, norm_target, g_standard, seed):
    """
    A vector psi with psi . g_standard = rho and |psi| = norm_target whose
    orthogonal part is random. Anything S1 learns about a client (inner product
    with the reference and the norm) is equally consistent with psi.
    """
    g_standard = np.asarray(g_standard, dtype=np.float64)
    d = len(g_standard)
    if d < 2:
        raise ArgumentError('Need d >= 2 to build an orthogonal component')
    if norm_target < 0:
        raise ArgumentError('Target norm must be non-negative')
    norm_std = float(np.linalg.norm(g_standard))
    if norm_std == 0:
        raise ArgumentError('Reference gradient has zero norm')

    bound = norm_target * norm_std
    if abs(rho) > bound * (1 + 1e-12):
        raise ArgumentError(f'Infeasible: |rho|={abs(rho)} exceeds |psi||g_std|={bound}')

    unit = g_standard / norm_std
    along = rho / norm_std
    across = np.sqrt(max(norm_target ** 2 - along ** 2, 0.0))

    rng = np.random.default_rng(seed)
    for _ in range(RESAMPLE_ATTEMPTS):
        u = rng.standard_normal(d)
        orthogonal = u - (u @ unit) * unit
        size = np.linalg.norm(orthogonal)
        if size > PARALLEL_TOLERANCE * np.linalg.norm(u):
            return along * unit + across * orthogonal / size
    raise ArgumentError('Could not sample a direction orthogonal to the reference gradient')


def masked_uniformity_pvalues(samples, q, buckets=16):
    """
    Per-coordinate chi-square p-values for `samples` (rows of residues in
    [0, q)) against the uniform distribution over `buckets` equal ranges.
    """
    rows = [[int(v) for v in row] for row in samples]
    if not rows:
        raise ArgumentError('Need at least one sample')
    counts = np.zeros((len(rows[0]), buckets), dtype=np.int64)
    for row in rows:
        for coordinate, value in enumerate(row):
            counts[coordinate, value * buckets // q] += 1
    return np.array([stats.chisquare(observed).pvalue for observed in counts])
