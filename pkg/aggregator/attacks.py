"""
Poisoning attacks. Everything here acts on plaintext gradients or labels, before
a Byzantine client quantizes and masks its update, so attackers still follow
the protocol message format exactly.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from aggregator.errors import ArgumentError
from aggregator.helpers import derive_int


logger = logging.getLogger(__name__)

ATTACKS = ('none', 'signflip', 'labelflip', 'gaussian', 'scaling', 'minmax', 'minsum')
COLLUDING_ATTACKS = ('minmax', 'minsum')
DEFAULT_SCALING_FACTOR = 6.0

SEARCH_ITERATIONS = 50
SEARCH_TOLERANCE = 1e-5
MAX_DOUBLINGS = 64


def sign_flip(g):
    return -np.asarray(g, dtype=np.float64)


def label_flip(labels, classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ArgumentError(f'Labels must lie in [0, {classes})')
    return classes - 1 - labels


def gaussian_attack(g, seed):
    g = np.asarray(g, dtype=np.float64)
    if g.size == 0:
        raise ArgumentError('Cannot perturb an empty gradient')
    sigma = float(np.std(g))
    if sigma == 0:
        return g.copy()
    rng = np.random.default_rng(seed)
    return g + rng.normal(0.0, 2 * sigma, size=g.shape)


def scaling_attack(g, c=DEFAULT_SCALING_FACTOR):
    if c <= 0:
        raise ArgumentError(f'Scaling factor must be positive, got {c}')
    return c * np.asarray(g, dtype=np.float64)


def _pairwise_distances(gradients):
    diffs = gradients[:, None, :] - gradients[None, :, :]
    return np.sqrt(np.sum(diffs ** 2, axis=2))


def perturbation_direction(mean):
    norm = np.linalg.norm(mean)
    if norm == 0:
        return None
    return -mean / norm


def max_distance_budget(gradients):
    """Largest pairwise distance among the benign gradients."""
    return float(np.max(_pairwise_distances(gradients)))


def sum_distance_budget(gradients):
    """Largest sum of squared distances from one benign gradient to the others."""
    return float(np.max(np.sum(_pairwise_distances(gradients) ** 2, axis=1)))


def max_distance_to(candidate, gradients):
    return float(np.max(np.linalg.norm(gradients - candidate, axis=1)))


def sum_distance_to(candidate, gradients):
    return float(np.sum(np.linalg.norm(gradients - candidate, axis=1) ** 2))


def _largest_gamma(within_budget):
    lo, hi = 0.0, 1.0
    for _ in range(MAX_DOUBLINGS):
        if not within_budget(hi):
            break
        lo, hi = hi, hi * 2
    else:
        return lo

    for _ in range(SEARCH_ITERATIONS):
        if hi - lo <= SEARCH_TOLERANCE:
            break
        mid = (lo + hi) / 2
        if within_budget(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _colluding_gamma(gradients, distance, budget):
    gradients = np.asarray(gradients, dtype=np.float64)
    if len(gradients) < 2:
        raise ArgumentError('Colluding attacks need at least two benign gradients')
    mean = gradients.mean(axis=0)
    direction = perturbation_direction(mean)
    if direction is None:
        return mean, None, 0.0
    limit = budget(gradients)
    gamma = _largest_gamma(lambda gamma: distance(mean + gamma * direction, gradients) <= limit)
    return mean, direction, gamma


def min_max_gamma(gradients):
    return _colluding_gamma(gradients, max_distance_to, max_distance_budget)[2]


def min_sum_gamma(gradients):
    return _colluding_gamma(gradients, sum_distance_to, sum_distance_budget)[2]


def _malicious(gradients, distance, budget):
    mean, direction, gamma = _colluding_gamma(gradients, distance, budget)
    if direction is None:
        return mean
    return mean + gamma * direction


def min_max(gradients):
    return _malicious(gradients, max_distance_to, max_distance_budget)


def min_sum(gradients):
    return _malicious(gradients, sum_distance_to, sum_distance_budget)


@dataclass(frozen=True)
class AttackPlan:
    kind: str = 'none'
    fraction: float = 0.0
    attackers: frozenset = field(default_factory=frozenset)
    scaling_factor: float = DEFAULT_SCALING_FACTOR
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ArgumentError(f'Unknown attack {self.kind!r}, expected one of {ATTACKS}')
        if not 0 <= self.fraction <= 1:
            raise ArgumentError(f'Byzantine fraction must lie in [0, 1], got {self.fraction}')

    @classmethod
    def build(cls, kind, fraction, n, seed, scaling_factor=DEFAULT_SCALING_FACTOR):
        count = int(round(fraction * n)) if kind != 'none' else 0
        rng = np.random.default_rng(derive_int(seed, 'attackers'))
        attackers = frozenset(int(i) for i in rng.choice(n, size=count, replace=False)) if count else frozenset()
        logger.debug(f'Attack {kind}: {count} of {n} clients are Byzantine')
        return cls(kind=kind, fraction=fraction, attackers=attackers, scaling_factor=scaling_factor, seed=seed)

    def is_attacker(self, client_id):
        return client_id in self.attackers

    @property
    def colluding(self):
        return self.kind in COLLUDING_ATTACKS

    @property
    def poisons_labels(self):
        return self.kind == 'labelflip'

    def poison_labels(self, client_id, labels, classes):
        if self.poisons_labels and self.is_attacker(client_id):
            return label_flip(labels, classes)
        return labels

    def perturb(self, client_id, g, round):
        """Per-client gradient attacks; label and colluding attacks pass through."""
        if not self.is_attacker(client_id):
            return g
        if self.kind == 'signflip':
            return sign_flip(g)
        if self.kind == 'gaussian':
            return gaussian_attack(g, derive_int(self.seed, 'gaussian', round, client_id))
        if self.kind == 'scaling':
            return scaling_attack(g, self.scaling_factor)
        return g

    def collude(self, benign):
        """Replace every colluder's gradient with the shared min-max/min-sum vector."""
        if not self.colluding or len(benign) < 2:
            return dict(benign)
        stacked = np.stack([benign[cid] for cid in sorted(benign)])
        malicious = min_max(stacked) if self.kind == 'minmax' else min_sum(stacked)
        return {cid: malicious.copy() for cid in benign}
