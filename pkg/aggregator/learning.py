"""
Desk-scale training substrate: synthetic Gaussian class clusters, client
sharding, softmax regression (optionally with one tanh hidden layer), mean
cross-entropy gradients and evaluation.
"""
from dataclasses import dataclass
import logging
import math
import struct

import numpy as np

from aggregator.errors import ArgumentError, NumericalError
from aggregator.helpers import derive_int


logger = logging.getLogger(__name__)

DATASET_HEADER = struct.Struct('>QQQQ')
MAX_PARTITION_ATTEMPTS = 100


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    seed: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def num_features(self):
        return self.features.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.classes, self.seed)

    def with_labels(self, labels):
        return Dataset(self.features, np.asarray(labels, dtype=np.int64), self.classes, self.seed)

    def to_bytes(self):
        header = DATASET_HEADER.pack(len(self), self.num_features, self.classes, self.seed)
        return header + self.features.astype('>f8').tobytes() + self.labels.astype('>i8').tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < DATASET_HEADER.size:
            raise ArgumentError('Dataset file is shorter than its header')
        samples, features, classes, seed = DATASET_HEADER.unpack_from(data)
        offset = DATASET_HEADER.size
        expected = offset + samples * features * 8 + samples * 8
        if len(data) != expected:
            raise ArgumentError(f'Dataset file has {len(data)} bytes, header implies {expected}')
        X = np.frombuffer(data, dtype='>f8', count=samples * features, offset=offset)
        y = np.frombuffer(data, dtype='>i8', count=samples, offset=offset + samples * features * 8)
        return cls(X.reshape(samples, features).astype(np.float64), y.astype(np.int64), classes, seed)

    def save(self, path):
        with open(path, 'wb') as handle:
            handle.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as handle:
            return cls.from_bytes(handle.read())


def class_means(features, classes, separation):
    """Cluster centres; they depend only on the shape so every draw shares one distribution."""
    if features >= classes:
        # Scaled one-hot means: every pair sits exactly `separation` apart
        means = np.zeros((classes, features))
        means[np.arange(classes), np.arange(classes)] = separation / math.sqrt(2)
        return means
    # Fewer features than classes: a circle with adjacent means `separation` apart
    angles = 2 * math.pi * np.arange(classes) / classes
    radius = separation / (2 * math.sin(math.pi / classes))
    means = np.zeros((classes, features))
    means[:, 0] = radius * np.cos(angles)
    if features > 1:
        means[:, 1] = radius * np.sin(angles)
    return means


def generate_synthetic(seed, samples, features, classes, separation):
    if classes < 2:
        raise ArgumentError('Need at least two classes')
    if samples < 1 or features < 1:
        raise ArgumentError('Need at least one sample and one feature')
    rng = np.random.default_rng(seed)
    means = class_means(features, classes, separation)
    labels = rng.integers(0, classes, size=samples)
    X = means[labels] + rng.standard_normal((samples, features))
    return Dataset(X, labels.astype(np.int64), classes, seed)


def partition(ds, n, scheme='iid', alpha=0.5, seed=0):
    if n < 1 or n > len(ds):
        raise ArgumentError(f'Cannot split {len(ds)} samples across {n} clients')
    rng = np.random.default_rng(seed)

    if scheme == 'iid':
        return [ds.subset(part) for part in np.array_split(rng.permutation(len(ds)), n)]

    if scheme != 'label-skew':
        raise ArgumentError(f'Unknown partition scheme {scheme!r}')

    for _ in range(MAX_PARTITION_ATTEMPTS):
        buckets = [[] for _ in range(n)]
        for label in range(ds.classes):
            members = rng.permutation(np.flatnonzero(ds.labels == label))
            proportions = rng.dirichlet(np.full(n, alpha))
            cuts = (np.cumsum(proportions)[:-1] * len(members)).astype(int)
            for client, part in enumerate(np.split(members, cuts)):
                buckets[client].extend(part.tolist())
        if all(buckets):
            return [ds.subset(sorted(bucket)) for bucket in buckets]
    raise ArgumentError(f'Label-skew partition left a client empty after {MAX_PARTITION_ATTEMPTS} draws')


@dataclass(frozen=True, eq=False)
class FederatedData:
    shards: list
    trusted: Dataset
    test: Dataset


def federated_data(seed, n, samples, test_samples, trusted_samples, features, classes,
                   separation, scheme='iid', alpha=0.5):
    """Client shards, the servers' trusted set and a held-out test set, all from one distribution."""
    train = generate_synthetic(seed, samples, features, classes, separation)
    trusted = generate_synthetic(derive_int(seed, 'trusted'), trusted_samples, features, classes, separation)
    test = generate_synthetic(derive_int(seed, 'test'), test_samples, features, classes, separation)
    return FederatedData(shards=partition(train, n, scheme, alpha, seed), trusted=trusted, test=test)


@dataclass(frozen=True)
class ModelSpec:
    features: int
    classes: int
    hidden: int = 0

    @property
    def dim(self):
        if self.hidden:
            return (self.features + 1) * self.hidden + (self.hidden + 1) * self.classes
        return (self.features + 1) * self.classes


def _with_bias(X):
    return np.hstack([X, np.ones((len(X), 1))])


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


class Model:
    def __init__(self, spec, weights=None):
        self.spec = spec
        if weights is None:
            weights = np.zeros(spec.dim)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (spec.dim,):
            raise ArgumentError(f'Model expects {spec.dim} parameters, got {weights.shape}')
        self.W = weights.copy()

    @classmethod
    def initialize(cls, spec, seed=0):
        if not spec.hidden:
            return cls(spec)
        rng = np.random.default_rng(seed)
        first = (spec.features + 1) * spec.hidden
        weights = np.zeros(spec.dim)
        weights[:first] = rng.standard_normal(first) / math.sqrt(spec.features + 1)
        weights[first:] = rng.standard_normal(spec.dim - first) / math.sqrt(spec.hidden + 1)
        return cls(spec, weights)

    def copy(self):
        return Model(self.spec, self.W)

    def _layers(self, W):
        spec = self.spec
        if not spec.hidden:
            return [W.reshape(spec.features + 1, spec.classes)]
        first = (spec.features + 1) * spec.hidden
        return [
            W[:first].reshape(spec.features + 1, spec.hidden),
            W[first:].reshape(spec.hidden + 1, spec.classes),
        ]

    def probabilities(self, X, W=None):
        layers = self._layers(self.W if W is None else W)
        Xb = _with_bias(X)
        if len(layers) == 1:
            return _softmax(Xb @ layers[0])
        H = np.tanh(Xb @ layers[0])
        return _softmax(_with_bias(H) @ layers[1])

    def loss_and_gradient(self, X, y, W=None):
        W = self.W if W is None else W
        layers = self._layers(W)
        Xb = _with_bias(X)
        onehot = np.eye(self.spec.classes)[y]
        batch = len(y)

        if len(layers) == 1:
            P = _softmax(Xb @ layers[0])
            delta = (P - onehot) / batch
            grads = [Xb.T @ delta]
        else:
            H = np.tanh(Xb @ layers[0])
            Hb = _with_bias(H)
            P = _softmax(Hb @ layers[1])
            delta = (P - onehot) / batch
            dH = (delta @ layers[1][:-1].T) * (1 - H ** 2)
            grads = [Xb.T @ dH, Hb.T @ delta]

        loss = -float(np.mean(np.log(np.clip(P[np.arange(batch), y], 1e-300, None))))
        gradient = np.concatenate([g.ravel() for g in grads])
        return loss, gradient

    def loss(self, X, y, W=None):
        return self.loss_and_gradient(X, y, W)[0]

    def predict(self, X):
        return np.argmax(self.probabilities(X), axis=1)

    def apply_update(self, gradient, learning_rate):
        self.W = self.W - learning_rate * np.asarray(gradient, dtype=np.float64)


def compute_gradient(model, shard, batch_size, rng):
    if len(shard) == 0:
        raise ArgumentError('Cannot compute a gradient on an empty shard')
    batch = rng.choice(len(shard), size=min(batch_size, len(shard)), replace=False)
    with np.errstate(over='ignore', invalid='ignore'):
        loss, gradient = model.loss_and_gradient(shard.features[batch], shard.labels[batch])
    if not np.all(np.isfinite(gradient)):
        raise NumericalError(
            f'Non-finite gradient (loss={loss}, max |W|={np.max(np.abs(model.W)):.3g}, '
            f'non-finite entries={int(np.count_nonzero(~np.isfinite(gradient)))})')
    return gradient


def reference_gradient(model, trusted, rng):
    if len(trusted) == 0:
        raise ArgumentError('Trusted dataset is empty')
    return compute_gradient(model, trusted, len(trusted), rng)


def evaluate(model, test_set):
    if len(test_set) == 0:
        raise ArgumentError('Cannot evaluate on an empty test set')
    accuracy = float(np.mean(model.predict(test_set.features) == test_set.labels))
    loss = model.loss(test_set.features, test_set.labels)
    return accuracy, loss


def train_plain(model, dataset, steps, batch_size, learning_rate, seed=0):
    """Centralised SGD on one dataset; returns the per-step losses."""
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        batch = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        loss, gradient = model.loss_and_gradient(dataset.features[batch], dataset.labels[batch])
        model.apply_update(gradient, learning_rate)
        losses.append(loss)
    return losses
