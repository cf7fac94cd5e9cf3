"""
State held by each entity. The split is the privacy boundary: S0 gets the
public key and encrypted compressed masks but never a secret key or a mask
seed; S1 gets keys and seeds but only sees the scalar messages S0 sends it.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from aggregator.helpers import derive_int
from aggregator.learning import Model, compute_gradient, reference_gradient


logger = logging.getLogger(__name__)


def reference_gradient_at(model_spec, W, trusted, reference_seed, round):
    """Full-batch gradient on the trusted set at the given weights."""
    rng = np.random.default_rng(derive_int(reference_seed, 'reference', round))
    return reference_gradient(Model(model_spec, W), trusted, rng)


@dataclass(eq=False)
class ClientState:
    client_id: int
    W: np.ndarray
    mask_seed: object
    shard: object
    params: object
    model_spec: object
    batch_size: int
    batch_seed: int

    def model(self):
        return Model(self.model_spec, self.W)

    def local_gradient(self, round):
        rng = np.random.default_rng(derive_int(self.batch_seed, 'batch', self.client_id, round))
        return compute_gradient(self.model(), self.shard, self.batch_size, rng)

    def apply_update(self, g_global, learning_rate):
        self.W = self.W - learning_rate * g_global


@dataclass(eq=False)
class ServerS0State:
    projection_seed: bytes
    projection: object
    pk: object
    params: object
    W: np.ndarray
    # (client_id, round) -> list of Ciphertext, filled offline
    mask_packs: dict = field(default_factory=dict)
    masked_updates: dict = field(default_factory=dict)
    std_grad: object = None

    @property
    def compressed(self):
        return self.projection is not None

    def reset_round(self):
        self.masked_updates = {}
        self.std_grad = None

    def apply_update(self, g_global, learning_rate):
        self.W = self.W - learning_rate * g_global


@dataclass(eq=False)
class ServerS1State:
    pk: object
    sk: object
    mask_seeds: dict
    trusted: object
    projection: object
    params: object
    model_spec: object
    W: np.ndarray
    reference_seed: int
    # round -> quantized reference gradient
    references: dict = field(default_factory=dict)
    # (client_id, round) -> |R r|^2 mod q, kept from the offline phase
    mask_norms: dict = field(default_factory=dict)

    @property
    def compressed(self):
        return self.projection is not None

    @property
    def k(self):
        return self.projection.k if self.projection is not None else 1

    def reference_gradient(self, round):
        return reference_gradient_at(self.model_spec, self.W, self.trusted, self.reference_seed, round)

    def apply_update(self, g_global, learning_rate):
        self.W = self.W - learning_rate * g_global


@dataclass(eq=False)
class Federation:
    config: object
    clients: dict
    s0: ServerS0State
    s1: ServerS1State
    network: object
    attack_plan: object
    test_set: object
    model_spec: object
    k: int
    offline_ms: float = 0.0
    offline_bytes: dict = field(default_factory=dict)
    init_deliveries: list = field(default_factory=list)

    @property
    def compressed(self):
        return self.s0.compressed

    @property
    def d(self):
        return self.model_spec.dim

    def global_model(self):
        return Model(self.model_spec, self.s1.W)

    def close(self):
        self.network.close()

    def __iter__(self):
        # Unpacks as (clients, s0, s1)
        return iter((list(self.clients.values()), self.s0, self.s1))
