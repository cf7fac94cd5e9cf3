"""
Additively homomorphic Paillier encryption with g fixed to N+1.

Keys and ciphertexts are immutable values. Randomness comes from the OS CSPRNG
unless a seeded random.Random is passed in, which the simulator does so that
round transcripts are reproducible.
"""
from contextlib import contextmanager
from collections import Counter
from dataclasses import dataclass
import logging
import secrets

import gmpy2

from aggregator.errors import ArgumentError, ConfigurationError, DecryptionError


logger = logging.getLogger(__name__)

MILLER_RABIN_ROUNDS = 40
MIN_SECURE_KAPPA1 = 128
MIN_TEST_KAPPA1 = 16
PRIME_ATTEMPTS_PER_BIT = 200

# Exponentiation / multiplication tallies for the complexity benchmarks
operations = Counter()


@contextmanager
def count_operations():
    before = operations.copy()
    tally = Counter()
    try:
        yield tally
    finally:
        tally.update(operations)
        tally.subtract(before)


@dataclass(frozen=True)
class PaillierPublicKey:
    N: int

    @property
    def g(self):
        return self.N + 1

    @property
    def n_squared(self):
        return self.N * self.N

    @property
    def bits(self):
        return self.N.bit_length()

    def to_bytes(self):
        return int_to_bytes(self.N)

    @classmethod
    def from_bytes(cls, data):
        N, _ = int_from_bytes(data)
        return cls(N=N)


@dataclass(frozen=True)
class PaillierSecretKey:
    lam: int
    mu: int


@dataclass(frozen=True, slots=True)
class Ciphertext:
    value: int

    def to_bytes(self):
        return int_to_bytes(self.value)

    @classmethod
    def from_bytes(cls, data, offset=0):
        value, offset = int_from_bytes(data, offset)
        return cls(value=value), offset


def int_to_bytes(value):
    """4-byte big-endian length, then the big-endian magnitude."""
    magnitude = int(value).to_bytes((int(value).bit_length() + 7) // 8, 'big')
    return len(magnitude).to_bytes(4, 'big') + magnitude


def int_from_bytes(data, offset=0):
    if len(data) < offset + 4:
        raise ArgumentError('Truncated integer length prefix')
    size = int.from_bytes(data[offset:offset + 4], 'big')
    end = offset + 4 + size
    if len(data) < end:
        raise ArgumentError(f'Truncated integer: wanted {size} bytes')
    return int.from_bytes(data[offset + 4:end], 'big'), end


def _random_prime(bits, rng):
    for _ in range(PRIME_ATTEMPTS_PER_BIT * bits):
        # Top two bits set so that p*q has exactly 2*bits bits
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if gmpy2.is_prime(candidate, MILLER_RABIN_ROUNDS):
            return candidate
    raise ConfigurationError(f'Could not generate a {bits}-bit prime')


def keygen(kappa1=512, rng=None, insecure_test=False):
    if kappa1 < MIN_TEST_KAPPA1:
        raise ConfigurationError(f'kappa1={kappa1} is below the {MIN_TEST_KAPPA1}-bit floor')
    if kappa1 < MIN_SECURE_KAPPA1 and not insecure_test:
        raise ConfigurationError(f'kappa1={kappa1} needs the insecure-test flag')

    rng = rng or secrets.SystemRandom()
    p = _random_prime(kappa1, rng)
    q = _random_prime(kappa1, rng)
    while q == p:
        q = _random_prime(kappa1, rng)

    N = p * q
    lam = int(gmpy2.lcm(p - 1, q - 1))
    # With g = N+1, L(g^lambda mod N^2) = lambda mod N
    mu = int(gmpy2.invert(lam, N))

    logger.debug(f'Generated {N.bit_length()}-bit Paillier modulus')
    return PaillierPublicKey(N=N), PaillierSecretKey(lam=lam, mu=mu)


def _random_unit(pk, rng):
    while True:
        r = rng.randrange(1, pk.N)
        if gmpy2.gcd(r, pk.N) == 1:
            return r


def encrypt(m, pk, rng=None):
    if not 0 <= m < pk.N:
        raise ArgumentError(f'Plaintext out of range [0, N): {m}')
    rng = rng or secrets.SystemRandom()
    n_squared = pk.n_squared
    r = _random_unit(pk, rng)
    # (N+1)^m = 1 + m*N (mod N^2)
    value = (1 + m * pk.N) * gmpy2.powmod(r, pk.N, n_squared) % n_squared
    operations['exp'] += 1
    operations['encrypt'] += 1
    return Ciphertext(value=int(value))


def decrypt(c, sk, pk):
    n_squared = pk.n_squared
    if not 0 < c.value < n_squared:
        raise DecryptionError('Ciphertext outside (0, N^2)')
    u = gmpy2.powmod(c.value, sk.lam, n_squared)
    operations['exp'] += 1
    operations['decrypt'] += 1
    numerator = u - 1
    if numerator % pk.N:
        raise DecryptionError('Malformed ciphertext: L(u) is not an integer')
    return int(numerator // pk.N * sk.mu % pk.N)


def add_ct(cs, pk):
    if not cs:
        raise ArgumentError('add_ct needs at least one ciphertext')
    n_squared = pk.n_squared
    total = gmpy2.mpz(1)
    for c in cs:
        total = total * c.value % n_squared
    operations['mul'] += len(cs) - 1
    return Ciphertext(value=int(total))


def scalar_mul(c, k, pk):
    if not 0 <= k < pk.N:
        raise ArgumentError(f'Scalar out of range [0, N): {k}')
    operations['exp'] += 1
    return Ciphertext(value=int(gmpy2.powmod(c.value, k, pk.n_squared)))


def encrypt_vector(values, pk, rng=None):
    ciphertexts = []
    for index, m in enumerate(values):
        m = int(m)
        if not 0 <= m < pk.N:
            raise ArgumentError(f'Component {index} out of range [0, N): {m}')
        ciphertexts.append(encrypt(m, pk, rng))
    return ciphertexts


def encrypted_dot(ciphertexts, scalars, pk):
    """Enc(sum a_j * r_j) from Enc(r_j) and plaintext a_j."""
    if len(ciphertexts) != len(scalars):
        raise ArgumentError(f'Length mismatch: {len(ciphertexts)} ciphertexts, {len(scalars)} scalars')
    return add_ct([scalar_mul(c, int(a), pk) for c, a in zip(ciphertexts, scalars)], pk)
