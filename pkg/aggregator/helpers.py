import hashlib
import random
import time
from contextlib import contextmanager


def derive_seed(master, *labels):
    """32-byte seed from an integer master seed and a label path."""
    salt_string = '-'.join([str(master)] + [str(label) for label in labels])
    return hashlib.sha256(salt_string.encode('utf-8')).digest()


def derive_int(master, *labels):
    return int.from_bytes(derive_seed(master, *labels)[:8], 'big')


def seeded_random(master, *labels):
    return random.Random(derive_int(master, *labels))


@contextmanager
def stopwatch():
    timing = {'ms': 0.0}
    start = time.perf_counter()
    try:
        yield timing
    finally:
        timing['ms'] = (time.perf_counter() - start) * 1000
