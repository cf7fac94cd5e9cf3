from aggregator.transport.network import link_of


LINKS = ('c2s', 'c2s1', 's0s1', 's1s0', 's2c')


def byte_accounting(transcript):
    """Per-link byte totals of the frames a round actually delivered."""
    totals = dict.fromkeys(LINKS, 0)
    for delivery in transcript.deliveries:
        link = link_of(delivery.src, delivery.dst)
        if link in totals:
            totals[link] += delivery.size
    return totals


def expected_exponentiations(k, n):
    """SecNorm phase: k scalar multiplications per client plus one decryption each."""
    return k * n + n


def closed_form_s0s1_bits(k, n, d, kappa1, kappa2):
    """Bits exchanged between S0 and S1 for one round, offline packs included.

    keygen(kappa1) yields a modulus N of 2*kappa1 bits, so a ciphertext mod N^2
    carries 4*kappa1 bits: k*n pack entries plus n norm ciphertexts. The rest is
    residues: two per client on the norm and cosine shares, the weights, and
    three d-vectors (reference gradient, mask sum, global gradient).
    """
    return (k * n + n) * 4 * kappa1 + (3 * n + 3 * d) * kappa2


def closed_form_client_bits(d, n, kappa2):
    return d * n * kappa2
