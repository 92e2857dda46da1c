"""Paillier additively homomorphic cryptosystem.

Key generation, probabilistic encryption, decryption, homomorphic addition,
ciphertext-plaintext multiplication, and re-randomization.  Plaintexts are
integers in ``[0, n)``; ciphertexts are integers mod ``n**2``.  The generator
is fixed to ``g = n + 1`` so encryption costs one modular exponentiation for
the random factor plus one multiplication.
"""

from __future__ import annotations

import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import gmpy2

MIN_KEY_BITS = 512

# Miller-Rabin rounds; composite acceptance probability below 4**-40 = 2**-80.
_PRIMALITY_ROUNDS = 40

_default_rng = random.SystemRandom()


class ParameterError(ValueError):
    """Invalid key-generation or operand parameters."""


class MalformedCiphertextError(ValueError):
    """Ciphertext is outside the ring or shares a factor with the modulus."""


class KeyMismatchError(ValueError):
    """Operands were produced under different public keys."""


class PublicKey:
    """Public key: modulus ``n`` of exactly ``key_bits`` bits, ``g = n + 1``."""

    def __init__(self, n: int, key_bits: int):
        if n.bit_length() != key_bits:
            raise ParameterError("modulus does not have the declared bit length")
        self.n = n
        self.key_bits = key_bits
        self.g = n + 1
        self.n_squared = n * n
        # Fixed-width wire size of one ciphertext.
        self.ciphertext_bytes = 2 * key_bits // 8

    def __eq__(self, other):
        return isinstance(other, PublicKey) and self.n == other.n

    def __hash__(self):
        return hash(self.n)

    def __repr__(self):
        return f"PublicKey(bits={self.key_bits})"

    def random_unit(self, rng=None) -> int:
        """Random element of Z_n* (unit group of the plaintext ring)."""
        rng = rng or _default_rng
        while True:
            r = rng.randrange(1, self.n)
            if gmpy2.gcd(r, self.n) == 1:
                return r


class SecretKey:
    """Secret key: the prime factors plus the precomputed decryption pair.

    ``lam = lcm(p-1, q-1)`` and ``mu = lam^-1 mod n`` (valid because
    ``g = n + 1`` makes ``L(g^lam mod n^2) = lam mod n``).
    """

    def __init__(self, p: int, q: int, public_key: PublicKey):
        if p * q != public_key.n:
            raise ParameterError("prime factors do not match the public modulus")
        if p == q:
            raise ParameterError("prime factors must be distinct")
        self.p = p
        self.q = q
        self.public_key = public_key
        self.lam = int(gmpy2.lcm(p - 1, q - 1))
        self.mu = int(gmpy2.invert(self.lam, public_key.n))

    def __repr__(self):
        return f"SecretKey(bits={self.public_key.key_bits})"


@dataclass(frozen=True)
class Ciphertext:
    """A Paillier ciphertext: a unit of the ring mod n^2."""

    value: int
    public_key: PublicKey

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(self.public_key.ciphertext_bytes, "big")

    @classmethod
    def from_bytes(cls, data: bytes, public_key: PublicKey) -> "Ciphertext":
        if len(data) != public_key.ciphertext_bytes:
            raise MalformedCiphertextError(
                f"expected {public_key.ciphertext_bytes} bytes, got {len(data)}"
            )
        return cls(int.from_bytes(data, "big"), public_key)


def _prime_of_bits(bits: int, rng) -> int:
    # Top two bits forced so p*q has exactly 2*bits bits; low bit forced odd.
    while True:
        candidate = rng.getrandbits(bits) | (1 << bits - 1) | (1 << bits - 2) | 1
        if gmpy2.is_prime(candidate, _PRIMALITY_ROUNDS):
            return candidate


def keygen(key_bits: int, rng=None) -> tuple[PublicKey, SecretKey]:
    """Generate a keypair whose modulus has exactly ``key_bits`` bits.

    ``rng`` may be a seeded ``random.Random`` for reproducible test keys;
    production keys should use the default system randomness.
    """
    if key_bits < MIN_KEY_BITS:
        raise ParameterError(f"key_bits must be at least {MIN_KEY_BITS}")
    if key_bits % 2 != 0:
        raise ParameterError("key_bits must be even")
    rng = rng or _default_rng
    half = key_bits // 2
    while True:
        p = _prime_of_bits(half, rng)
        q = _prime_of_bits(half, rng)
        n = p * q
        if p != q and n.bit_length() == key_bits:
            break
    pk = PublicKey(n, key_bits)
    return pk, SecretKey(p, q, pk)


def encrypt(pk: PublicKey, x: int, rng=None) -> Ciphertext:
    """Probabilistic encryption of ``x`` in ``[0, n)``.

    Two encryptions of the same plaintext differ except with negligible
    probability, because the random factor is drawn fresh from Z_n*.
    """
    if not 0 <= x < pk.n:
        raise ParameterError(f"plaintext out of range [0, n): {x}")
    r = pk.random_unit(rng)
    # g^x = (n+1)^x = 1 + x*n mod n^2
    gx = (1 + x * pk.n) % pk.n_squared
    value = int(gx * gmpy2.powmod(r, pk.n, pk.n_squared) % pk.n_squared)
    return Ciphertext(value, pk)


def decrypt(sk: SecretKey, ct: Ciphertext) -> int:
    """Recover the unique plaintext in ``[0, n)``."""
    pk = sk.public_key
    if ct.public_key != pk:
        raise KeyMismatchError("ciphertext was produced under a different key")
    c = ct.value
    if not 0 < c < pk.n_squared or gmpy2.gcd(c, pk.n_squared) != 1:
        raise MalformedCiphertextError("ciphertext is not a unit mod n^2")
    u = gmpy2.powmod(c, sk.lam, pk.n_squared)
    # L(u) = (u - 1) / n, exact by construction.
    return int((u - 1) // pk.n * sk.mu % pk.n)


def hom_add(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Homomorphic addition: decrypts to ``(x1 + x2) mod n``."""
    if c1.public_key != pk or c2.public_key != pk:
        raise KeyMismatchError("operands are under different keys")
    return Ciphertext(c1.value * c2.value % pk.n_squared, pk)


def ct_pt_mul(pk: PublicKey, ct: Ciphertext, k: int) -> Ciphertext:
    """Ciphertext-plaintext multiplication: decrypts to ``(x * k) mod n``.

    Implemented by modular exponentiation, never by repeated addition.
    """
    if ct.public_key != pk:
        raise KeyMismatchError("ciphertext is under a different key")
    if not 0 <= k < pk.n:
        raise ParameterError(f"multiplier out of range [0, n): {k}")
    return Ciphertext(int(gmpy2.powmod(ct.value, k, pk.n_squared)), pk)


def rerandomize(pk: PublicKey, ct: Ciphertext, rng=None) -> Ciphertext:
    """Fresh-looking ciphertext of the same plaintext.

    Multiplying by an encryption of zero leaves the plaintext fixed but makes
    the output's random factor uniform on Z_n*, so the result is distributed
    identically to a fresh encryption.
    """
    if ct.public_key != pk:
        raise KeyMismatchError("ciphertext is under a different key")
    r = pk.random_unit(rng)
    value = int(ct.value * gmpy2.powmod(r, pk.n, pk.n_squared) % pk.n_squared)
    return Ciphertext(value, pk)


def _encrypt_chunk(args):
    n, key_bits, xs, seed = args
    pk = PublicKey(n, key_bits)
    rng = random.Random(seed)
    return [encrypt(pk, x, rng).value for x in xs]


def batch_encrypt(pk: PublicKey, xs, rng=None, workers: int = 1) -> list[Ciphertext]:
    """Encrypt a sequence, optionally across worker processes.

    Results are order-stable regardless of ``workers``: each chunk gets its
    own seed derived in sequence order, so parallelism only changes which
    random factors are used, never the plaintext-to-slot mapping.
    """
    xs = list(xs)
    if workers <= 1 or len(xs) < 2 * workers:
        return [encrypt(pk, x, rng) for x in xs]
    rng = rng or _default_rng
    chunk = (len(xs) + workers - 1) // workers
    jobs = []
    for start in range(0, len(xs), chunk):
        seed = rng.getrandbits(64)
        jobs.append((pk.n, pk.key_bits, xs[start : start + chunk], seed))
    out: list[Ciphertext] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for values in pool.map(_encrypt_chunk, jobs):
            out.extend(Ciphertext(v, pk) for v in values)
    return out


# --- key files -------------------------------------------------------------
#
# Plain text container, one field per line:
#
#   secrec-paillier <public|secret> v1
#   bits <decimal>
#   n <hex>            (public)
#   p <hex>  q <hex>   (secret only, one per line)
#
# The secret file stores only the factors; lam and mu are recomputed on load.

_MAGIC = "secrec-paillier"


def save_public_key(pk: PublicKey, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_MAGIC} public v1\n")
        fh.write(f"bits {pk.key_bits}\n")
        fh.write(f"n {pk.n:x}\n")


def save_secret_key(sk: SecretKey, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_MAGIC} secret v1\n")
        fh.write(f"bits {sk.public_key.key_bits}\n")
        fh.write(f"p {sk.p:x}\n")
        fh.write(f"q {sk.q:x}\n")


def _parse_key_file(path: str, kind: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != f"{_MAGIC} {kind} v1":
        raise ParameterError(f"{path}: not a {_MAGIC} {kind} v1 file")
    fields = {}
    for ln in lines[1:]:
        name, _, value = ln.partition(" ")
        fields[name] = value
    return fields


def load_public_key(path: str) -> PublicKey:
    fields = _parse_key_file(path, "public")
    return PublicKey(int(fields["n"], 16), int(fields["bits"]))


def load_secret_key(path: str) -> SecretKey:
    fields = _parse_key_file(path, "secret")
    p, q = int(fields["p"], 16), int(fields["q"], 16)
    bits = int(fields["bits"])
    return SecretKey(p, q, PublicKey(p * q, bits))
