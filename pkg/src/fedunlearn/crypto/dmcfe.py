"""Decentralized multi-client functional encryption for label-bound sums.

The construction is the pairing-based decentralized inner-product scheme with
the weight vector fixed to all-ones, so the only function a combined key can
evaluate is the plain sum of every participant's input under one label.

Client i holds a secret pair s_i in Z_p^2 and pairwise seeds shared with every
other client. For round label r the client uses the round pair
``s_i(r) = PRF(s_i, r)``, so keys and ciphertexts of different rounds never
combine::

    (u1, u2)  = H_G1(r)
    ct_i      = g1^x_i * u1^s_i1(r) * u2^s_i2(r)
    dk_i      = g2^(s_i(r) + T_i v)          componentwise
    T_i       = sum_{j<i} F(seed_ij) - sum_{j>i} F(seed_ij)   (2x2, sums to 0)
    v         = H_Zp(f_id || r || digest(P))

Decryption multiplies the ciphertexts, strips the key term with two pairings
and recovers the signed sum from e(g1, g2)^sum with baby-step giant-step.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .bsgs import BSGSTable, DiscreteLogNotFound
from .groups import CURVE_ORDER, G1_BYTES, G2_BYTES, PairingGroup, expand_to_scalars, get_group

SUM = "sum"
LABEL_BYTES = 8
DIGEST_BYTES = 32
SUPPORTED_SECURITY_LEVELS = {128: "bls12_381", 256: "bls12_381"}


class DMCFEError(Exception):
    """Base class for scheme errors."""


class UnsupportedSecurityLevel(DMCFEError):
    pass


class BoundTooLarge(DMCFEError):
    pass


class DuplicateIdentity(DMCFEError):
    pass


class UnknownIdentity(DMCFEError):
    pass


class NotAParticipant(DMCFEError):
    pass


class MismatchedShares(DMCFEError):
    pass


class MissingShare(DMCFEError):
    pass


class PlaintextOutOfBound(DMCFEError):
    pass


class DecryptionFailure(DMCFEError):
    """No bounded sum matches: omitted, extra or foreign ciphertexts, or a bad key."""


@dataclass(frozen=True)
class PublicParams:
    security_level: int
    n: int
    f_bits: int
    bound: int
    backend: str = "bls12_381"
    curve: str = "BLS12-381"
    dst_label: bytes = b"FEDUNLEARN-V01-LABEL-BLS12381G1_XMD:SHA-256_SSWU_RO_"
    dst_function: bytes = b"FEDUNLEARN-V01-FUNCTION-HMAC-SHA256"

    @property
    def group(self) -> PairingGroup:
        return get_group(self.backend)

    @property
    def order(self) -> int:
        return self.group.order

    @property
    def sum_bound(self) -> int:
        return self.n * self.bound

    @property
    def scale(self) -> float:
        return float(2 ** self.f_bits)

    @property
    def clip_value(self) -> float:
        return self.bound / self.scale


def setup(
    security_level: int = 256,
    n: int = 10,
    f_bits: int = 16,
    bound: int = 2 ** 19,
    backend: str = "bls12_381",
) -> PublicParams:
    """Select the curve and fix the fixed-point format for a federation of ``n`` clients.

    ``backend="mock"`` keeps the same prime order and encodings but tracks
    exponents in the clear.
    """
    if security_level not in SUPPORTED_SECURITY_LEVELS:
        raise UnsupportedSecurityLevel(
            f"security level {security_level} not supported; choose from {sorted(SUPPORTED_SECURITY_LEVELS)}"
        )
    if n < 1:
        raise ValueError("need at least one client")
    if f_bits < 0 or bound < 1:
        raise ValueError("f_bits must be >= 0 and bound >= 1")
    group = get_group(backend)
    if 2 * n * bound >= group.order:
        raise BoundTooLarge(f"2*n*B = {2 * n * bound} must stay below the group order")
    return PublicParams(security_level=security_level, n=n, f_bits=f_bits, bound=bound, backend=backend)


# ---------------------------------------------------------------------------
# keys


@dataclass(frozen=True)
class EncryptionKey:
    client_id: str
    s: tuple[int, int] = field(repr=False)


@dataclass(frozen=True)
class ClientSecretKey:
    client_id: str
    s: tuple[int, int] = field(repr=False)
    seeds: Mapping[str, bytes] = field(repr=False)


class TrustedBootstrap:
    """In-process stand-in for authenticated pairwise key agreement.

    Every pair of roster members receives the same 256-bit seed. Each identity
    may be issued keys once.
    """

    def __init__(self, client_ids: Iterable[str], seed: int | bytes | None = None) -> None:
        ids = [str(c) for c in client_ids]
        if len(set(ids)) != len(ids):
            raise DuplicateIdentity("roster contains duplicate identities")
        self.roster = tuple(ids)
        if seed is None:
            self._master = os.urandom(32)
        elif isinstance(seed, bytes):
            self._master = hashlib.sha256(seed).digest()
        else:
            self._master = hashlib.sha256(b"bootstrap" + int(seed).to_bytes(16, "big", signed=True)).digest()
        self._issued: set[str] = set()

    def pairwise_seed(self, a: str, b: str) -> bytes:
        lo, hi = sorted((a, b))
        return hmac.new(self._master, b"pair\x00" + _encode_id(lo) + _encode_id(hi), hashlib.sha256).digest()

    def secret_pair(self, client_id: str, order: int) -> tuple[int, int]:
        s1, s2 = expand_to_scalars(self._master, b"secret\x00" + _encode_id(client_id), 2, order)
        return s1, s2

    def issue(self, client_id: str) -> None:
        if client_id not in self.roster:
            raise UnknownIdentity(f"{client_id!r} is not on the roster")
        if client_id in self._issued:
            raise DuplicateIdentity(f"keys already issued for {client_id!r}")
        self._issued.add(client_id)


def keygen(pp: PublicParams, client_id: str, bootstrap: TrustedBootstrap) -> tuple[ClientSecretKey, EncryptionKey]:
    client_id = str(client_id)
    bootstrap.issue(client_id)
    s = bootstrap.secret_pair(client_id, pp.order)
    seeds = {j: bootstrap.pairwise_seed(client_id, j) for j in bootstrap.roster if j != client_id}
    return ClientSecretKey(client_id, s, seeds), EncryptionKey(client_id, s)


def _encode_id(client_id: str) -> bytes:
    raw = str(client_id).encode()
    return len(raw).to_bytes(4, "big") + raw


def encode_label(label: int) -> bytes:
    return int(label).to_bytes(LABEL_BYTES, "big")


def participant_digest(participants: Iterable[str]) -> bytes:
    """SHA-256 over the sorted, length-prefixed client ids."""
    ids = sorted(str(p) for p in participants)
    if len(set(ids)) != len(ids):
        raise ValueError("participant set contains duplicates")
    return hashlib.sha256(b"".join(_encode_id(i) for i in ids)).digest()


def _round_secret(s: tuple[int, int], label: int, order: int) -> tuple[int, int]:
    key = s[0].to_bytes(32, "big") + s[1].to_bytes(32, "big")
    a, b = expand_to_scalars(key, b"round\x00" + encode_label(label), 2, order)
    return a, b


def _function_vector(pp: PublicParams, function_id: str, label: int, digest: bytes) -> tuple[int, int]:
    msg = function_id.encode() + b"\x00" + encode_label(label) + digest
    a, b = expand_to_scalars(pp.dst_function, msg, 2, pp.order)
    return a, b


def _prf_matrix(seed: bytes, label: int, digest: bytes, order: int) -> list[list[int]]:
    a, b, c, d = expand_to_scalars(seed, b"mask\x00" + encode_label(label) + digest, 4, order)
    return [[a, b], [c, d]]


def mask_matrix(pp: PublicParams, sk: ClientSecretKey, label: int, participants: Sequence[str]) -> list[list[int]]:
    """T_i for this (label, participant set); sums to the zero matrix over the set."""
    ids = sorted(str(p) for p in participants)
    me = sk.client_id
    if me not in ids:
        raise NotAParticipant(f"{me!r} not in participant set")
    digest = participant_digest(ids)
    p = pp.order
    t = [[0, 0], [0, 0]]
    for j in ids:
        if j == me:
            continue
        if j not in sk.seeds:
            raise NotAParticipant(f"no pairwise seed between {me!r} and {j!r}")
        f = _prf_matrix(sk.seeds[j], label, digest, p)
        sign = 1 if j < me else -1
        for r in range(2):
            for c in range(2):
                t[r][c] = (t[r][c] + sign * f[r][c]) % p
    return t


@dataclass(frozen=True)
class PartialDecKey:
    d1: Any
    d2: Any
    round: int
    function_id: str
    participants_digest: bytes

    def to_bytes(self, pp: PublicParams) -> bytes:
        g = pp.group
        return g.g2_to_bytes(self.d1) + g.g2_to_bytes(self.d2) + encode_label(self.round) + self.participants_digest

    @classmethod
    def from_bytes(cls, pp: PublicParams, data: bytes, function_id: str = SUM) -> "PartialDecKey":
        if len(data) != PARTIAL_KEY_BYTES:
            raise ValueError(f"partial key must be {PARTIAL_KEY_BYTES} bytes, got {len(data)}")
        g = pp.group
        d1 = g.g2_from_bytes(data[:G2_BYTES])
        d2 = g.g2_from_bytes(data[G2_BYTES : 2 * G2_BYTES])
        off = 2 * G2_BYTES
        label = int.from_bytes(data[off : off + LABEL_BYTES], "big")
        digest = bytes(data[off + LABEL_BYTES :])
        return cls(d1, d2, label, function_id, digest)


PARTIAL_KEY_BYTES = 2 * G2_BYTES + LABEL_BYTES + DIGEST_BYTES


@dataclass(frozen=True)
class FunctionalDecKey:
    d1: Any
    d2: Any
    round: int
    function_id: str = SUM
    participants_digest: bytes = b""


def dkey_share(
    pp: PublicParams,
    sk: ClientSecretKey,
    function_id: str,
    label: int,
    participants: Sequence[str],
) -> PartialDecKey:
    if function_id != SUM:
        raise ValueError(f"only the {SUM!r} function is supported")
    t = mask_matrix(pp, sk, label, participants)
    digest = participant_digest(participants)
    v = _function_vector(pp, function_id, label, digest)
    s = _round_secret(sk.s, label, pp.order)
    p = pp.order
    e1 = (s[0] + t[0][0] * v[0] + t[0][1] * v[1]) % p
    e2 = (s[1] + t[1][0] * v[0] + t[1][1] * v[1]) % p
    g = pp.group
    return PartialDecKey(g.g2_mul(g.g2(), e1), g.g2_mul(g.g2(), e2), int(label), function_id, digest)


def combine_shares_unchecked(pp: PublicParams, shares: Sequence[PartialDecKey]) -> FunctionalDecKey:
    """Componentwise product of shares with no metadata checks.

    Models a server that ignores the tags; whether the result decrypts is then
    decided by the group arithmetic alone.
    """
    if not shares:
        raise MissingShare("no shares")
    g = pp.group
    d1 = g.g2_sum([s.d1 for s in shares])
    d2 = g.g2_sum([s.d2 for s in shares])
    first = shares[0]
    return FunctionalDecKey(d1, d2, first.round, first.function_id, first.participants_digest)


def dkey_comb(
    pp: PublicParams,
    shares: Sequence[PartialDecKey],
    participants: Sequence[str] | None = None,
) -> FunctionalDecKey:
    shares = list(shares)
    if not shares:
        raise MissingShare("no shares supplied")
    tags = {(s.round, s.function_id, s.participants_digest) for s in shares}
    if len(tags) != 1:
        raise MismatchedShares("shares disagree on round, function or participant set")
    if participants is not None:
        if shares[0].participants_digest != participant_digest(participants):
            raise MismatchedShares("shares were issued for a different participant set")
        if len(shares) < len(participants):
            raise MissingShare(f"{len(participants) - len(shares)} share(s) missing")
        if len(shares) > len(participants):
            raise MismatchedShares("more shares than participants")
    return combine_shares_unchecked(pp, shares)


# ---------------------------------------------------------------------------
# fixed point


def quantize(w, pp: PublicParams):
    """round(clip(w, -B/2^f, B/2^f) * 2^f); arrays map to int64 arrays."""
    arr = np.asarray(w, dtype=np.float64)
    lim = pp.clip_value
    q = np.rint(np.clip(arr, -lim, lim) * pp.scale).astype(np.int64)
    if q.ndim == 0:
        return int(q)
    return q


def dequantize(x, pp: PublicParams):
    arr = np.asarray(x, dtype=np.float64) / pp.scale
    if arr.ndim == 0:
        return float(arr)
    return arr


# ---------------------------------------------------------------------------
# encryption


@dataclass(frozen=True)
class Ciphertext:
    element: Any
    round: int

    def to_bytes(self, pp: PublicParams) -> bytes:
        return pp.group.g1_to_bytes(self.element) + encode_label(self.round)

    @classmethod
    def from_bytes(cls, pp: PublicParams, data: bytes) -> "Ciphertext":
        if len(data) != CIPHERTEXT_BYTES:
            raise ValueError(f"ciphertext must be {CIPHERTEXT_BYTES} bytes, got {len(data)}")
        return cls(pp.group.g1_from_bytes(data[:G1_BYTES]), int.from_bytes(data[G1_BYTES:], "big"))


CIPHERTEXT_BYTES = G1_BYTES + LABEL_BYTES


def label_points(pp: PublicParams, label: int) -> tuple[Any, Any]:
    g = pp.group
    enc = encode_label(label)
    return g.hash_to_g1(enc + b"\x01", pp.dst_label), g.hash_to_g1(enc + b"\x02", pp.dst_label)


def _label_mask(pp: PublicParams, ek: EncryptionKey, label: int) -> Any:
    g = pp.group
    u1, u2 = label_points(pp, label)
    s = _round_secret(ek.s, label, pp.order)
    return g.g1_add(g.g1_mul(u1, s[0]), g.g1_mul(u2, s[1]))


def _check_plaintext(pp: PublicParams, x: int) -> int:
    x = int(x)
    if abs(x) > pp.bound:
        raise PlaintextOutOfBound(f"|{x}| exceeds bound {pp.bound}")
    return x


def encrypt(pp: PublicParams, ek: EncryptionKey, x: int, label: int) -> Ciphertext:
    x = _check_plaintext(pp, x)
    g = pp.group
    elem = g.g1_add(g.g1_mul(g.g1(), x % pp.order), _label_mask(pp, ek, label))
    return Ciphertext(elem, int(label))


def encrypt_vector(pp: PublicParams, ek: EncryptionKey, xs: Iterable[int], label: int) -> list[Ciphertext]:
    """Encrypt several values under one label; the label mask is computed once."""
    values = [_check_plaintext(pp, x) for x in xs]
    g = pp.group
    mask = _label_mask(pp, ek, label)
    return [Ciphertext(g.g1_add(g.g1_mul(g.g1(), x % pp.order), mask), int(label)) for x in values]


_TABLES: dict[tuple, BSGSTable] = {}


def bsgs_table(pp: PublicParams, size: int | None = None) -> BSGSTable:
    """Shared table for +/- n*B, built once per (params, size)."""
    key = (pp, size)
    table = _TABLES.get(key)
    if table is None:
        table = BSGSTable(pp.group, pp.sum_bound, size)
        _TABLES[key] = table
    return table


class Decryptor:
    """Decrypts many ciphertext tuples under one functional key and label."""

    def __init__(self, pp: PublicParams, dk: FunctionalDecKey, label: int, table: BSGSTable | None = None) -> None:
        if dk.function_id != SUM:
            raise DecryptionFailure(f"key is for function {dk.function_id!r}")
        self.pp = pp
        self.label = int(label)
        self.dk = dk
        self.table = table if table is not None else bsgs_table(pp)
        if self.table.bound != pp.sum_bound:
            raise ValueError("BSGS table does not cover +/- n*B")
        g = pp.group
        u1, u2 = label_points(pp, label)
        self._neg_u = (g.g1_neg(u1), g.g1_neg(u2))

    def decrypt_element(self, c: Any) -> int:
        g = self.pp.group
        target = g.multi_pairing([c, self._neg_u[0], self._neg_u[1]], [g.g2(), self.dk.d1, self.dk.d2])
        try:
            return self.table.solve(target)
        except DiscreteLogNotFound:
            raise DecryptionFailure("aggregate outside the recoverable range") from None

    def decrypt(self, cts: Sequence[Ciphertext]) -> int:
        if not cts:
            raise DecryptionFailure("no ciphertexts")
        if any(ct.round != self.label for ct in cts):
            raise DecryptionFailure("ciphertext label does not match the decryption round")
        return self.decrypt_element(self.pp.group.g1_sum([ct.element for ct in cts]))


def decrypt(
    pp: PublicParams,
    cts: Sequence[Ciphertext],
    dk: FunctionalDecKey,
    label: int,
    table: BSGSTable | None = None,
) -> int:
    """Return sum(x_i) as a signed integer, or raise DecryptionFailure."""
    return Decryptor(pp, dk, label, table).decrypt(cts)


__all__ = [
    "CURVE_ORDER",
    "CIPHERTEXT_BYTES",
    "PARTIAL_KEY_BYTES",
    "SUM",
    "BoundTooLarge",
    "Ciphertext",
    "ClientSecretKey",
    "DMCFEError",
    "DecryptionFailure",
    "Decryptor",
    "DuplicateIdentity",
    "EncryptionKey",
    "FunctionalDecKey",
    "MismatchedShares",
    "MissingShare",
    "NotAParticipant",
    "PartialDecKey",
    "PlaintextOutOfBound",
    "PublicParams",
    "TrustedBootstrap",
    "UnknownIdentity",
    "UnsupportedSecurityLevel",
    "bsgs_table",
    "combine_shares_unchecked",
    "decrypt",
    "dequantize",
    "dkey_comb",
    "dkey_share",
    "encrypt",
    "encrypt_vector",
    "keygen",
    "label_points",
    "mask_matrix",
    "participant_digest",
    "quantize",
    "setup",
]
