"""Prime-order pairing groups behind one arithmetic contract.

Two backends are provided:

* :class:`BLS12381Group` -- real asymmetric pairing on BLS12-381, backed by the
  arkworks bindings for curve arithmetic and pairings, and by ``py_ecc`` for the
  standardized hash-to-curve map into G1.
* :class:`MockGroup` -- represents every element by its discrete logarithm modulo
  the same prime order. Pairing is multiplication of exponents. It offers no
  security whatsoever and exists so protocol logic can be tested quickly.

Group elements are opaque to callers; all operations go through the backend.
G1/G2 are written additively (``add``/``mul``), GT multiplicatively (``gt_mul``).
"""

from __future__ import annotations

import hashlib
import hmac
from functools import lru_cache
from typing import Any, Hashable, Sequence

# Prime order r of the BLS12-381 groups.
CURVE_ORDER = 0x73EDA753299D7D483339D80809A1D80553BDA402FFFE5BFEFFFFFFFF00000001

G1_BYTES = 48
G2_BYTES = 96


class GroupError(ValueError):
    pass


def expand_to_scalars(key: bytes, message: bytes, count: int, order: int = CURVE_ORDER) -> list[int]:
    """HMAC-SHA-256 expansion into ``count`` scalars, each reduced from 512 bits."""
    out = []
    for i in range(count):
        block = b""
        for j in range(2):
            block += hmac.new(key, message + bytes([i, j]), hashlib.sha256).digest()
        out.append(int.from_bytes(block, "big") % order)
    return out


class PairingGroup:
    """Arithmetic contract shared by both backends."""

    name: str
    order: int = CURVE_ORDER

    # G1
    def g1(self) -> Any: ...
    def g1_identity(self) -> Any: ...
    def g1_add(self, a: Any, b: Any) -> Any: ...
    def g1_neg(self, a: Any) -> Any: ...
    def g1_mul(self, a: Any, k: int) -> Any: ...
    def g1_to_bytes(self, a: Any) -> bytes: ...
    def g1_from_bytes(self, data: bytes) -> Any: ...
    def hash_to_g1(self, message: bytes, dst: bytes) -> Any: ...

    # G2
    def g2(self) -> Any: ...
    def g2_identity(self) -> Any: ...
    def g2_add(self, a: Any, b: Any) -> Any: ...
    def g2_mul(self, a: Any, k: int) -> Any: ...
    def g2_to_bytes(self, a: Any) -> bytes: ...
    def g2_from_bytes(self, data: bytes) -> Any: ...

    # GT
    def multi_pairing(self, g1s: Sequence[Any], g2s: Sequence[Any]) -> Any: ...
    def gt_one(self) -> Any: ...
    def gt_mul(self, a: Any, b: Any) -> Any: ...
    def gt_eq(self, a: Any, b: Any) -> bool: ...
    def gt_key(self, a: Any) -> Hashable: ...

    def pairing(self, a: Any, b: Any) -> Any:
        return self.multi_pairing([a], [b])

    def gt_generator_pow(self, k: int) -> Any:
        """e(g1, g2)^k."""
        return self.pairing(self.g1_mul(self.g1(), k), self.g2())

    def g1_sum(self, elems: Sequence[Any]) -> Any:
        acc = self.g1_identity()
        for e in elems:
            acc = self.g1_add(acc, e)
        return acc

    def g2_sum(self, elems: Sequence[Any]) -> Any:
        acc = self.g2_identity()
        for e in elems:
            acc = self.g2_add(acc, e)
        return acc


class MockGroup(PairingGroup):
    """Exponent-tracking stand-in: every element is its discrete log mod p."""

    name = "mock"

    def g1(self) -> int:
        return 1

    def g1_identity(self) -> int:
        return 0

    def g1_add(self, a: int, b: int) -> int:
        return (a + b) % self.order

    def g1_neg(self, a: int) -> int:
        return (-a) % self.order

    def g1_mul(self, a: int, k: int) -> int:
        return (a * k) % self.order

    def g1_to_bytes(self, a: int) -> bytes:
        return int(a).to_bytes(G1_BYTES, "big")

    def g1_from_bytes(self, data: bytes) -> int:
        if len(data) != G1_BYTES:
            raise GroupError(f"expected {G1_BYTES} bytes, got {len(data)}")
        value = int.from_bytes(data, "big")
        if value >= self.order:
            raise GroupError("encoded element out of range")
        return value

    def hash_to_g1(self, message: bytes, dst: bytes) -> int:
        return expand_to_scalars(dst, message, 1, self.order)[0]

    g2 = g1
    g2_identity = g1_identity
    g2_add = g1_add
    g2_mul = g1_mul

    def g2_to_bytes(self, a: int) -> bytes:
        return int(a).to_bytes(G2_BYTES, "big")

    def g2_from_bytes(self, data: bytes) -> int:
        if len(data) != G2_BYTES:
            raise GroupError(f"expected {G2_BYTES} bytes, got {len(data)}")
        value = int.from_bytes(data, "big")
        if value >= self.order:
            raise GroupError("encoded element out of range")
        return value

    def multi_pairing(self, g1s: Sequence[int], g2s: Sequence[int]) -> int:
        return sum(a * b for a, b in zip(g1s, g2s)) % self.order

    def gt_one(self) -> int:
        return 0

    def gt_mul(self, a: int, b: int) -> int:
        return (a + b) % self.order

    def gt_eq(self, a: int, b: int) -> bool:
        return a == b

    def gt_key(self, a: int) -> int:
        return a

    def gt_generator_pow(self, k: int) -> int:
        return k % self.order


class BLS12381Group(PairingGroup):
    """BLS12-381 via arkworks; hash-to-G1 per the IETF suite (SSWU, SHA-256)."""

    name = "bls12_381"

    def __init__(self) -> None:
        try:
            import py_arkworks_bls12381 as ark
        except ImportError as exc:  # pragma: no cover - dependency declared
            raise GroupError("py_arkworks_bls12381 is required for the pairing backend") from exc
        self._ark = ark
        self._g1 = ark.G1Point()
        self._g2 = ark.G2Point()

    def _scalar(self, k: int):
        return self._ark.Scalar(int(k) % self.order)

    def g1(self):
        return self._g1

    def g1_identity(self):
        return self._ark.G1Point.identity()

    def g1_add(self, a, b):
        return a + b

    def g1_neg(self, a):
        return -a

    def g1_mul(self, a, k: int):
        return a * self._scalar(k)

    def g1_to_bytes(self, a) -> bytes:
        return bytes(a.to_compressed_bytes())

    def g1_from_bytes(self, data: bytes):
        if len(data) != G1_BYTES:
            raise GroupError(f"expected {G1_BYTES} bytes, got {len(data)}")
        try:
            return self._ark.G1Point.from_compressed_bytes(bytes(data))
        except Exception as exc:
            raise GroupError("invalid G1 encoding") from exc

    def hash_to_g1(self, message: bytes, dst: bytes):
        return self.g1_from_bytes(_hash_to_g1_compressed(bytes(message), bytes(dst)))

    def g2(self):
        return self._g2

    def g2_identity(self):
        return self._ark.G2Point.identity()

    def g2_add(self, a, b):
        return a + b

    def g2_mul(self, a, k: int):
        return a * self._scalar(k)

    def g2_to_bytes(self, a) -> bytes:
        return bytes(a.to_compressed_bytes())

    def g2_from_bytes(self, data: bytes):
        if len(data) != G2_BYTES:
            raise GroupError(f"expected {G2_BYTES} bytes, got {len(data)}")
        try:
            return self._ark.G2Point.from_compressed_bytes(bytes(data))
        except Exception as exc:
            raise GroupError("invalid G2 encoding") from exc

    def multi_pairing(self, g1s, g2s):
        return self._ark.GT.multi_pairing(list(g1s), list(g2s))

    def gt_one(self):
        return self._ark.GT.one()

    def gt_mul(self, a, b):
        return a * b

    def gt_eq(self, a, b) -> bool:
        return a == b

    def gt_key(self, a) -> bytes:
        return hashlib.blake2b(str(a).encode(), digest_size=16).digest()


@lru_cache(maxsize=1024)
def _hash_to_g1_compressed(message: bytes, dst: bytes) -> bytes:
    from py_ecc.bls.hash_to_curve import hash_to_G1
    from py_ecc.bls.point_compression import compress_G1

    point = hash_to_G1(message, dst, hashlib.sha256)
    return compress_G1(point).to_bytes(G1_BYTES, "big")


BACKENDS = {"mock": MockGroup, "bls12_381": BLS12381Group}


@lru_cache(maxsize=None)
def get_group(name: str) -> PairingGroup:
    try:
        return BACKENDS[name]()
    except KeyError:
        raise GroupError(f"unknown group backend {name!r}; choose from {sorted(BACKENDS)}") from None
