"""Baby-step giant-step recovery of a signed, bounded exponent in GT."""

from __future__ import annotations

import math
from typing import Any

from .groups import PairingGroup


class DiscreteLogNotFound(ArithmeticError):
    """No exponent in [-bound, bound] maps to the target."""


class BSGSTable:
    """Precomputed baby steps for base = e(g1, g2) over the range [-bound, bound].

    Baby steps cover a window of ``size`` exponents centred on zero; giant steps
    move the window outward alternately up and down, so small magnitudes are
    found first. ``size`` defaults to ``ceil(sqrt(2*bound + 1))``.
    """

    def __init__(self, group: PairingGroup, bound: int, size: int | None = None) -> None:
        if bound < 0:
            raise ValueError("bound must be non-negative")
        span = 2 * bound + 1
        if size is None:
            size = math.isqrt(span - 1) + 1
        size = max(1, min(int(size), span))
        self.group = group
        self.bound = bound
        self.size = size
        self.low = -(size // 2)  # baby window is [low, low + size)
        # windows i*size + [low, low+size) for |i| <= reach cover [-bound, bound]
        self.reach = max(0, -(-(bound - (self.low + size - 1)) // size), -(-(bound + self.low) // size))

        base = group.gt_generator_pow(1)
        baby: dict[Any, int] = {}
        acc = group.gt_generator_pow(self.low)
        for j in range(size):
            baby.setdefault(group.gt_key(acc), self.low + j)
            acc = group.gt_mul(acc, base)
        self._baby = baby
        self._down = group.gt_generator_pow(-size)
        self._up = group.gt_generator_pow(size)

    def __len__(self) -> int:
        return self.size

    def solve(self, target: Any) -> int:
        """Return the signed alpha in [-bound, bound] with base^alpha == target."""
        group = self.group
        j = self._baby.get(group.gt_key(target))
        if j is not None:
            return self._check(j)
        hi = lo = target
        for i in range(1, self.reach + 1):
            hi = group.gt_mul(hi, self._down)  # target * base^(-i*size)
            j = self._baby.get(group.gt_key(hi))
            if j is not None:
                return self._check(i * self.size + j)
            lo = group.gt_mul(lo, self._up)
            j = self._baby.get(group.gt_key(lo))
            if j is not None:
                return self._check(-i * self.size + j)
        raise DiscreteLogNotFound(f"no exponent within +/-{self.bound}")

    def _check(self, alpha: int) -> int:
        if abs(alpha) > self.bound:
            raise DiscreteLogNotFound(f"no exponent within +/-{self.bound}")
        return alpha


def bsgs_dlog(target: Any, bound: int, table: BSGSTable) -> int:
    if table.bound != bound:
        raise ValueError(f"table covers +/-{table.bound}, asked for +/-{bound}")
    return table.solve(target)
