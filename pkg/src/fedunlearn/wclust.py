"""K-means weight clustering: a flat parameter vector becomes kappa centroids
plus a per-parameter centroid index."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


class KappaExceedsDimension(ValueError):
    pass


class MappingOutOfRange(IndexError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class ClusteredUpdate:
    centroids: np.ndarray  # (kappa,) float64
    mapping: np.ndarray  # (d,) int64, entries in [0, kappa)
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def kappa(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mapping.shape[0])

    def expand(self) -> np.ndarray:
        return expand(self.centroids, self.mapping)


def nearest_centroid(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """argmin_j |values - centroids[j]|, ties broken toward the lower index.

    Uses a sorted sweep instead of a (d, kappa) distance matrix.
    """
    values = np.asarray(values, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    k = centroids.shape[0]
    order = np.argsort(centroids, kind="stable")
    cs = centroids[order]
    # first sorted position of each run of equal centroids (lowest original index in the run)
    run_start = np.arange(k)
    for i in range(1, k):
        if cs[i] == cs[i - 1]:
            run_start[i] = run_start[i - 1]
    pos = np.searchsorted(cs, values, side="left")
    right = np.minimum(pos, k - 1)
    left = run_start[np.maximum(pos - 1, 0)]
    dl = np.abs(values - cs[left])
    dr = np.abs(values - cs[right])
    il = order[left]
    ir = order[right]
    pick_left = (dl < dr) | ((dl == dr) & (il < ir))
    return np.where(pick_left, il, ir).astype(np.int64)


def _kmeans_pp(values: np.ndarray, kappa: int, rng: np.random.Generator) -> np.ndarray:
    d = values.shape[0]
    centroids = np.empty(kappa, dtype=np.float64)
    centroids[0] = values[rng.integers(d)]
    dist2 = (values - centroids[0]) ** 2
    for j in range(1, kappa):
        total = dist2.sum()
        if total > 0:
            idx = rng.choice(d, p=dist2 / total)
        else:
            idx = rng.integers(d)
        centroids[j] = values[idx]
        dist2 = np.minimum(dist2, (values - centroids[j]) ** 2)
    return centroids


def _repair_empty(values: np.ndarray, centroids: np.ndarray, mapping: np.ndarray) -> None:
    """Give every empty cluster the point farthest from its current centroid."""
    counts = np.bincount(mapping, minlength=centroids.shape[0])
    for j in np.flatnonzero(counts == 0):
        resid = np.abs(values - centroids[mapping])
        far = int(np.argmax(resid))
        counts[mapping[far]] -= 1
        if counts[mapping[far]] == 0:
            # never strip the last point of a cluster; pick the farthest among others
            counts[mapping[far]] += 1
            movable = counts[mapping] > 1
            if not movable.any():
                continue
            far = int(np.argmax(np.where(movable, resid, -1.0)))
            counts[mapping[far]] -= 1
        mapping[far] = j
        centroids[j] = values[far]
        counts[j] = 1


def _assign_sorted(sv: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """nearest_centroid for ascending ``sv``, via the kappa-1 decision boundaries.

    Same tie rule as nearest_centroid; costs O(kappa log d) plus one repeat.
    """
    k = centroids.shape[0]
    order = np.argsort(centroids, kind="stable")
    cs = centroids[order]
    keep = np.ones(k, dtype=bool)
    keep[1:] = cs[1:] != cs[:-1]  # duplicates: the lowest index of a run wins every tie
    u, ids = cs[keep], order[keep]
    n = sv.shape[0]
    bounds = np.searchsorted(sv, (u[:-1] + u[1:]) / 2.0, side="left")
    cuts = [0]
    for j in range(len(u) - 1):
        lo_c, hi_c, lo_i, hi_i = u[j], u[j + 1], ids[j], ids[j + 1]

        def right(x: float) -> bool:
            dl, dr = abs(x - lo_c), abs(x - hi_c)
            return dr < dl or (dr == dl and hi_i < lo_i)

        p = max(int(bounds[j]), cuts[-1])
        while p > cuts[-1] and right(sv[p - 1]):
            p -= 1
        while p < n and not right(sv[p]):
            p += 1
        cuts.append(p)
    cuts.append(n)
    return np.repeat(ids, np.diff(cuts)).astype(np.int64)


def cluster(
    theta: np.ndarray,
    kappa: int,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> ClusteredUpdate:
    """Lloyd's algorithm from k-means++ seeding over the whole vector.

    Stops when the objective improves by less than ``tol`` or after
    ``max_iter`` iterations. ``history`` holds the objective after every
    iteration and is non-increasing.
    """
    values = np.asarray(theta, dtype=np.float64).ravel()
    d = values.shape[0]
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    if kappa > d:
        raise KappaExceedsDimension(f"kappa={kappa} exceeds dimension d={d}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(values, kappa, rng)
    # work on the sorted vector; assignments are mapped back at the end
    perm = np.argsort(values, kind="stable")
    sv = values[perm]
    history: list[float] = []
    labels = _assign_sorted(sv, centroids)
    prev = math.inf
    for _ in range(max_iter):
        _repair_empty(sv, centroids, labels)
        sums = np.bincount(labels, weights=sv, minlength=kappa)
        counts = np.bincount(labels, minlength=kappa)
        centroids = sums / np.maximum(counts, 1)
        obj = float(np.sum((sv - centroids[labels]) ** 2))
        history.append(obj)
        if prev - obj < tol:
            break
        prev = obj
        labels = _assign_sorted(sv, centroids)
    mapping = np.empty(d, dtype=np.int64)
    mapping[perm] = labels
    return ClusteredUpdate(centroids, mapping, history)


def expand(centroids: Sequence[Any] | np.ndarray, mapping: np.ndarray) -> Any:
    """out[j] = centroids[mapping[j]].

    Real-valued centroids give a float array; any other sequence (for example
    ciphertexts) gives a list of references to the same objects.
    """
    mapping = np.asarray(mapping)
    k = len(centroids)
    if mapping.size and (mapping.min() < 0 or mapping.max() >= k):
        raise MappingOutOfRange(f"mapping entries must lie in [0, {k})")
    if isinstance(centroids, np.ndarray):
        return centroids[mapping]
    return [centroids[int(j)] for j in mapping]


def wc_objective(theta: np.ndarray, update: ClusteredUpdate) -> float:
    values = np.asarray(theta, dtype=np.float64).ravel()
    if values.shape[0] != update.dim:
        raise DimensionMismatch(f"theta has {values.shape[0]} entries, mapping has {update.dim}")
    return float(np.sum((values - update.centroids[update.mapping]) ** 2))


# ---------------------------------------------------------------------------
# mapping wire format: <u32 d><u16 kappa> then d entries of ceil(log2 kappa)
# bits, packed MSB-first and zero-padded to a byte boundary.


def index_bits(kappa: int) -> int:
    return max(1, math.ceil(math.log2(kappa))) if kappa > 1 else 1


def encode_mapping(mapping: np.ndarray, kappa: int) -> bytes:
    mapping = np.asarray(mapping, dtype=np.int64)
    d = mapping.shape[0]
    if d and (mapping.min() < 0 or mapping.max() >= kappa):
        raise MappingOutOfRange("mapping entry outside [0, kappa)")
    bits = index_bits(kappa)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    bitmat = ((mapping[:, None] >> shifts) & 1).astype(np.uint8)
    payload = np.packbits(bitmat.ravel()).tobytes()
    return struct.pack("<IH", d, kappa) + payload


def decode_mapping(data: bytes) -> tuple[np.ndarray, int]:
    if len(data) < 6:
        raise ValueError("mapping payload shorter than its header")
    d, kappa = struct.unpack("<IH", data[:6])
    bits = index_bits(kappa)
    need = math.ceil(d * bits / 8)
    if len(data) != 6 + need:
        raise ValueError(f"mapping payload should be {6 + need} bytes, got {len(data)}")
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=6))[: d * bits]
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    mapping = raw.reshape(d, bits).astype(np.int64) @ weights
    if d and mapping.max() >= kappa:
        raise MappingOutOfRange("decoded index outside [0, kappa)")
    return mapping, kappa
