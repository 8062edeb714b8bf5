"""Permutohedral lattice geometry and sparse vertex storage.

Positions are scaled by sigma, lifted onto the zero-sum hyperplane in
R^(d+1), and located in their enclosing simplex by the rounding scheme of
the permutohedral filtering literature. Vertices live in a hash table keyed
by their first d coordinates (the last one is implied by the zero sum).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError

TOL = 1e-9


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{what} contains non-finite values")


def _scale_factors(d: int) -> np.ndarray:
    j = np.arange(d, dtype=np.float64)
    return (d + 1) / np.sqrt((j + 1) * (j + 2))


def elevate(position) -> np.ndarray:
    """Lift scaled positions onto the hyperplane ``sum(x) == 0``.

    Accepts a single length-d vector or an (m, d) matrix.
    """
    pos = np.asarray(position, dtype=np.float64)
    single = pos.ndim == 1
    pos = np.atleast_2d(pos)
    _check_finite(pos, "position")
    m, d = pos.shape
    if d < 1:
        raise InvalidInputError("position dimension must be >= 1")
    cf = pos * _scale_factors(d)
    out = np.empty((m, d + 1))
    # running-sum recurrence: out[i] = sum_{j>=i} cf[j] - i * cf[i-1]
    tail = np.cumsum(cf[:, ::-1], axis=1)[:, ::-1]
    out[:, 0] = tail[:, 0]
    for i in range(1, d + 1):
        above = tail[:, i] if i < d else 0.0
        out[:, i] = above - i * cf[:, i - 1]
    return out[0] if single else out


def canonical_offsets(d: int) -> np.ndarray:
    """Offsets of the canonical simplex: row k has k on d+1-k entries and k-(d+1) on the rest."""
    rank = np.arange(d + 1)
    k = np.arange(d + 1)[:, None]
    return np.where(rank[None, :] <= d - k, k, k - (d + 1)).astype(np.int64)


def neighbor_offsets(d: int) -> np.ndarray:
    """Kernel tap offsets in filter order.

    Row 0 is the center; rows ``1 + 2*a`` and ``2 + 2*a`` are the +/- offset
    along axis ``a`` (d at position ``a``, -1 elsewhere).
    """
    taps = np.zeros((2 * (d + 1) + 1, d + 1), dtype=np.int64)
    for a in range(d + 1):
        o = np.full(d + 1, -1, dtype=np.int64)
        o[a] = d
        taps[1 + 2 * a] = o
        taps[2 + 2 * a] = -o
    return taps


def neighbor_key(key, axis: int, sign: int) -> np.ndarray:
    key = np.asarray(key, dtype=np.int64)
    d = key.shape[-1] - 1
    if not 0 <= axis <= d:
        raise InvalidInputError(f"axis {axis} out of range 0..{d}")
    if sign not in (1, -1):
        raise InvalidInputError("sign must be +1 or -1")
    return key + neighbor_offsets(d)[1 + 2 * axis + (0 if sign > 0 else 1)]


def is_valid_key(key) -> bool:
    key = np.asarray(key, dtype=np.int64)
    d = key.shape[-1] - 1
    rem = np.mod(key, d + 1)
    return bool(key.sum() == 0 and np.all(rem == rem[0]))


def enclosing_simplex(elevated):
    """Return (keys, weights) of the simplex containing each elevated point.

    ``keys`` has shape (m, d+1, d+1) with vertex k of point p at ``keys[p, k]``;
    ``weights`` has shape (m, d+1). A single vector input returns unbatched arrays.
    """
    elev = np.asarray(elevated, dtype=np.float64)
    single = elev.ndim == 1
    elev = np.atleast_2d(elev)
    _check_finite(elev, "elevated position")
    m, dp1 = elev.shape
    d = dp1 - 1
    if d < 1:
        raise InvalidInputError("elevated vectors need length >= 2")
    scale = np.maximum(1.0, np.abs(elev).max(axis=1)) if m else np.zeros(0)
    if np.any(np.abs(elev.sum(axis=1)) > TOL * scale):
        raise InvalidInputError("point is not on the zero-sum hyperplane")

    v = elev / dp1
    up = np.ceil(v) * dp1
    down = np.floor(v) * dp1
    rem0 = np.where(up - elev < elev - down, up, down)
    h = np.rint(rem0.sum(axis=1) / dp1).astype(np.int64)[:, None]

    resid = elev - rem0
    # rank 0 = largest residual; ties go to the lower coordinate index
    order = np.argsort(-resid, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(dp1)[None, :].repeat(m, 0), axis=1)

    down_fix = (h > 0) & (rank >= dp1 - h)
    up_fix = (h < 0) & (rank < -h)
    rem0 = rem0 - dp1 * down_fix + dp1 * up_fix
    rank = rank + h - dp1 * down_fix + dp1 * up_fix

    delta = (elev - rem0) / dp1
    bary = np.zeros((m, dp1 + 1))
    rows = np.arange(m)[:, None]
    bary[rows, d - rank] += delta
    bary[rows, d + 1 - rank] -= delta
    bary[:, 0] += 1.0 + bary[:, dp1]
    weights = np.clip(bary[:, :dp1], 0.0, 1.0)

    base = np.rint(rem0).astype(np.int64)
    k = np.arange(dp1)[None, :, None]
    keys = base[:, None, :] + k - dp1 * (rank[:, None, :] > d - k)
    if single:
        return keys[0], weights[0]
    return keys, weights


@dataclass(frozen=True)
class ScaledCloud:
    """Point positions already divided by sigma, with their features."""

    positions: np.ndarray
    sigma: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2:
            raise InvalidInputError("positions must be an (m, d) matrix")
        feats = self.features
        if feats is None:
            feats = np.zeros((pos.shape[0], 0))
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != pos.shape[0]:
            raise InvalidInputError("features must have one row per position")
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (pos.shape[1],)).copy()
        if np.any(~(sigma > 0)):
            raise InvalidInputError("sigma entries must be strictly positive")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_points(cls, positions, sigma, features=None):
        positions = np.asarray(positions, dtype=np.float64)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (positions.shape[1],))
        if np.any(~(sigma > 0)):
            raise InvalidInputError("sigma entries must be strictly positive")
        return cls(positions / sigma, sigma, features)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def __len__(self):
        return self.positions.shape[0]

    def halved(self, times: int = 1) -> "ScaledCloud":
        """The same cloud at a coarser lattice resolution (positions / 2**times)."""
        f = 2.0**times
        return ScaledCloud(self.positions / f, self.sigma * f, self.features)


class SparseLattice:
    """Hash table of lattice vertices with a coordinate matrix and optional values.

    Rows are assigned in first-insertion order. The table only grows.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise InvalidInputError("lattice dimension must be >= 1")
        self.dim = dim
        self.table: dict[bytes, int] = {}
        self._coords = np.zeros((0, dim + 1), dtype=np.int64)
        self.values = None

    def __len__(self):
        return len(self.table)

    @property
    def coords(self) -> np.ndarray:
        return self._coords

    def _hash_keys(self, keys: np.ndarray) -> list:
        head = np.ascontiguousarray(keys[:, : self.dim], dtype=np.int64)
        return head.view(np.dtype((np.void, 8 * self.dim))).ravel().tolist()

    def insert(self, keys) -> np.ndarray:
        """Insert keys (k, d+1) and return their row indices."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, self.dim + 1)
        if len(keys) == 0:
            return np.zeros(0, dtype=np.int64)
        uniq, first, inverse = np.unique(
            np.ascontiguousarray(keys[:, : self.dim]).view(np.dtype((np.void, 8 * self.dim))).ravel(),
            return_index=True,
            return_inverse=True,
        )
        order = np.argsort(first, kind="stable")
        ukeys = keys[first[order]]
        hashed = self._hash_keys(ukeys)
        rows_u = np.empty(len(ukeys), dtype=np.int64)
        new = []
        table = self.table
        for i, hk in enumerate(hashed):
            r = table.get(hk)
            if r is None:
                r = len(table)
                table[hk] = r
                new.append(i)
            rows_u[i] = r
        if new:
            self._coords = np.vstack([self._coords, ukeys[new]])
        # map back: inverse indexes sorted uniques, order maps first-occurrence rank -> sorted index
        rank_of_sorted = np.empty(len(order), dtype=np.int64)
        rank_of_sorted[order] = np.arange(len(order))
        return rows_u[rank_of_sorted[inverse.ravel()]]

    def lookup(self, keys) -> np.ndarray:
        """Row index of each key, or -1 when the vertex is not allocated."""
        keys = np.asarray(keys, dtype=np.int64)
        shape = keys.shape[:-1]
        flat = keys.reshape(-1, self.dim + 1)
        if len(flat) == 0:
            return np.zeros(shape, dtype=np.int64)
        get = self.table.get
        rows = np.fromiter((get(k, -1) for k in self._hash_keys(flat)), dtype=np.int64, count=len(flat))
        # keys off the zero-sum plane or with mixed remainders can never be stored
        valid = flat.sum(axis=1) == 0
        return np.where(valid, rows, -1).reshape(shape)

    def key_set(self) -> set:
        return {tuple(r) for r in self._coords.tolist()}


@dataclass(frozen=True)
class SimplexFootprint:
    """Per-point enclosing-simplex vertex rows and barycentric weights."""

    rows: np.ndarray
    weights: np.ndarray
    n_vertices: int

    @property
    def n_points(self) -> int:
        return self.rows.shape[0]

    @cached_property
    def slice_matrix(self) -> sp.csr_matrix:
        """The m x n barycentric matrix B, so that slice(X) = B @ X."""
        m, k = self.rows.shape
        indptr = np.arange(0, m * k + 1, k)
        return sp.csr_matrix((self.weights.ravel(), self.rows.ravel(), indptr), shape=(m, self.n_vertices))

    @cached_property
    def splat_matrix(self) -> sp.csr_matrix:
        return self.slice_matrix.T.tocsr()

    @cached_property
    def entry_matrix(self) -> sp.csr_matrix:
        """n x m(d+1) 0/1 matrix summing point-major simplex entries into their vertices."""
        m, k = self.rows.shape
        return sp.csr_matrix(
            (np.ones(m * k), (self.rows.ravel(), np.arange(m * k))), shape=(self.n_vertices, m * k)
        )

    @cached_property
    def contributors(self):
        """Transpose view J_v: (point index per entry, vertex per entry, segment starts).

        Entries are grouped by vertex row, ordered by point index within a vertex.
        """
        flat_v = self.rows.ravel()
        flat_p = np.repeat(np.arange(self.n_points), self.rows.shape[1])
        order = np.argsort(flat_v, kind="stable")
        verts = flat_v[order]
        counts = np.bincount(verts, minlength=self.n_vertices)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return flat_p[order], verts, starts, counts


def build_lattice(cloud: ScaledCloud, lattice: SparseLattice | None = None):
    """Allocate every enclosing-simplex vertex of the cloud.

    Passing an existing ``lattice`` inserts into it (shared tables across a
    sequence); the returned footprint then indexes the grown table.
    """
    d = cloud.dim
    if lattice is None:
        lattice = SparseLattice(d)
    elif lattice.dim != d:
        raise InvalidInputError("lattice and cloud dimensions differ")
    if len(cloud) == 0:
        fp = SimplexFootprint(np.zeros((0, d + 1), dtype=np.int64), np.zeros((0, d + 1)), len(lattice))
        return lattice, fp
    keys, weights = enclosing_simplex(elevate(cloud.positions))
    rows = lattice.insert(keys.reshape(-1, d + 1)).reshape(len(cloud), d + 1)
    return lattice, SimplexFootprint(rows, weights, len(lattice))


def auto_sigma(positions, points_per_vertex: float = 30.0, iters: int = 24) -> np.ndarray:
    """Isotropic sigma giving roughly ``points_per_vertex`` points per allocated vertex."""
    pos = np.asarray(positions, dtype=np.float64)
    m, d = pos.shape
    if m == 0:
        return np.ones(d)
    target = max(1.0, m / points_per_vertex)
    extent = float(np.ptp(pos, axis=0).max()) or 1.0
    lo, hi = np.log(extent * 1e-4), np.log(extent * 10.0)

    def count(log_s):
        _, fp = build_lattice(ScaledCloud.from_points(pos, np.exp(log_s)))
        return fp.n_vertices

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if count(mid) > target:
            lo = mid
        else:
            hi = mid
    return np.full(d, np.exp(0.5 * (lo + hi)))
