"""Lattice operators: splat, slice, distribute, convolve, coarsen, upsample,
gather and deform-slice.

Each operator has a pure numpy forward (``*_fwd``) and vector-Jacobian
product (``*_vjp``); the unsuffixed name records it on the tape.

Convolution-like operators share one kernel layout, ``(2(d+1)+1, c_in, c_out)``,
with taps ordered as in :func:`latticeseg.lattice.neighbor_offsets`: center,
then (axis 0, +), (axis 0, -), (axis 1, +), ... Missing vertices read as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .lattice import ScaledCloud, SimplexFootprint, SparseLattice, neighbor_offsets
from .tape import Tensor, constant, record


def _check_rows(a, n, what):
    if a.ndim != 2 or a.shape[0] != n:
        raise InvalidInputError(f"{what}: expected {n} rows, got shape {a.shape}")


# ----------------------------------------------------------------------------
# splat / slice


def splat_fwd(F, fp: SimplexFootprint):
    F = np.asarray(F, dtype=np.float64)
    _check_rows(F, fp.n_points, "splat features")
    return np.asarray(fp.splat_matrix @ F)


def splat_vjp(g, fp: SimplexFootprint):
    return np.asarray(fp.slice_matrix @ g)


def slice_fwd(X, fp: SimplexFootprint):
    X = np.asarray(X, dtype=np.float64)
    _check_rows(X, fp.n_vertices, "slice values")
    return np.asarray(fp.slice_matrix @ X)


def slice_vjp(g, fp: SimplexFootprint):
    return np.asarray(fp.splat_matrix @ g)


def splat(F, fp: SimplexFootprint) -> Tensor:
    F = constant(F)
    return record(splat_fwd(F.data, fp), (F,), lambda g: (splat_vjp(g, fp),), "splat")


def slice_(X, fp: SimplexFootprint) -> Tensor:
    """Barycentric interpolation of vertex values back onto the points."""
    X = constant(X)
    return record(slice_fwd(X.data, fp), (X,), lambda g: (slice_vjp(g, fp),), "slice")


# ----------------------------------------------------------------------------
# distribute


@dataclass(frozen=True)
class DistributedBundle:
    """Per-vertex lists of contributing points, stored row-wise grouped by vertex.

    Row r belongs to vertex ``vertex[r]`` and point ``point[r]``; vertex v owns
    rows ``starts[v] : starts[v] + counts[v]``.
    """

    coords: np.ndarray  # (R, d) positions minus the vertex mean
    features: np.ndarray  # (R, f_d)
    mean: np.ndarray  # (n, d)
    vertex: np.ndarray
    point: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    order: np.ndarray  # permutation from point-major entries to vertex-grouped rows

    @property
    def n_vertices(self):
        return len(self.counts)

    def stacked(self):
        return np.concatenate([self.coords, self.features], axis=1)


def _segment_sum(rows, vertex, n):
    out = np.zeros((n, rows.shape[1]))
    if len(rows):
        nz = np.flatnonzero(np.r_[True, vertex[1:] != vertex[:-1]])
        out[vertex[nz]] = np.add.reduceat(rows, nz, axis=0)
    return out


def distribute(cloud: ScaledCloud, fp: SimplexFootprint) -> DistributedBundle:
    if len(cloud) != fp.n_points:
        raise InvalidInputError("cloud and footprint sizes differ")
    point, vertex, starts, counts = fp.contributors
    order = np.argsort(fp.rows.ravel(), kind="stable")
    g = cloud.positions[point]
    sums = _segment_sum(g, vertex, fp.n_vertices)
    mean = sums / np.maximum(counts, 1)[:, None]
    return DistributedBundle(
        coords=g - mean[vertex],
        features=cloud.features[point],
        mean=mean,
        vertex=vertex,
        point=point,
        starts=starts,
        counts=counts,
        order=order,
    )


def _rows_to_points(rows_grad, bundle: DistributedBundle, m):
    k = len(bundle.order) // max(m, 1) if m else 0
    flat = np.empty_like(rows_grad)
    flat[bundle.order] = rows_grad
    return flat.reshape(m, k, -1).sum(axis=1)


def distribute_values(positions, features, bundle: DistributedBundle) -> Tensor:
    """Tape version of distribute: returns the (R, d + f_d) stacked bundle rows.

    Differentiable in both the scaled positions and the point features.
    """
    positions, features = constant(positions), constant(features)
    m, d = positions.shape
    vertex = bundle.vertex
    n = bundle.n_vertices
    g = positions.data[bundle.point]
    mean = _segment_sum(g, vertex, n) / np.maximum(bundle.counts, 1)[:, None]
    out = np.concatenate([g - mean[vertex], features.data[bundle.point]], axis=1)

    def vjp(grad):
        gg, gf = grad[:, :d], grad[:, d:]
        seg = _segment_sum(gg, vertex, n) / np.maximum(bundle.counts, 1)[:, None]
        dpos = _rows_to_points(gg - seg[vertex], bundle, m)
        dfeat = _rows_to_points(gf, bundle, m) if gf.shape[1] else np.zeros((m, 0))
        return dpos, dfeat

    return record(out, (positions, features), vjp, "distribute")


# ----------------------------------------------------------------------------
# index convolution shared by convolve / coarsen / upsample


def conv_index(lattice: SparseLattice) -> np.ndarray:
    """(n, 2(d+1)+1) neighbour rows of every vertex, -1 where unallocated."""
    taps = neighbor_offsets(lattice.dim)
    return lattice.lookup(lattice.coords[:, None, :] + taps[None, :, :])


def coarsen_index(coarse: SparseLattice, fine: SparseLattice) -> np.ndarray:
    """Fine rows read by each coarse vertex: the coarse key doubled, plus each tap."""
    taps = neighbor_offsets(fine.dim)
    return fine.lookup(2 * coarse.coords[:, None, :] + taps[None, :, :])


def upsample_index(fine: SparseLattice, coarse: SparseLattice) -> np.ndarray:
    """Coarse rows read by each fine vertex.

    Tap k reads the coarse vertex at ``(v - offset_k) / 2``, which makes
    upsample the transpose of coarsen for the same kernel taps. Candidates
    with fractional coordinates contribute nothing.
    """
    taps = neighbor_offsets(fine.dim)
    cand = fine.coords[:, None, :] - taps[None, :, :]
    even = np.all(cand % 2 == 0, axis=-1)
    idx = coarse.lookup(cand // 2)
    return np.where(even, idx, -1)


def _check_kernel(W, n_taps, c_in):
    if W.ndim != 3 or W.shape[0] != n_taps or W.shape[1] != c_in:
        raise InvalidInputError(f"kernel shape {W.shape} does not match ({n_taps}, {c_in}, c_out)")


def index_conv_fwd(X, W, bias, idx):
    X = np.asarray(X, dtype=np.float64)
    n_in, c_in = X.shape
    _check_kernel(W, idx.shape[1], c_in)
    padded = np.vstack([X, np.zeros((1, c_in))])
    rows = padded[np.where(idx < 0, n_in, idx)]
    out = rows.reshape(len(idx), -1) @ W.reshape(-1, W.shape[2])
    if bias is not None:
        out = out + bias
    return out


def index_conv_vjp(g, X, W, idx):
    n_in, c_in = X.shape
    safe = np.where(idx < 0, n_in, idx)
    padded = np.vstack([X, np.zeros((1, c_in))])
    rows = padded[safe].reshape(len(idx), -1)
    dW = (rows.T @ g).reshape(W.shape)
    drows = (g @ W.reshape(-1, W.shape[2]).T).reshape(len(idx), idx.shape[1], c_in)
    dpad = np.zeros((n_in + 1, c_in))
    # per tap the map from outputs to inputs is injective, so fancy += is exact
    for k in range(idx.shape[1]):
        dpad[safe[:, k]] += drows[:, k]
    return dpad[:n_in], dW, g.sum(axis=0)


def index_conv(X, W, bias, idx, op="conv") -> Tensor:
    X, W = constant(X), constant(W)
    parents = (X, W) if bias is None else (X, W, constant(bias))
    out = index_conv_fwd(X.data, W.data, None if bias is None else parents[2].data, idx)

    def vjp(g):
        dX, dW, db = index_conv_vjp(g, X.data, W.data, idx)
        return (dX, dW) if bias is None else (dX, dW, db)

    return record(out, parents, vjp, op)


def convolve(X, W, idx, bias=None) -> Tensor:
    """Same-lattice convolution over the center and its 2(d+1) neighbours."""
    X = constant(X)
    _check_rows(X.data, len(idx), "convolve values")
    return index_conv(X, W, bias, idx, "convolve")


def coarsen(X_fine, W, idx, bias=None) -> Tensor:
    """Strided convolution from a fine lattice onto the coarse vertices (``idx`` from coarsen_index)."""
    return index_conv(X_fine, W, bias, idx, "coarsen")


def upsample(X_coarse, W, idx, bias=None) -> Tensor:
    """Transposed convolution from a coarse lattice onto fine vertices (``idx`` from upsample_index)."""
    return index_conv(X_coarse, W, bias, idx, "upsample")


# ----------------------------------------------------------------------------
# gather / deform slice


def gather_fwd(X, fp: SimplexFootprint):
    X = np.asarray(X, dtype=np.float64)
    _check_rows(X, fp.n_vertices, "gather values")
    return X[fp.rows] * fp.weights[:, :, None]


def gather_vjp(g, fp: SimplexFootprint):
    c = g.shape[-1]
    return np.asarray(fp.entry_matrix @ (g * fp.weights[:, :, None]).reshape(-1, c))


def gather(X, fp: SimplexFootprint) -> Tensor:
    """Per-point bundle q_p of weighted simplex vertex values, shape (m, d+1, c)."""
    X = constant(X)
    return record(gather_fwd(X.data, fp), (X,), lambda g: (gather_vjp(g, fp),), "gather")


def deform_slice_fwd(X, fp: SimplexFootprint, delta):
    X = np.asarray(X, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    _check_rows(X, fp.n_vertices, "deform_slice values")
    if delta.shape != fp.weights.shape:
        raise InvalidInputError(f"offsets shape {delta.shape} != {fp.weights.shape}")
    w = fp.weights + delta
    return np.einsum("pk,pkc->pc", w, X[fp.rows])


def deform_slice_vjp(g, X, fp: SimplexFootprint, delta):
    w = fp.weights + delta
    c = g.shape[-1]
    dX = np.asarray(fp.entry_matrix @ (w[:, :, None] * g[:, None, :]).reshape(-1, c))
    ddelta = np.einsum("pkc,pc->pk", X[fp.rows], g)
    return dX, ddelta


def deform_slice(X, fp: SimplexFootprint, delta) -> Tensor:
    """Slice with learned offsets added to the barycentric weights."""
    X, delta = constant(X), constant(delta)
    out = deform_slice_fwd(X.data, fp, delta.data)
    return record(out, (X, delta), lambda g: deform_slice_vjp(g, X.data, fp, delta.data), "deform_slice")
