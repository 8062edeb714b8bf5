"""Network building blocks on lattice values and point bundles."""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, InvalidInputError
from .tape import Tensor, concat, constant, matmul, pad_rows, record, relu, square, tanh

POINTNET_WIDTHS = (16, 32, 64)
DEFAULT_GROUPS = 32


def effective_groups(channels: int, groups: int = DEFAULT_GROUPS) -> int:
    g = min(groups, channels)
    if channels % g:
        raise ConfigError(f"{channels} channels are not divisible into {g} groups")
    return g


# ----------------------------------------------------------------------------
# initialisers


def init_linear(rng, c_in, c_out, scale=None):
    std = np.sqrt(2.0 / max(c_in, 1)) if scale is None else scale
    return {"W": rng.normal(0.0, std, size=(c_in, c_out)), "b": np.zeros(c_out)}


def init_conv(rng, taps, c_in, c_out, bias=True):
    p = {"W": rng.normal(0.0, np.sqrt(2.0 / (taps * c_in)), size=(taps, c_in, c_out))}
    if bias:
        p["b"] = np.zeros(c_out)
    return p


def init_group_norm(channels, groups=DEFAULT_GROUPS):
    effective_groups(channels, groups)
    return {"gamma": np.ones(channels), "beta": np.zeros(channels)}


# ----------------------------------------------------------------------------
# primitives


def linear(X, W, b=None) -> Tensor:
    X, W = constant(X), constant(W)
    if X.shape[-1] != W.shape[0]:
        raise InvalidInputError(f"linear: input width {X.shape[-1]} != weight rows {W.shape[0]}")
    out = matmul(X, W)
    return out if b is None else out + b


def _sorted_sum(a):
    # summing a sorted copy makes the result independent of row order
    return np.sort(a, axis=1).sum(axis=1)


def group_norm_fwd(X, gamma, beta, groups, eps=1e-5):
    n, c = X.shape
    g = effective_groups(c, groups)
    cg = c // g
    N = n * cg
    xg = X.reshape(n, g, cg).transpose(1, 0, 2).reshape(g, N)
    mu = _sorted_sum(xg) / max(N, 1)
    dev = xg - mu[:, None]
    var = _sorted_sum(dev * dev) / max(N, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (dev * inv[:, None]).reshape(g, n, cg).transpose(1, 0, 2).reshape(n, c)
    return xhat * gamma + beta, xhat, inv


def group_norm(X, gamma, beta, groups=DEFAULT_GROUPS, eps=1e-5) -> Tensor:
    """GroupNorm over vertices (or bundle rows) x channels-in-group."""
    X, gamma, beta = constant(X), constant(gamma), constant(beta)
    if X.ndim != 2 or gamma.shape != (X.shape[1],) or beta.shape != (X.shape[1],):
        raise InvalidInputError("group_norm: parameter shapes do not match the channel count")
    out, xhat, inv = group_norm_fwd(X.data, gamma.data, beta.data, groups, eps)
    n, c = X.shape
    g = effective_groups(c, groups)
    cg = c // g
    N = max(n * cg, 1)

    def vjp(grad):
        dxhat = grad * gamma.data
        dg = dxhat.reshape(n, g, cg).transpose(1, 0, 2).reshape(g, -1)
        xg = xhat.reshape(n, g, cg).transpose(1, 0, 2).reshape(g, -1)
        s1 = dg.sum(axis=1, keepdims=True)
        s2 = (dg * xg).sum(axis=1, keepdims=True)
        dx = (inv[:, None] / N) * (N * dg - s1 - xg * s2)
        dX = dx.reshape(g, n, cg).transpose(1, 0, 2).reshape(n, c)
        return dX, (grad * xhat).sum(axis=0), grad.sum(axis=0)

    return record(out, (X, gamma, beta), vjp, "group_norm")


def segment_max(rows, bundle: ops.DistributedBundle) -> Tensor:
    """Per-vertex max over contributor rows; vertices without contributors get zeros."""
    rows = constant(rows)
    R, c = rows.shape
    n = bundle.n_vertices
    out = np.zeros((n, c))
    if R == 0:
        return record(out, (rows,), lambda g: (np.zeros((0, c)),), "segment_max")
    vertex = bundle.vertex
    nz = np.flatnonzero(np.r_[True, vertex[1:] != vertex[:-1]])
    owners = vertex[nz]
    out[owners] = np.maximum.reduceat(rows.data, nz, axis=0)
    hit = rows.data == out[vertex]
    cand = np.where(hit, np.arange(R)[:, None], R)
    first = np.minimum.reduceat(cand, nz, axis=0)
    cols = np.arange(c)[None, :]

    def vjp(g):
        d = np.zeros((R, c))
        d[first, cols] = g[owners]
        return (d,)

    return record(out, (rows,), vjp, "segment_max")


# ----------------------------------------------------------------------------
# blocks


def init_pointnet(rng, in_width, widths=POINTNET_WIDTHS):
    params = {}
    c = in_width
    for i, w in enumerate(widths):
        if i > 0:
            params[f"gn{i}"] = init_group_norm(c)
        params[f"fc{i}"] = init_linear(rng, c, w)
        c = w
    return params


def pointnet_encode(rows, bundle: ops.DistributedBundle, params) -> Tensor:
    """Encode distributed (centered coords ; features) rows into one value per vertex.

    The raw first stage is a plain per-row linear map; later stages are
    pre-activated (GroupNorm, ReLU, linear). A max over each vertex's
    contributors closes the block.
    """
    h = constant(rows)
    i = 0
    while f"fc{i}" in params:
        if i > 0:
            gn = params[f"gn{i}"]
            h = relu(group_norm(h, gn["gamma"], gn["beta"]))
        fc = params[f"fc{i}"]
        h = linear(h, fc["W"], fc["b"])
        i += 1
    return segment_max(h, bundle)


def init_resnet(rng, width, taps):
    return {
        "gn1": init_group_norm(width),
        "conv1": init_conv(rng, taps, width, width),
        "gn2": init_group_norm(width),
        "conv2": init_conv(rng, taps, width, width),
    }


def preact_conv(X, gn, conv, idx, kind="convolve") -> Tensor:
    """GroupNorm -> ReLU -> lattice convolution of the given kind."""
    h = relu(group_norm(X, gn["gamma"], gn["beta"]))
    fn = {"convolve": ops.convolve, "coarsen": ops.coarsen, "upsample": ops.upsample}[kind]
    return fn(h, conv["W"], idx, conv.get("b"))


def resnet_block(X, params, idx) -> Tensor:
    X = constant(X)
    if params["conv2"]["W"].shape[2] != X.shape[1] or params["conv1"]["W"].shape[1] != X.shape[1]:
        raise ConfigError("resnet block widths must match its input width")
    h = preact_conv(X, params["gn1"], params["conv1"], idx)
    h = preact_conv(h, params["gn2"], params["conv2"], idx)
    return X + h


def other_max(q) -> Tensor:
    """For each simplex slot k, the elementwise max of the other slots' rows."""
    q = constant(q)
    m, k, c = q.shape
    if k < 2:
        raise InvalidInputError("other_max needs at least two slots")
    order = np.argsort(-q.data, axis=1, kind="stable")
    a1 = order[:, 0, :]
    a2 = order[:, 1, :]
    v1 = np.take_along_axis(q.data, a1[:, None, :], axis=1)[:, 0, :]
    v2 = np.take_along_axis(q.data, a2[:, None, :], axis=1)[:, 0, :]
    slot = np.arange(k)[None, :, None]
    is_top = slot == a1[:, None, :]
    out = np.where(is_top, v2[:, None, :], v1[:, None, :])
    src = np.where(is_top, a2[:, None, :], a1[:, None, :])
    pts = np.arange(m)[:, None]
    cols = np.arange(c)[None, :]

    def vjp(g):
        d = np.zeros_like(q.data)
        for s in range(k):
            d[pts, src[:, s, :], cols] += g[:, s, :]
        return (d,)

    return record(out, (q,), vjp, "other_max")


def deform_offset_head(q, W, b) -> Tensor:
    """Barycentric offsets tanh(b + (q_pk - max_{j != k} q_pj) . W), shape (m, d+1).

    Permuting the simplex slots of ``q`` permutes the output identically.
    """
    q, W, b = constant(q), constant(W), constant(b)
    if W.shape != (q.shape[2], 1):
        raise InvalidInputError(f"offset head weight must be ({q.shape[2]}, 1), got {W.shape}")
    diff = q - other_max(q)
    # elementwise product + row sum keeps each slot's reduction independent of its position
    s = (diff * W.reshape(1, 1, q.shape[2])).sum(axis=2)
    return tanh(s + b.reshape(1, 1))


def init_offset_head(rng, width, scale=1e-3):
    return {"W": rng.normal(0.0, scale, size=(width, 1)), "b": np.zeros(1)}


def offset_regularizer(delta) -> Tensor:
    """Mean over points of the squared sum of that point's barycentric offsets."""
    delta = constant(delta)
    return square(delta.sum(axis=1)).mean()


def init_fusion(rng, width):
    return init_linear(rng, 2 * width, width)


def temporal_fuse(X_prev, X_curr, params) -> Tensor:
    """ReLU(Linear([zero-padded previous ; current])) per vertex.

    ``X_prev`` may be None for the first timestep. Its rows must be the
    leading rows of the shared table that ``X_curr`` indexes.
    """
    X_curr = constant(X_curr)
    n, c = X_curr.shape
    if X_prev is None:
        prev = constant(np.zeros((n, c)))
    else:
        X_prev = constant(X_prev)
        if X_prev.shape[0] > n:
            raise InvalidInputError(f"previous step has {X_prev.shape[0]} rows but the table now has {n}")
        if X_prev.shape[1] != c:
            raise InvalidInputError("previous and current widths differ")
        prev = pad_rows(X_prev, n)
    return relu(linear(concat([prev, X_curr], axis=1), params["W"], params["b"]))
