"""Flat-kernel mean-shift in embedding space and instance assignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class MeanShiftConfig:
    bandwidth: float = 0.5
    max_iters: int = 100
    eps: float = 1e-4
    merge_radius: float | None = None

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if not 0 < self.eps < self.bandwidth:
            raise ConfigError("convergence eps must lie in (0, bandwidth)")
        if self.merge_radius is not None and not 0 < self.merge_radius <= self.bandwidth:
            raise ConfigError("merge radius must lie in (0, bandwidth]")

    @property
    def merge(self) -> float:
        return self.bandwidth if self.merge_radius is None else self.merge_radius


def _sq_dists(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def shift_trajectories(X, config: MeanShiftConfig, chunk=1024):
    """Run every point to its flat-kernel fixed point."""
    h2 = config.bandwidth**2
    Y = X.copy()
    active = np.ones(len(X), dtype=bool)
    for _ in range(config.max_iters):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        for start in range(0, len(idx), chunk):
            part = idx[start : start + chunk]
            inside = (_sq_dists(Y[part], X) <= h2).astype(np.float64)
            count = inside.sum(axis=1, keepdims=True)
            new = np.where(count > 0, inside @ X / np.maximum(count, 1.0), Y[part])
            moved = np.sqrt(((new - Y[part]) ** 2).sum(1))
            Y[part] = new
            active[part[moved < config.eps]] = False
    return Y


def mean_shift(embeddings, config: MeanShiftConfig | None = None):
    """Return (modes (k, E), assignment (m,)) with ids numbered by first appearance."""
    config = config or MeanShiftConfig()
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) == 0:
        raise InvalidInputError("mean shift needs at least one point")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("embeddings contain non-finite values")
    Y = shift_trajectories(X, config)
    close = _sq_dists(Y, Y) <= config.merge**2
    _, comp = connected_components(csr_matrix(close), directed=False)
    _, first = np.unique(comp, return_index=True)
    relabel = np.empty(comp.max() + 1, dtype=np.int64)
    relabel[comp[np.sort(first)]] = np.arange(len(first))
    assignment = relabel[comp]
    k = len(first)
    modes = np.zeros((k, X.shape[1]))
    np.add.at(modes, assignment, Y)
    modes /= np.bincount(assignment, minlength=k)[:, None]
    return modes, assignment


def assign_instances(semantic, embeddings, config: MeanShiftConfig | None = None, thing_classes=None):
    """Cluster embeddings separately inside every thing class.

    Instance ids are globally unique and contiguous from 0; points of stuff
    classes (or with semantic label -1) get -1.
    """
    semantic = np.asarray(semantic, dtype=np.int64).ravel()
    X = np.asarray(embeddings, dtype=np.float64)
    if len(semantic) != len(X):
        raise InvalidInputError("semantic labels and embeddings lengths differ")
    out = np.full(len(semantic), -1, dtype=np.int64)
    classes = [c for c in np.unique(semantic) if c >= 0]
    if thing_classes is not None:
        classes = [c for c in classes if c in set(thing_classes)]
    next_id = 0
    for c in classes:
        rows = np.flatnonzero(semantic == c)
        _, assign = mean_shift(X[rows], config)
        out[rows] = assign + next_id
        next_id += assign.max() + 1
    return out
