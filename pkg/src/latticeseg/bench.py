"""Operator throughput measurements for ``latticeseg bench``."""
from __future__ import annotations

import time

import numpy as np

from . import ops
from .lattice import ScaledCloud, auto_sigma, build_lattice


def _timed(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run_bench(points=100_000, dim=3, channels=64, seed=0, repeats=3, points_per_vertex=30.0):
    """Best-of-``repeats`` wall times in seconds for each stage of one forward pass."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, 10.0, size=(points, dim))
    sigma = auto_sigma(pos, points_per_vertex)
    cloud = ScaledCloud.from_points(pos, sigma)
    build_s, (lat, fp) = _timed(lambda: build_lattice(cloud), repeats)
    F = rng.normal(size=(points, channels))
    W = rng.normal(size=(2 * dim + 3, channels, channels)) / np.sqrt(channels)
    idx_s, idx = _timed(lambda: ops.conv_index(lat), repeats)
    splat_s, X = _timed(lambda: ops.splat_fwd(F, fp), repeats)
    conv_s, Y = _timed(lambda: ops.index_conv_fwd(X, W, None, idx), repeats)
    slice_s, _ = _timed(lambda: ops.slice_fwd(Y, fp), repeats)
    return {
        "points": points,
        "dim": dim,
        "channels": channels,
        "vertices": len(lat),
        "build_lattice_s": build_s,
        "conv_index_s": idx_s,
        "splat_s": splat_s,
        "convolve_s": conv_s,
        "slice_s": slice_s,
        "splat_convolve_slice_s": splat_s + conv_s + slice_s,
    }
