"""Built-in verification suites run by ``latticeseg selftest``."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .config import ModelConfig
from .lattice import TOL, ScaledCloud, build_lattice, elevate, neighbor_offsets
from .losses import DiscriminativeMargins, discriminative_loss, lovasz_softmax, semantic_loss
from .data import PointCloud
from .network import build_hierarchy, build_model, loss_for, prepare
from .tape import grad_check


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def geometry_suite(dim, rng, n_points=10_000):
    X = rng.normal(size=(n_points, dim)) * 3.0
    cloud = ScaledCloud.from_points(X, np.ones(dim))
    lat, fp = build_lattice(cloud)
    elev = elevate(cloud.positions)
    w = fp.weights
    coords = lat.coords[fp.rows]
    recon = np.einsum("pk,pkj->pj", w, coords)
    checks = {
        "weights_in_unit_interval": bool(w.min() >= 0 and w.max() <= 1),
        "weights_sum_to_one": bool(np.abs(w.sum(1) - 1).max() <= TOL),
        "reconstruction": bool(np.abs(recon - elev).max() <= TOL * max(1.0, np.abs(elev).max())),
        "keys_zero_sum": bool(np.all(lat.coords.sum(1) == 0)),
    }
    offs = neighbor_offsets(dim)[1:]
    nbrs = lat.coords[:, None, :] + offs[None, :, :]
    distinct = all(len({tuple(r) for r in v}) == 2 * (dim + 1) for v in nbrs[: min(len(nbrs), 500)])
    checks["distinct_neighbors"] = distinct and bool(np.all(nbrs.sum(2) == 0))
    bad = [k for k, ok in checks.items() if not ok]
    return not bad, "ok" if not bad else "failed: " + ", ".join(bad)


def adjointness_suite(dim, rng, instances=100):
    worst = 0.0
    for _ in range(instances):
        m = int(rng.integers(5, 200))
        c = int(rng.integers(1, 6))
        cloud = ScaledCloud.from_points(rng.normal(size=(m, dim)), rng.uniform(0.3, 2.0, dim))
        lat, fp = build_lattice(cloud)
        F = rng.normal(size=(m, c))
        X = rng.normal(size=(len(lat), c))
        lhs = float(np.sum(ops.splat_fwd(F, fp) * X))
        rhs = float(np.sum(F * ops.slice_fwd(X, fp)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return worst <= 1e-12, f"max relative error {worst:.3e}"


def _small_cloud(dim, rng, m=60, f=2):
    cloud = ScaledCloud.from_points(rng.normal(size=(m, dim)), np.full(dim, 0.8), rng.normal(size=(m, f)))
    return cloud, build_hierarchy(cloud, 2)


def gradcheck_cases(dim, rng):
    """(name, function, inputs) triples covering ops, blocks and losses.

    Array outputs are reduced to scalars by a fixed random projection.
    """
    cloud, hier = _small_cloud(dim, rng)
    fp = hier.levels[0].footprint
    n0, n1 = hier.levels[0].n, hier.levels[1].n
    idx = hier.levels[0].conv_idx
    taps = idx.shape[1]
    m = len(cloud)
    c = 4

    def rnd(*shape):
        return rng.normal(size=shape)

    def projected(fn, *shape):
        P = rnd(*shape)
        return lambda *args: (fn(*args) * P).sum()

    pn = nn.init_pointnet(rng, dim + 2)
    rows = hier.bundle.stacked()
    res = nn.init_resnet(rng, 8, taps)
    fus = nn.init_fusion(rng, c)
    labels = rng.integers(0, 3, m)
    inst = rng.integers(0, 3, m)
    margins = DiscriminativeMargins(0.1, 0.3)

    def pointnet(W0, W1):
        p = dict(pn, fc0={"W": W0, "b": pn["fc0"]["b"]}, fc1={"W": W1, "b": pn["fc1"]["b"]})
        return nn.pointnet_encode(rows, hier.bundle, p)

    def resnet(X, W):
        return nn.resnet_block(X, dict(res, conv1={"W": W, "b": res["conv1"]["b"]}), idx)

    return [
        ("splat", projected(lambda F: ops.splat(F, fp), n0, c), [rnd(m, c)]),
        ("slice", projected(lambda X: ops.slice_(X, fp), m, c), [rnd(n0, c)]),
        ("convolve", projected(lambda X, W, b: ops.convolve(X, W, idx, b), n0, 3), [rnd(n0, c), rnd(taps, c, 3), rnd(3)]),
        ("coarsen", projected(lambda X, W: ops.coarsen(X, W, hier.down[0]), n1, c), [rnd(n0, c), rnd(taps, c, c)]),
        ("upsample", projected(lambda X, W: ops.upsample(X, W, hier.up[0]), n0, c), [rnd(n1, c), rnd(taps, c, c)]),
        ("gather", projected(lambda X: ops.gather(X, fp), m, dim + 1, c), [rnd(n0, c)]),
        ("deform_slice", projected(lambda X, D: ops.deform_slice(X, fp, D), m, c), [rnd(n0, c), 0.1 * rnd(m, dim + 1)]),
        ("distribute", projected(lambda G, F: ops.distribute_values(G, F, hier.bundle), len(hier.bundle.vertex), dim + 2),
         [cloud.positions.copy(), cloud.features.copy()]),
        ("group_norm", projected(lambda X, g, b: nn.group_norm(X, g, b, groups=4), n0, 8),
         [rnd(n0, 8), 1 + 0.1 * rnd(8), 0.1 * rnd(8)]),
        ("pointnet_encode", projected(pointnet, n0, 64), [pn["fc0"]["W"], pn["fc1"]["W"]]),
        ("resnet_block", projected(resnet, n0, 8), [rnd(n0, 8), res["conv1"]["W"]]),
        ("deform_offset_head", projected(nn.deform_offset_head, m, dim + 1), [rnd(m, dim + 1, c), rnd(c, 1), rnd(1)]),
        ("offset_regularizer", nn.offset_regularizer, [rnd(m, dim + 1)]),
        ("temporal_fuse", projected(lambda A, B, W: nn.temporal_fuse(A, B, {"W": W, "b": fus["b"] + 0.5}), n0, c),
         [rnd(n0 - 3, c), rnd(n0, c), fus["W"]]),
        ("semantic_loss", lambda S: semantic_loss(S, labels), [rnd(m, 3)]),
        ("lovasz_softmax", lambda S: lovasz_softmax(S, labels), [rnd(m, 3)]),
        ("discriminative", lambda E: discriminative_loss(E, inst, margins)[0], [2 * rnd(m, 4)]),
    ]


def gradcheck_suite(dim, rng, tol=1e-4, model=True):
    failures, worst = [], 0.0
    for name, f, inputs in gradcheck_cases(dim, rng):
        rep = grad_check(f, inputs, tol=tol, max_entries=40, rng=rng)
        worst = max(worst, rep.max_error)
        if not rep.passed:
            failures.append(f"{name} ({rep.message or f'{rep.max_error:.2e}'})")
    if model:
        rep = model_gradcheck(dim, rng, tol=tol)
        worst = max(worst, rep.max_error)
        if not rep.passed:
            failures.append(f"model ({rep.message or f'{rep.max_error:.2e}'})")
    if failures:
        return False, "failed: " + ", ".join(failures)
    return True, f"max relative error {worst:.3e}"


def model_gradcheck(dim, rng, tol=1e-4, points=80, task="semantic-parts", per_tensor=2):
    cfg = ModelConfig.shallow(task=task, dim=dim, in_features=2, sigma=(0.7,) * dim)
    model = build_model(cfg, seed=int(rng.integers(1 << 31)))
    pos = rng.normal(size=(points, dim))
    cloud = PointCloud(pos, rng.normal(size=(points, 2)), rng.integers(0, 3, points), rng.integers(0, 3, points))
    sample = prepare(cfg, cloud)
    params = model.parameters()

    def f(*ps):
        return loss_for(model, sample)

    return grad_check(f, params, tol=tol, max_entries=per_tensor, rng=rng)


SUITES = ("geometry", "adjointness", "gradcheck")


def run_selftest(dim=3, seed=0, suites=SUITES):
    results = []
    for name in suites:
        rng = np.random.default_rng([seed, SUITES.index(name)])
        t0 = time.perf_counter()
        fn = {"geometry": geometry_suite, "adjointness": adjointness_suite, "gradcheck": gradcheck_suite}[name]
        ok, detail = fn(dim, rng)
        results.append(SuiteResult(name, ok, detail, time.perf_counter() - t0))
    return results
