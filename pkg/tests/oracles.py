"""Slow, independent reference implementations used to cross-check the package."""
import itertools

import numpy as np


def elevation_matrix(d):
    """Explicit (d+1, d) elevation matrix: column j is s_j * (1,...,1, -(j+1), 0,...,0)."""
    E = np.zeros((d + 1, d))
    for j in range(d):
        s = (d + 1) / np.sqrt((j + 1) * (j + 2))
        E[: j + 1, j] = s
        E[j + 1, j] = -(j + 1) * s
    return E


def coset_candidates(x, r, d, reach=1):
    """Lattice points with every coordinate = r mod (d+1) and zero sum, near x."""
    n = d + 1
    base = np.floor((x - r) / n)
    axes = [r + n * (base[i] + np.arange(-reach, reach + 2)) for i in range(n)]
    pts = np.array(list(itertools.product(*axes)), dtype=np.int64)
    return pts[pts.sum(1) == 0]


def brute_force_simplex(x, d, per_coset=4):
    """Delaunay simplex of the A*_d lattice containing elevated point x.

    Enumerates one vertex from each remainder class among the nearest
    candidates, keeps combinations that contain x and whose circumsphere is
    empty of every other nearby lattice point. Returns the set of vertex
    tuples of every such simplex found.
    """
    cosets = []
    for r in range(d + 1):
        c = coset_candidates(x, r, d)
        dist = np.linalg.norm(c - x, axis=1)
        cosets.append(c[np.argsort(dist)[:per_coset]])
    everything = np.vstack([coset_candidates(x, r, d) for r in range(d + 1)]).astype(np.float64)
    found = []
    for combo in itertools.product(*cosets):
        V = np.array(combo, dtype=np.float64)
        E = V[1:] - V[0]
        G = E @ E.T
        if abs(np.linalg.det(G)) < 1e-9:
            continue
        b = np.linalg.solve(G, E @ (x - V[0]))
        bary = np.r_[1 - b.sum(), b]
        if bary.min() < -1e-10:
            continue
        a = np.linalg.solve(2 * G, np.diag(G))
        centre = V[0] + a @ E
        R2 = np.sum((V[0] - centre) ** 2)
        d2 = np.sum((everything - centre) ** 2, axis=1)
        is_vertex = (everything[:, None, :] == V[None, :, :]).all(-1).any(1)
        if np.all(d2[~is_vertex] > R2 + 1e-9):
            found.append(frozenset(map(tuple, combo)))
    return set(found)


def dense_splat(positions_keys, weights, keys_order, F):
    """Loop splat given per-point vertex keys and a key -> row dict."""
    n = len(keys_order)
    out = np.zeros((n, F.shape[1]))
    for p in range(len(F)):
        for k in range(weights.shape[1]):
            out[keys_order[tuple(positions_keys[p, k])]] += weights[p, k] * F[p]
    return out


def dense_slice(positions_keys, weights, keys_order, X):
    out = np.zeros((len(weights), X.shape[1]))
    for p in range(len(weights)):
        for k in range(weights.shape[1]):
            out[p] += weights[p, k] * X[keys_order[tuple(positions_keys[p, k])]]
    return out


def naive_conv(src_keys, dst_keys, X, W, bias, src_of):
    """out[v] = sum_k X[row(src_of(v, k))] W_k (+ bias) with dict lookups; missing rows contribute 0."""
    table = {tuple(k): i for i, k in enumerate(src_keys)}
    out = np.zeros((len(dst_keys), W.shape[2]))
    for v, key in enumerate(dst_keys):
        for k in range(W.shape[0]):
            src = src_of(np.asarray(key), k)
            if src is None:
                continue
            row = table.get(tuple(src))
            if row is not None:
                out[v] += X[row] @ W[k]
        if bias is not None:
            out[v] += bias
    return out


def jaccard_loss(pred, gt):
    """1 - |pred & gt| / |pred | gt| for boolean masks (0 when both are empty)."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    union = np.logical_or(pred, gt).sum()
    return 0.0 if union == 0 else 1.0 - np.logical_and(pred, gt).sum() / union


def discriminative_terms(E, labels, dv, dd):
    """Loop evaluation of the variance, distance and regulariser terms."""
    ids = [c for c in sorted(set(labels.tolist())) if c >= 0]
    mus = {}
    for c in ids:
        rows = [i for i in range(len(labels)) if labels[i] == c]
        mus[c] = sum(E[i] for i in rows) / len(rows)
    var = 0.0
    for c in ids:
        rows = [i for i in range(len(labels)) if labels[i] == c]
        acc = 0.0
        for i in rows:
            acc += max(0.0, float(np.sqrt(np.sum((mus[c] - E[i]) ** 2))) - dv) ** 2
        var += acc / len(rows)
    var /= len(ids)
    dist = 0.0
    if len(ids) > 1:
        for a in ids:
            for b in ids:
                if a != b:
                    dist += max(0.0, 2 * dd - float(np.sqrt(np.sum((mus[a] - mus[b]) ** 2)))) ** 2
        dist /= len(ids) * (len(ids) - 1)
    reg = sum(float(np.sqrt(np.sum(mus[c] ** 2))) for c in ids) / len(ids)
    return var, dist, reg


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar f at array x (x is restored afterwards)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def max_rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))) if a.size else 0.0
