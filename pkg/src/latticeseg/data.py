"""Point-cloud files, sequence manifests, and the seeded synthetic datasets.

Cloud file grammar::

    # optional comment lines
    <d> <f_d> <has_semantic 0|1> <has_instance 0|1>
    <d positions> <f_d features> [<semantic>] [<instance>]
    ...

Reals are written with 17 significant digits so a save/load round trip is
exact. Labels are integers >= -1, where -1 means unlabelled.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError, SchemaError

SEMANTIC_CLASSES = {"semantic-parts": ("sphere", "cylinder", "plane"), "motion": ("ground", "static", "moving")}


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    semantic: np.ndarray | None = None
    instance: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise InvalidInputError("positions must be an (m, d) matrix")
        m = len(self.positions)
        if self.features is None:
            self.features = np.zeros((m, 0))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != m:
            raise InvalidInputError("features must be an (m, f_d) matrix")
        for name in ("semantic", "instance"):
            lab = getattr(self, name)
            if lab is not None:
                lab = np.asarray(lab, dtype=np.int64).ravel()
                if len(lab) != m:
                    raise InvalidInputError(f"{name} labels need one entry per point")
                setattr(self, name, lab)

    def __len__(self):
        return len(self.positions)

    @property
    def dim(self):
        return self.positions.shape[1]

    def permuted(self, perm):
        return PointCloud(
            self.positions[perm],
            self.features[perm],
            None if self.semantic is None else self.semantic[perm],
            None if self.instance is None else self.instance[perm],
        )


def _data_lines(text):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def parse_cloud(text: str) -> PointCloud:
    lines = _data_lines(text)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise ParseError("missing header line") from None
    try:
        d, fd, has_sem, has_inst = (int(x) for x in header.split())
    except ValueError:
        raise ParseError(f"header must be four integers 'd f_d has_semantic has_instance', got {header!r}", lineno) from None
    if d < 1 or fd < 0 or has_sem not in (0, 1) or has_inst not in (0, 1):
        raise SchemaError("header values out of range", lineno)
    arity = d + fd + has_sem + has_inst
    reals, labels = [], []
    for lineno, line in lines:
        tok = line.split()
        if len(tok) != arity:
            raise SchemaError(f"expected {arity} values, got {len(tok)}", lineno)
        try:
            reals.append([float(x) for x in tok[: d + fd]])
            labels.append([int(x) for x in tok[d + fd :]])
        except ValueError:
            raise ParseError(f"malformed value in row {line!r}", lineno) from None
        if any(v < -1 for v in labels[-1]):
            raise SchemaError("labels must be >= -1", lineno)
    reals = np.array(reals, dtype=np.float64).reshape(-1, d + fd)
    labels = np.array(labels, dtype=np.int64).reshape(len(reals), has_sem + has_inst)
    sem = labels[:, 0] if has_sem else None
    inst = labels[:, has_sem] if has_inst else None
    return PointCloud(reals[:, :d], reals[:, d:], sem, inst)


def load_cloud(path) -> PointCloud:
    with open(path) as fh:
        return parse_cloud(fh.read())


def format_cloud(cloud: PointCloud) -> str:
    has_sem = cloud.semantic is not None
    has_inst = cloud.instance is not None
    out = [f"{cloud.dim} {cloud.features.shape[1]} {int(has_sem)} {int(has_inst)}"]
    reals = np.hstack([cloud.positions, cloud.features])
    for i, row in enumerate(reals):
        tok = ["%.17g" % v for v in row]
        if has_sem:
            tok.append(str(int(cloud.semantic[i])))
        if has_inst:
            tok.append(str(int(cloud.instance[i])))
        out.append(" ".join(tok))
    return "\n".join(out) + "\n"


def save_cloud(path, cloud: PointCloud):
    with open(path, "w") as fh:
        fh.write(format_cloud(cloud))


def save_labels(path, labels):
    with open(path, "w") as fh:
        fh.write("".join(f"{int(v)}\n" for v in np.asarray(labels).ravel()))


def load_labels(path) -> np.ndarray:
    vals = []
    with open(path) as fh:
        for lineno, line in _data_lines(fh.read()):
            try:
                vals.append(int(line))
            except ValueError:
                raise ParseError(f"expected an integer label, got {line!r}", lineno) from None
    return np.array(vals, dtype=np.int64)


# ----------------------------------------------------------------------------
# sequences


def save_manifest(path, cloud_paths, frame="common"):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as fh:
        fh.write(f"frame = {frame}\n")
        for p in cloud_paths:
            fh.write(f"cloud = {os.path.relpath(os.path.abspath(p), base)}\n")


def load_sequence(path):
    """Read a sequence manifest; clouds are returned oldest first."""
    base = os.path.dirname(os.path.abspath(path))
    clouds = []
    with open(path) as fh:
        for lineno, line in _data_lines(fh.read()):
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {line!r}", lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "cloud":
                clouds.append(load_cloud(os.path.join(base, value)))
            elif key != "frame":
                raise ParseError(f"unknown manifest key {key!r}", lineno)
    if not clouds:
        raise SchemaError("manifest lists no clouds")
    shapes = {(c.dim, c.features.shape[1]) for c in clouds}
    if len(shapes) != 1:
        raise SchemaError("all clouds in a sequence must share d and f_d")
    return clouds


# ----------------------------------------------------------------------------
# synthetic datasets


def _sphere(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _cylinder(rng, n, center, radius, height):
    a = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(0, height, n)
    return center + np.stack([radius * np.cos(a), radius * np.sin(a), z], axis=1)


def _plane(rng, n, lo, hi, z=0.0):
    xy = rng.uniform(lo, hi, size=(n, 2))
    return np.column_stack([xy, np.full(n, z)])


PARTS = {
    "sphere": {"center": np.array([0.0, 0.0, 0.6]), "radius": 0.35},
    "cylinder": {"center": np.array([1.2, 0.0, 0.1]), "radius": 0.25, "height": 1.0},
    "plane": {"lo": np.array([-0.6, -0.6]), "hi": np.array([1.8, 0.6])},
}


def part_distances(positions, offset=np.zeros(3)):
    """Distance of every point to each primitive surface of the semantic-parts scene."""
    p = np.asarray(positions) - offset
    s, c = PARTS["sphere"], PARTS["cylinder"]
    d_sphere = np.abs(np.linalg.norm(p - s["center"], axis=1) - s["radius"])
    rel = p - c["center"]
    radial = np.abs(np.linalg.norm(rel[:, :2], axis=1) - c["radius"])
    below = np.maximum(0.0, -rel[:, 2])
    above = np.maximum(0.0, rel[:, 2] - c["height"])
    d_cyl = np.sqrt(radial**2 + below**2 + above**2)
    pl = PARTS["plane"]
    outside = np.maximum(0.0, np.maximum(pl["lo"] - p[:, :2], p[:, :2] - pl["hi"]))
    d_plane = np.sqrt(p[:, 2] ** 2 + (outside**2).sum(1))
    return np.stack([d_sphere, d_cyl, d_plane], axis=1)


def region_labels(positions, offset=np.zeros(3)):
    """Analytic class of each point: the primitive whose surface it lies on."""
    return part_distances(positions, offset).argmin(axis=1)


def semantic_parts(rng, points=2000):
    """Sphere (0), cylinder (1) and ground plane (2); features are the raw positions."""
    n = np.full(3, points // 3)
    n[: points - n.sum()] += 1
    offset = np.append(rng.uniform(-0.1, 0.1, 2), 0.0)
    s, c, pl = PARTS["sphere"], PARTS["cylinder"], PARTS["plane"]
    pos = np.vstack([
        _sphere(rng, n[0], s["center"], s["radius"]),
        _cylinder(rng, n[1], c["center"], c["radius"], c["height"]),
        _plane(rng, n[2], pl["lo"], pl["hi"]),
    ]) + offset
    sem = np.repeat(np.arange(3), n)
    perm = rng.permutation(points)
    return PointCloud(pos[perm], pos[perm].copy(), sem[perm], None), offset


def planted_instances(rng, points=2000, k=4, radius=0.3, extent=3.0, min_gap=1.0):
    """``k`` spherical blobs at random non-overlapping centres, one thing class."""
    centers, tries = [], 0
    while len(centers) < k:
        tries += 1
        if tries > 1000:
            # greedy placement boxed itself in; start over
            if not centers:
                raise ConfigError(f"cannot place {k} blobs with gap {min_gap} in a {extent} square")
            centers, tries = [], 0
            continue
        c = np.append(rng.uniform(0, extent, 2), radius)
        if all(np.linalg.norm(c - o) >= 2 * radius + min_gap for o in centers):
            centers.append(c)
    n = np.full(k, points // k)
    n[: points - n.sum()] += 1
    pos = np.vstack([_sphere(rng, n[i], centers[i], radius) for i in range(k)])
    inst = np.repeat(np.arange(k), n)
    perm = rng.permutation(points)
    return PointCloud(pos[perm], pos[perm].copy(), np.zeros(points, dtype=np.int64), inst[perm])


def motion_sequence(rng, steps=3, velocity=0.4, blob_points=300, ground_points=400, radius=0.3):
    """Ground (0), a static blob (1) and an identical blob translating by ``velocity`` per step (2).

    Returns the clouds oldest first plus the unit direction of motion. Clouds
    carry no point features so only temporal context separates the blobs.
    """
    shape = _sphere(rng, blob_points, np.zeros(3), radius)
    extent = 4.0
    ground = _plane(rng, ground_points, np.array([0.0, 0.0]), np.array([extent, extent]))
    lo, hi = 2 * radius, extent - 2 * radius
    while True:
        static_c = np.append(rng.uniform(lo, hi, 2), radius + 0.1)
        move_c = np.append(rng.uniform(lo, hi, 2), radius + 0.1)
        ang = rng.uniform(0, 2 * np.pi)
        direction = np.array([np.cos(ang), np.sin(ang), 0.0])
        path = move_c + np.outer(np.arange(steps), direction) * velocity
        inside = np.all((path[:, :2] >= lo) & (path[:, :2] <= hi))
        if inside and np.linalg.norm(path - static_c, axis=1).min() > 4 * radius:
            break
    first_static = rng.random() < 0.5
    clouds = []
    for t in range(steps):
        moving = shape + move_c + direction * velocity * t
        blobs = [shape + static_c, moving] if first_static else [moving, shape + static_c]
        labels = [1, 2] if first_static else [2, 1]
        pos = np.vstack([ground] + blobs)
        sem = np.concatenate([np.zeros(ground_points, dtype=np.int64)] + [np.full(blob_points, l) for l in labels])
        clouds.append(PointCloud(pos, np.zeros((len(pos), 0)), sem, None))
    return clouds, direction


def synthesize(task, seed, count=1, points=2000, frames=3, velocity=0.4):
    """In-memory dataset: a list of clouds, or of ``frames``-long cloud sequences for ``motion``.

    ``points`` sizes the semantic-parts and instances clouds; motion clouds
    have a fixed 1000 points.
    """
    if count < 1 or points < 1 or frames < 1 or velocity < 0:
        raise ConfigError("count, points and frames must be positive and velocity non-negative")
    rng = np.random.default_rng(seed)
    if task == "semantic-parts":
        return [semantic_parts(rng, points)[0] for _ in range(count)]
    if task == "instances":
        if points < 4:
            raise ConfigError("instances task needs at least 4 points")
        return [planted_instances(rng, points) for _ in range(count)]
    if task == "motion":
        return [motion_sequence(rng, frames, velocity)[0] for _ in range(count)]
    raise ConfigError(f"unknown task {task!r}")


def gen_synthetic(task, seed, out_dir, count=1, points=2000, frames=3, velocity=0.4):
    """Write a synthetic dataset plus an ``index.txt`` listing its items."""
    items = synthesize(task, seed, count, points, frames, velocity)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, item in enumerate(items):
        if task == "motion":
            paths = []
            for t, cloud in enumerate(item):
                p = os.path.join(out_dir, f"seq_{i:04d}_t{t}.txt")
                save_cloud(p, cloud)
                paths.append(p)
            name = f"seq_{i:04d}.manifest"
            save_manifest(os.path.join(out_dir, name), paths)
        else:
            name = f"cloud_{i:04d}.txt"
            save_cloud(os.path.join(out_dir, name), item)
        entries.append(name)
    with open(os.path.join(out_dir, "index.txt"), "w") as fh:
        fh.write(f"task = {task}\nseed = {seed}\n")
        fh.writelines(f"item = {e}\n" for e in entries)
    return entries


def load_dataset(path):
    """Load a dataset directory (via index.txt), a single cloud file, or a manifest.

    Returns (task or None, items).
    """
    if os.path.isdir(path):
        index = os.path.join(path, "index.txt")
        if not os.path.exists(index):
            raise InvalidInputError(f"{path} has no index.txt")
        task, items = None, []
        with open(index) as fh:
            for lineno, line in _data_lines(fh.read()):
                key, _, value = (s.strip() for s in line.partition("="))
                if key == "task":
                    task = value
                elif key == "item":
                    items.append(_load_item(os.path.join(path, value)))
                elif key != "seed":
                    raise ParseError(f"unknown index key {key!r}", lineno)
        return task, items
    return None, [_load_item(path)]


def _load_item(path):
    return load_sequence(path) if path.endswith(".manifest") else load_cloud(path)
