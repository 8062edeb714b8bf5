"""U-Net assembly on the lattice hierarchy, optimiser, and training step."""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn, ops
from .clustering import MeanShiftConfig, assign_instances
from .config import ModelConfig
from .errors import InvalidInputError, NonFiniteError
from .lattice import ScaledCloud, SimplexFootprint, SparseLattice, auto_sigma, build_lattice
from .losses import DiscriminativeMargins, discriminative_loss, semantic_loss
from .tape import Tensor, backward, concat, constant, first_nonfinite, parameter, relu, zero_grad

# ----------------------------------------------------------------------------
# lattice hierarchy


@dataclass
class Level:
    footprint: SimplexFootprint
    conv_idx: np.ndarray
    n: int


@dataclass
class Hierarchy:
    """Every lattice structure one forward pass needs, built once per cloud."""

    cloud: ScaledCloud
    levels: list
    down: list  # down[l]: rows of level l read by each vertex of level l+1
    up: list  # up[l]: rows of level l+1 read by each vertex of level l
    bundle: ops.DistributedBundle

    @property
    def n_points(self):
        return len(self.cloud)


def build_hierarchy(cloud: ScaledCloud, n_levels: int, tables=None) -> Hierarchy:
    """Build the per-level lattices by halving positions once per level.

    ``tables`` (one SparseLattice per level) are grown in place when given, so
    that vertices keep their rows across the clouds of a sequence.
    """
    if tables is None:
        tables = [SparseLattice(cloud.dim) for _ in range(n_levels)]
    levels = []
    for lvl in range(n_levels):
        _, fp = build_lattice(cloud.halved(lvl) if lvl else cloud, tables[lvl])
        levels.append(fp)
    out_levels = [Level(fp, ops.conv_index(tables[i]), len(tables[i])) for i, fp in enumerate(levels)]
    down = [ops.coarsen_index(tables[i + 1], tables[i]) for i in range(n_levels - 1)]
    up = [ops.upsample_index(tables[i], tables[i + 1]) for i in range(n_levels - 1)]
    return Hierarchy(cloud, out_levels, down, up, ops.distribute(cloud, levels[0]))


def build_sequence(clouds, n_levels: int):
    """Hierarchies for a time-ordered window of clouds sharing one table per level."""
    if not clouds:
        raise InvalidInputError("empty sequence")
    tables = [SparseLattice(clouds[0].dim) for _ in range(n_levels)]
    return [build_hierarchy(c, n_levels, tables) for c in clouds]


# ----------------------------------------------------------------------------
# model


def _tensorize(tree, prefix, out):
    for key, val in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(val, dict):
            _tensorize(val, name, out)
        else:
            t = parameter(val, name=name)
            tree[key] = t
            out.append(t)


class Model:
    """Parameter registry plus the forward passes for every head."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self._flat = []
        _tensorize(self.params, "", self._flat)

    def parameters(self):
        return list(self._flat)

    def named_parameters(self):
        return [(t.name, t) for t in self._flat]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()[:16]

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self._flat))

    # -- forward ------------------------------------------------------------

    def _step(self, hier: Hierarchy, history=None, features=None, positions=None):
        """One timestep through the U-Net. Returns (per-point outputs, fusion states, offsets)."""
        cfg = self.config
        P = self.params
        motion = cfg.head == "motion"
        fused = []

        def fuse(i, x):
            if not motion:
                return x
            prev = history[i] if history else None
            y = nn.temporal_fuse(prev, x, P["fusion"][f"f{i}"])
            fused.append(y)
            return y

        pos = constant(hier.cloud.positions) if positions is None else positions
        feats = constant(hier.cloud.features) if features is None else features
        rows = ops.distribute_values(pos, feats, hier.bundle)
        x = nn.pointnet_encode(rows, hier.bundle, P["pointnet"])
        x = fuse(0, x)

        skips = []
        for lvl in range(cfg.levels):
            enc = P["enc"][f"l{lvl}"]
            if lvl > 0:
                x = nn.preact_conv(x, enc["down_gn"], enc["down"], hier.down[lvl - 1], "coarsen")
            for b in range(cfg.blocks[lvl]):
                x = nn.resnet_block(x, enc[f"res{b}"], hier.levels[lvl].conv_idx)
            if lvl == 0:
                x = fuse(1, x)
            skips.append(x)

        for lvl in reversed(range(cfg.levels - 1)):
            dec = P["dec"][f"l{lvl}"]
            x = nn.preact_conv(x, dec["up_gn"], dec["up"], hier.up[lvl], "upsample")
            x = concat([skips[lvl], x], axis=1)
            x = relu(nn.group_norm(x, dec["cat_gn"]["gamma"], dec["cat_gn"]["beta"]))
            x = nn.linear(x, dec["cat"]["W"], dec["cat"]["b"])
            if lvl == 0:
                x = fuse(2, x)
            for b in range(cfg.blocks[lvl]):
                x = nn.resnet_block(x, dec[f"res{b}"], hier.levels[lvl].conv_idx)
        if cfg.levels == 1:
            x = fuse(2, x)

        fp = hier.levels[0].footprint
        delta = None
        if cfg.deform:
            q = ops.gather(x, fp)
            delta = nn.deform_offset_head(q, P["offset"]["W"], P["offset"]["b"])
            f = ops.deform_slice(x, fp, delta)
        else:
            f = ops.slice_(x, fp)
        out = nn.linear(f, P["head"]["W"], P["head"]["b"])
        return out, fused, delta

    def forward(self, hier, **kw) -> Tensor:
        """Per-point scores (semantic / motion) or embeddings (instance) for one cloud."""
        if isinstance(hier, list):
            return self.forward_sequence(hier, **kw)[0]
        out, _, delta = self._step(hier, **kw)
        self._last_delta = delta
        return out

    def forward_sequence(self, hiers, **kw):
        """Run a window of hierarchies in time order; outputs belong to the last cloud."""
        if not hiers:
            raise InvalidInputError("empty sequence")
        history = None
        for hier in hiers:
            out, history, delta = self._step(hier, history, **kw)
        self._last_delta = delta
        return out, history

    forward_semantic = forward
    forward_instance = forward

    def forward_motion(self, hiers):
        return self.forward_sequence(list(hiers))[0]


def init_params(config: ModelConfig, rng) -> dict:
    cfg = config.validate()
    taps = 2 * (cfg.dim + 1) + 1
    w = cfg.widths
    params = {"pointnet": nn.init_pointnet(rng, cfg.dim + cfg.in_features)}
    params["enc"] = {}
    for lvl in range(cfg.levels):
        enc = {}
        if lvl > 0:
            enc["down_gn"] = nn.init_group_norm(w[lvl - 1])
            enc["down"] = nn.init_conv(rng, taps, w[lvl - 1], w[lvl])
        for b in range(cfg.blocks[lvl]):
            enc[f"res{b}"] = nn.init_resnet(rng, w[lvl], taps)
        params["enc"][f"l{lvl}"] = enc
    params["dec"] = {}
    for lvl in reversed(range(cfg.levels - 1)):
        dec = {
            "up_gn": nn.init_group_norm(w[lvl + 1]),
            "up": nn.init_conv(rng, taps, w[lvl + 1], w[lvl]),
            "cat_gn": nn.init_group_norm(2 * w[lvl]),
            "cat": nn.init_linear(rng, 2 * w[lvl], w[lvl]),
        }
        for b in range(cfg.blocks[lvl]):
            dec[f"res{b}"] = nn.init_resnet(rng, w[lvl], taps)
        params["dec"][f"l{lvl}"] = dec
    if cfg.head == "motion":
        params["fusion"] = {f"f{i}": nn.init_fusion(rng, w[0]) for i in range(3)}
    if cfg.deform:
        params["offset"] = nn.init_offset_head(rng, w[0])
    params["head"] = nn.init_linear(rng, w[0], cfg.out_width, scale=np.sqrt(1.0 / w[0]))
    return params


def build_model(config: ModelConfig, seed: int | None = None) -> Model:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return Model(config, init_params(config, rng))


# ----------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    """A prepared training/eval item: lattice hierarchies plus targets for the last cloud."""

    hiers: list
    semantic: np.ndarray | None = None
    instance: np.ndarray | None = None

    @property
    def target(self):
        return self.hiers[-1]


def scaled(cloud, sigma) -> ScaledCloud:
    return ScaledCloud.from_points(cloud.positions, sigma, cloud.features)


def resolve_sigma(config: ModelConfig, first_cloud) -> tuple:
    if config.sigma is None:
        config.sigma = tuple(float(s) for s in auto_sigma(first_cloud.positions, config.points_per_vertex))
    return config.sigma


def prepare(config: ModelConfig, item) -> Sample:
    """Turn a PointCloud (or a list of them for motion) into a Sample."""
    clouds = list(item) if isinstance(item, (list, tuple)) else [item]
    sigma = resolve_sigma(config, clouds[0])
    if config.head == "motion":
        clouds = clouds[-config.window :]
        hiers = build_sequence([scaled(c, sigma) for c in clouds], config.levels)
    else:
        hiers = [build_hierarchy(scaled(clouds[-1], sigma), config.levels)]
    last = clouds[-1]
    return Sample(hiers, last.semantic, last.instance)


def run(model: Model, sample: Sample) -> Tensor:
    if model.config.head == "motion":
        return model.forward_sequence(sample.hiers)[0]
    return model.forward(sample.hiers[0])


def loss_for(model: Model, sample: Sample, out: Tensor | None = None) -> Tensor:
    cfg = model.config
    out = run(model, sample) if out is None else out
    if cfg.head == "instance":
        margins = DiscriminativeMargins(cfg.delta_v, cfg.delta_d)
        loss = discriminative_loss(out, sample.instance, margins)[0]
    else:
        loss = semantic_loss(out, sample.semantic)
    if cfg.offset_reg and cfg.deform and getattr(model, "_last_delta", None) is not None:
        loss = loss + cfg.offset_reg_weight * nn.offset_regularizer(model._last_delta)
    return loss


def predict(model: Model, sample: Sample, mean_shift: MeanShiftConfig | None = None):
    """Hard labels for the sample's last cloud: class ids, or instance ids for the instance head."""
    out = run(model, sample).data
    if model.config.head != "instance":
        return out.argmax(axis=1)
    ms = mean_shift or MeanShiftConfig(bandwidth=model.config.delta_v)
    sem = sample.semantic if sample.semantic is not None else np.zeros(len(out), dtype=np.int64)
    return assign_instances(sem, out, ms)


# ----------------------------------------------------------------------------
# optimisation


class PlateauDetector:
    """Scales the learning rate by ``factor`` after ``patience`` evaluations without improvement.

    Each evaluation is smoothed as the mean of the last ``window`` values.
    """

    def __init__(self, patience=10, window=5, factor=0.1, threshold=1e-4):
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.values = deque(maxlen=window)
        self.best = None
        self.bad = 0

    def update(self, value: float) -> bool:
        self.values.append(float(value))
        smooth = sum(self.values) / len(self.values)
        if self.best is None or smooth < self.best - self.threshold * abs(self.best):
            self.best = smooth
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return True
        return False


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    plateau: PlateauDetector = field(default_factory=PlateauDetector)
    interval: int = 10
    pending: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: Model):
        cfg = model.config
        return cls(
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            plateau=PlateauDetector(cfg.plateau_patience, cfg.plateau_window, cfg.plateau_factor),
            interval=cfg.plateau_interval,
        )

    def apply(self, params, grads):
        """Adam step with decoupled weight decay."""
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def record_loss(self, value: float):
        self.pending.append(value)
        if len(self.pending) >= self.interval:
            if self.plateau.update(float(np.mean(self.pending))):
                self.lr *= self.plateau.factor
            self.pending = []


def train_step(model: Model, batch, state: OptimizerState):
    """One optimiser update on a list of samples. Returns (mean loss, state)."""
    if not batch:
        raise InvalidInputError("empty batch")
    params = model.parameters()
    zero_grad(params)
    total = None
    for sample in batch:
        loss = loss_for(model, sample)
        total = loss if total is None else total + loss
    total = total * (1.0 / len(batch))
    if not np.isfinite(total.data):
        bad = first_nonfinite(total)
        op = bad.op if bad is not None else "unknown"
        raise NonFiniteError(f"loss became non-finite; first bad value produced by op {op!r}", op)
    grads = backward(total, wrt=params)
    state.apply(params, grads)
    value = float(total.data)
    state.record_loss(value)
    return value, state


def train(model: Model, samples, steps: int, state: OptimizerState | None = None, log=None):
    """Round-robin over samples for ``steps`` single-sample updates."""
    state = state or OptimizerState.for_model(model)
    history = []
    for i in range(steps):
        value, state = train_step(model, [samples[i % len(samples)]], state)
        history.append(value)
        if log is not None:
            log(i, value, state)
    return history, state
