"""Plain-text checkpoints.

Layout::

    latticeseg-checkpoint 1
    config-checksum <hex>
    config-lines <n>
    <n lines of key = value>
    param <name> <shape, comma separated> <values in 17 significant digits>
    ...
"""
from __future__ import annotations

import numpy as np

from .config import ModelConfig, read_pairs
from .errors import ParseError, SchemaError
from .network import Model, build_model

MAGIC = "latticeseg-checkpoint"
VERSION = 1


def format_checkpoint(model: Model) -> str:
    cfg_text = model.config.to_text()
    cfg_lines = cfg_text.splitlines()
    out = [f"{MAGIC} {VERSION}", f"config-checksum {model.config.checksum()}", f"config-lines {len(cfg_lines)}"]
    out.extend(cfg_lines)
    for name, t in model.named_parameters():
        shape = ",".join(str(s) for s in t.data.shape) or "-"
        values = " ".join("%.17g" % v for v in t.data.ravel())
        out.append(f"param {name} {shape} {values}")
    return "\n".join(out) + "\n"


def save_checkpoint(path, model: Model):
    with open(path, "w") as fh:
        fh.write(format_checkpoint(model))


def parse_checkpoint(text: str) -> Model:
    lines = text.splitlines()
    if not lines or lines[0].split()[:1] != [MAGIC]:
        raise ParseError("not a checkpoint file", 1)
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise ParseError("bad checkpoint version line", 1) from None
    if version != VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}", 1)
    if len(lines) < 3 or not lines[1].startswith("config-checksum ") or not lines[2].startswith("config-lines "):
        raise ParseError("missing checkpoint header", 2)
    checksum = lines[1].split()[1]
    n_cfg = int(lines[2].split()[1])
    cfg = ModelConfig.from_pairs(read_pairs("\n".join(lines[3 : 3 + n_cfg])))
    if cfg.checksum() != checksum:
        raise SchemaError("config checksum mismatch", 2)
    model = build_model(cfg)
    params = dict(model.named_parameters())
    seen = set()
    for lineno, line in enumerate(lines[3 + n_cfg :], 4 + n_cfg):
        if not line.strip():
            continue
        tok = line.split()
        if tok[0] != "param" or len(tok) < 3:
            raise ParseError(f"expected a param record, got {line[:40]!r}", lineno)
        name, shape_s = tok[1], tok[2]
        if name not in params:
            raise SchemaError(f"unknown parameter {name!r}", lineno)
        shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
        if shape != params[name].data.shape:
            raise SchemaError(f"shape mismatch for {name}: file {shape}, model {params[name].data.shape}", lineno)
        try:
            values = np.array([float(v) for v in tok[3:]], dtype=np.float64)
        except ValueError:
            raise ParseError(f"malformed value in {name}", lineno) from None
        if values.size != int(np.prod(shape)):
            raise SchemaError(f"{name} has {values.size} values, expected {int(np.prod(shape))}", lineno)
        params[name].data[...] = values.reshape(shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise SchemaError(f"checkpoint lacks parameters: {', '.join(sorted(missing))}")
    return model


def load_checkpoint(path) -> Model:
    with open(path) as fh:
        return parse_checkpoint(fh.read())
