"""Lossless checkpoint of a :class:`SceneModel` (training state, not the compressed stream).

Layout: ``b"SPCK"``, u32 version, u32 length of a JSON metadata block, the
metadata, then every tensor listed in the metadata as raw little-endian data.
Tensors keep their dtype, so a checkpoint reloads bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .diffmath import ContractError, Mlp2
from .entropy import FactorizedDensity
from .hashgrid import HashGrid, HashGridConfig
from .model import SceneModel
from .predictor import HYPER_DIM, PENet
from .scene import AttributeHeads

CKPT_MAGIC = b"SPCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(model: SceneModel) -> dict:
    out = {"x": model.x, "feat": model.feat, "scale": model.scale, "offsets": model.offsets,
           "mask_logits": model.mask_logits}
    out.update(model.grid.params())
    for name, net in model.networks().items():
        out.update({f"{name}.{k}": v for k, v in net.params.items()})
    for i, net in enumerate(model.heads.nets):
        out.update({f"heads{i}.{k}": v for k, v in net.params.items()})
    if model.density is not None:
        out.update({f"density.{k}": v for k, v in model.density.params().items()})
    if model.z_hat is not None:
        out["z_hat"] = model.z_hat
    return out


def save_model(model: SceneModel, path) -> None:
    tensors = _tensors(model)
    g = model.grid.config
    meta = {
        "variant": model.variant, "seed": int(model.seed), "k": model.k,
        "feat_dim": model.feat_dim,
        "grid": {"levels": g.levels, "table_size_log2": g.table_size_log2,
                 "feat_per_level": g.feat_per_level, "base_resolution": g.base_resolution,
                 "max_resolution": g.max_resolution, "bbox": [list(map(float, c)) for c in g.bbox]},
        "tensors": [[name, np.asarray(t).dtype.str.lstrip("<>=|"), list(np.shape(t))]
                    for name, t in tensors.items()],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
        for t in tensors.values():
            t = np.asarray(t)
            fh.write(np.ascontiguousarray(t, t.dtype.newbyteorder("<")).tobytes())


def load_model(path) -> SceneModel:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    version, size = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(data[12:12 + size])
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from None
    pos = 12 + size
    t = {}
    for name, dt, shape in meta["tensors"]:
        dtype = np.dtype("<" + dt)
        count = int(np.prod(shape)) if shape else 1
        end = pos + count * dtype.itemsize
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        t[name] = np.frombuffer(data, dtype, count, pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos = end
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")

    def net(prefix):
        if f"{prefix}.W1" not in t:
            return None
        tensors = [t[f"{prefix}.{k}"] for k in ("W1", "b1", "W2", "b2")]
        return Mlp2.from_tensors(tensors, dtype=tensors[0].dtype)

    variant, k, feat_dim = meta["variant"], meta["k"], meta["feat_dim"]
    gm = dict(meta["grid"])
    gm["bbox"] = tuple(tuple(c) for c in gm["bbox"])
    cfg = HashGridConfig(**gm)
    grid = HashGrid(cfg, [t[f"grid.table{i}"] for i in range(cfg.levels)],
                    t["grid.level_scale"], t["grid.bernoulli_logit"])
    hyper = variant == "predict_hyper"
    pe = net("penet")
    penet = PENet(cfg.out_dim + (HYPER_DIM if hyper else 0), feat_dim, k, dtype=pe.dtype, net=pe)
    heads = AttributeHeads(k, nets=[net(f"heads{i}") for i in range(3)])
    density = None
    if hyper:
        density = FactorizedDensity(HYPER_DIM, dtype=t["density.raw_step"].dtype)
        for name, v in density.params().items():
            v[...] = t[f"density.{name}"]
    try:
        return SceneModel(variant, t["x"], t["feat"], t["scale"], t["offsets"], t["mask_logits"], grid,
                          penet, heads, net("fpnet"), net("icenc"), density, z_hat=t.get("z_hat"),
                          seed=meta["seed"])
    except (ContractError, KeyError) as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint ({exc})") from None
