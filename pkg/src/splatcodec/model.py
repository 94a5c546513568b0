"""The trainable compressed scene and its forward pipeline.

Three variants share one code path:

* ``baseline``       anchors carry the 32-dim feature itself, coded under a
                     PE-Net conditioned on the grid condition only.
* ``predict``        anchors carry a 25-dim residual; the feature is predicted
                     by FP-Net from ``[f_c, f_r_hat]``.
* ``predict_hyper``  as ``predict`` plus the per-anchor hyperprior ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffmath import ContractError, Mlp2, philox
from .entropy import FactorizedDensity, gaussian_bits, round_half_away, uniform_noise
from .hashgrid import GridLookup, HashGrid, HashGridConfig
from .predictor import (FEATURE_DIM, HYPER_DIM, RESIDUAL_DIM, EntropyParams, PENet, encode_context,
                        estimate_params, make_fpnet, make_icencoder, offset_mask_apply, predict_feature)
from .scene import AttributeHeads, TargetAnchorSet

VARIANTS = ("baseline", "predict", "predict_hyper")
MASK_INIT = 2.0

# noise stream tags
_NOISE_Z, _NOISE_F, _NOISE_L, _NOISE_O = 1, 2, 3, 4


def f32(a):
    return np.asarray(a, np.float32).astype(np.float64)


class SceneModel:
    def __init__(self, variant: str, x, feat, scale, offsets, mask_logits, grid: HashGrid,
                 penet: PENet, heads: AttributeHeads, fpnet: Mlp2 | None = None,
                 icenc: Mlp2 | None = None, density: FactorizedDensity | None = None,
                 z_hat=None, seed: int = 0):
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}")
        self.variant = variant
        self.x = np.asarray(x, np.float64)
        self.feat, self.scale, self.offsets = feat, scale, offsets
        self.mask_logits = mask_logits
        self.grid, self.penet, self.heads = grid, penet, heads
        self.fpnet, self.icenc, self.density = fpnet, icenc, density
        self.z_hat = z_hat      # decoded hyperprior; set only on decoded models
        self.seed = seed
        self._lookup: GridLookup | None = None
        self._check()

    def _check(self):
        n = len(self.x)
        hyper = self.variant == "predict_hyper"
        if self.feat.shape != (n, self.feat_dim):
            raise ContractError(f"{self.variant} anchors carry {self.feat_dim}-dim features")
        if (self.fpnet is None) != (self.variant == "baseline"):
            raise ContractError("FP-Net presence does not match the variant")
        if (self.icenc is None or self.density is None) == hyper:
            raise ContractError("IC-Encoder/density presence does not match the variant")
        if self.penet.ctx_dim != FEATURE_DIM + (HYPER_DIM if hyper else 0) or self.penet.feat_dim != self.feat_dim:
            raise ContractError("PE-Net context does not match the variant")
        if self.offsets.shape != (n, self.k, 3) or self.mask_logits.shape != (n, self.k):
            raise ContractError("offset / mask shapes disagree")

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_targets(cls, targets: TargetAnchorSet, variant: str = "predict_hyper", seed: int = 0,
                     dtype=np.float32, grid_config: HashGridConfig | None = None) -> "SceneModel":
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}")
        n, k = targets.n, targets.k
        cfg = grid_config or HashGridConfig(bbox=targets.bbox)
        grid = HashGrid.create(cfg, seed=seed, dtype=dtype)
        hyper = variant == "predict_hyper"
        if variant == "baseline":
            feat = targets.f.astype(dtype)
        else:
            feat = np.zeros((n, RESIDUAL_DIM), dtype)
        fd = feat.shape[1]
        penet = PENet(cfg.out_dim + (HYPER_DIM if hyper else 0), fd, k, seed=13 + seed, dtype=dtype)
        fpnet = None if variant == "baseline" else make_fpnet(cfg.out_dim, seed=11 + seed, dtype=dtype)
        icenc = make_icencoder(seed=12 + seed, dtype=dtype) if hyper else None
        density = FactorizedDensity(HYPER_DIM, dtype=dtype) if hyper else None
        return cls(variant, f32(targets.x), feat, targets.l.astype(dtype), targets.o.astype(dtype),
                   np.full((n, k), MASK_INIT, dtype), grid, penet, AttributeHeads(k), fpnet, icenc,
                   density, seed=seed)

    # -- shape helpers --------------------------------------------------------

    @property
    def num_anchors(self) -> int:
        return len(self.x)

    @property
    def k(self) -> int:
        return self.penet.k

    @property
    def feat_dim(self) -> int:
        return FEATURE_DIM if self.variant == "baseline" else RESIDUAL_DIM

    @property
    def dtype(self):
        return self.grid.dtype

    @property
    def lookup(self) -> GridLookup:
        if self._lookup is None:
            self._lookup = self.grid.lookup(self.x)
        return self._lookup

    def networks(self) -> dict:
        out = {"penet": self.penet.net}
        if self.fpnet is not None:
            out["fpnet"] = self.fpnet
        if self.icenc is not None:
            out["icenc"] = self.icenc
        return out

    # -- parameters -----------------------------------------------------------

    def params(self) -> dict:
        out = {"feat": self.feat, "scale": self.scale, "offsets": self.offsets, "mask_logits": self.mask_logits}
        out.update(self.grid.params())
        for name, net in self.networks().items():
            out.update({f"{name}.{k}": v for k, v in net.params.items()})
        if self.density is not None:
            out.update({f"density.{k}": v for k, v in self.density.params().items()})
        return out

    def grads(self) -> dict:
        if getattr(self, "_attr_grads", None) is None:
            self._attr_grads = {k: np.zeros_like(v) for k, v in
                                (("feat", self.feat), ("scale", self.scale), ("offsets", self.offsets),
                                 ("mask_logits", self.mask_logits))}
        out = dict(self._attr_grads)
        out.update(self.grid.grads())
        for name, net in self.networks().items():
            out.update({f"{name}.{k}": v for k, v in net.grads.items()})
        if self.density is not None:
            out.update({f"density.{k}": v for k, v in self.density.grads.items()})
        return out

    def zero_grad(self) -> None:
        for g in self.grads().values():
            g.fill(0.0)

    def copy(self, dtype=None) -> "SceneModel":
        dtype = dtype or self.dtype
        m = SceneModel(
            self.variant, self.x.copy(), self.feat.astype(dtype), self.scale.astype(dtype),
            self.offsets.astype(dtype), self.mask_logits.astype(dtype), self.grid.copy(dtype),
            self.penet.copy(dtype), self.heads.copy(),
            None if self.fpnet is None else self.fpnet.astype(dtype),
            None if self.icenc is None else self.icenc.astype(dtype),
            None if self.density is None else self.density.copy(dtype),
            None if self.z_hat is None else self.z_hat.copy(), self.seed)
        return m

    def rounded(self) -> "SceneModel":
        """float64 copy whose stored-as-f32 state (grid, networks, density) is f32-exact."""
        m = self.copy(np.float64)
        for name, v in m.params().items():
            if name.split(".")[0] in ("grid", "penet", "fpnet", "icenc", "density"):
                v[...] = f32(v)
        for net in m.heads.nets:
            for v in net.params.values():
                v[...] = f32(v)
        m.x = f32(m.x)
        return m

    def clamp_(self) -> None:
        np.maximum(self.grid.level_scale, 1e-4, out=self.grid.level_scale)

    # -- forward --------------------------------------------------------------

    def forward(self, mode: str = "infer", iteration: int = 0) -> "ForwardState":
        return forward(self, mode, iteration)

    def rate_terms(self, mode: str = "infer", iteration: int = 0) -> dict:
        return self.forward(mode, iteration).bits

    def mask(self) -> np.ndarray:
        return offset_mask_apply(self.mask_logits)[0].astype(bool)


@dataclass
class ForwardState:
    mode: str
    fc: np.ndarray
    params: EntropyParams
    pcache: object
    fhat: np.ndarray
    lhat: np.ndarray
    ohat: np.ndarray           # (N, 3k) offset-major
    mask: np.ndarray           # (N, k) float
    fp: np.ndarray
    bits: dict
    grads: dict = field(default_factory=dict)   # per block (d_v, d_mu, d_sigma, d_q) of bits
    noise: dict = field(default_factory=dict)
    fpcache: object = None
    z: np.ndarray | None = None
    zhat: np.ndarray | None = None
    zcache: object = None
    zsaved: object = None
    mask_loss: float = 0.0
    offset_bits_raw: np.ndarray | None = None
    noise_z: np.ndarray | None = None


def hyper_context(model: SceneModel, mode: str, iteration: int):
    """``(z, z_hat, cache, noise)``; a decoded model reuses its stored ``z_hat``."""
    if model.z_hat is not None and mode == "infer":
        return None, model.z_hat.astype(model.dtype), None, None
    z, zcache = encode_context(model.icenc, model.feat)
    s = model.density.step.astype(model.dtype)
    if mode == "train":
        u = uniform_noise(philox(model.seed, iteration, _NOISE_Z), z.shape, model.dtype)
        return z, z + s * u, zcache, u
    return z, s * round_half_away(z / s), zcache, None


def entropy_params(model: SceneModel, fc: np.ndarray, zhat: np.ndarray | None):
    return estimate_params(model.penet, zhat, fc)


def forward(model: SceneModel, mode: str = "infer", iteration: int = 0) -> ForwardState:
    """Evaluate the whole pipeline; ``train`` uses seeded uniform noise, ``infer`` rounds."""
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown mode {mode!r}")
    dt = model.dtype
    n, k = model.num_anchors, model.k
    train = mode == "train"
    grad = train
    fc = model.grid.query(model.x, binarize=True, lookup=model.lookup)
    z = zhat = zcache = uz = zsaved = None
    bits = {}
    if model.variant == "predict_hyper":
        z, zhat, zcache, uz = hyper_context(model, mode, iteration)
        out = model.density.bits(zhat, grad=grad)
        bits["z"] = out[1]
        zsaved = out[2] if grad else None
    params, pcache = entropy_params(model, fc, zhat)

    values = {"feature": model.feat, "scale": model.scale, "offset": model.offsets.reshape(n, 3 * k)}
    tags = {"feature": _NOISE_F, "scale": _NOISE_L, "offset": _NOISE_O}
    hats, grads, noise = {}, {}, {}
    for name, v in values.items():
        mu, sigma, q = params.block(name)
        if train:
            u = uniform_noise(philox(model.seed, iteration, tags[name]), v.shape, dt)
            vhat = v + q * u
            noise[name] = u
        else:
            vhat = mu + q * round_half_away((v - mu) / q)
        res = gaussian_bits(vhat, mu, sigma, q, grad=grad)
        hats[name], bits[name] = vhat, res[1]
        if grad:
            grads[name] = res[2]

    mask, mask_loss = offset_mask_apply(model.mask_logits)
    raw_offset_bits = bits["offset"]
    bits["offset"] = raw_offset_bits * np.repeat(mask, 3, axis=1)
    bits = {key: bits[key] for key in ("feature", "scale", "offset", "z") if key in bits}

    if model.fpnet is None:
        fp, fpcache = hats["feature"], None
    else:
        fp, fpcache = predict_feature(model.fpnet, fc, hats["feature"])
    return ForwardState(mode, fc, params, pcache, hats["feature"], hats["scale"], hats["offset"], mask, fp,
                        bits, grads, noise, fpcache, z, zhat, zcache, zsaved, mask_loss,
                        raw_offset_bits, uz)


def distortion(state: ForwardState, targets: TargetAnchorSet) -> dict:
    """Proxy distortion: per-anchor squared errors of feature, scale and kept offsets."""
    n = len(state.fp)
    if n == 0:
        return {"feature": 0.0, "scale": 0.0, "offset": 0.0}
    k = state.mask.shape[1]
    o_rec = state.ohat.reshape(n, k, 3) * state.mask[:, :, None]
    return {
        "feature": float(np.sum((state.fp - targets.f) ** 2) / n),
        "scale": float(np.sum((state.lhat - targets.l) ** 2) / n),
        "offset": float(np.sum((o_rec - targets.o) ** 2) / n),
    }
