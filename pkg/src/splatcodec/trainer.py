"""Rate-distortion training of a :class:`SceneModel` and the variant ablation."""

from __future__ import annotations

import ctypes
import math
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .diffmath import AdamState, ContractError, adam_step
from .model import VARIANTS, ForwardState, SceneModel, distortion, forward
from .predictor import FEATURE_DIM, offset_mask_backward
from .scene import TargetAnchorSet, ToyCamera, derive_gaussian_arrays, psnr, render_image

ROW_LABELS = {"baseline": "Baseline", "predict": "W/ predict", "predict_hyper": "W/ predict & hyper"}
CSV_LABELS = {"baseline": "Baseline", "predict": "W_predict", "predict_hyper": "W_predict_hyper"}
# per-block learning-rate multipliers; scales live on a ~1e-2 scale
LR_SCALE = {"scale": 0.05}
# distortion controller: max |log D/D*| per update and lambda range around the configured value
CONTROL_STEP = 0.25
CONTROL_RANGE = 16.0


def tune_allocator() -> bool:
    """Keep freed multi-megabyte arrays in the heap instead of returning them to the OS.

    Training reallocates the same large temporaries every iteration; with glibc's
    defaults each one is a fresh mmap and costs page faults (about 10% of a
    training step at 2e4 anchors). Process-wide, so only entry points call it.
    Returns False where unsupported.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    return bool(libc.mallopt(m_mmap_threshold, 32 << 20) and libc.mallopt(m_trim_threshold, 1 << 30))


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    lambda_e: float = 0.004
    lambda_m: float = 5e-4
    iters: int = 500
    lr: float = 2e-3
    seed: int = 0
    variant: str = "predict_hyper"
    dtype: str = "float32"
    # matched-distortion training: steer lambda_e toward this distortion
    target_distortion: float | None = None
    control_every: int = 10
    control_gain: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.lambda_e >= 0 and math.isfinite(self.lambda_e)):
            raise ContractError("lambda_e must be a finite value >= 0")
        if not (self.lambda_m >= 0 and math.isfinite(self.lambda_m)):
            raise ContractError("lambda_m must be a finite value >= 0")
        if self.iters < 0:
            raise ContractError("iters must be >= 0")
        if not self.lr > 0:
            raise ContractError("lr must be > 0")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {', '.join(VARIANTS)}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError("dtype must be float32 or float64")

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        kinds = {f: type(getattr(cls(), f)) for f in cls.__dataclass_fields__}
        kinds["target_distortion"] = float
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in kinds:
                raise ContractError(f"config line {lineno}: unknown key {key!r}")
            try:
                values[key] = kinds[key](val)
            except ValueError:
                raise ContractError(f"config line {lineno}: bad value for {key}") from None
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class LossReport:
    distortion: float
    rate: float            # bits: attributes + hyperprior + grid
    mask_loss: float
    total: float
    parts: dict = field(default_factory=dict)


def rd_loss(model: SceneModel, targets: TargetAnchorSet, cfg: TrainConfig, mode: str = "train",
            iteration: int = 0, grad: bool = False) -> LossReport:
    """``D + lambda_e * R / N + lambda_m * L_m``; with ``grad`` also accumulates gradients."""
    if model.num_anchors != targets.n or model.k != targets.k:
        raise ContractError("model and targets disagree on anchor layout")
    if grad and mode != "train":
        raise ContractError("gradients are only defined for train mode")
    state = forward(model, mode, iteration)
    d = distortion(state, targets)
    bits = {k: float(v.sum()) for k, v in state.bits.items()}
    bits["grid"] = model.grid.rate()
    D = sum(d.values())
    R = sum(bits.values())
    n = max(model.num_anchors, 1)
    total = D + cfg.lambda_e * R / n + cfg.lambda_m * state.mask_loss
    if grad:
        backward(model, state, targets, cfg)
    return LossReport(D, R, state.mask_loss, total, {"distortion": d, "bits": bits})


def backward(model: SceneModel, state: ForwardState, targets: TargetAnchorSet, cfg: TrainConfig) -> None:
    n, k = model.num_anchors, model.k
    dt = model.dtype
    lam = cfg.lambda_e / n
    g = model.grads()

    # distortion
    d_fp = (2.0 / n) * (state.fp - targets.f.astype(dt))
    d_fc = np.zeros_like(state.fc)
    if model.fpnet is None:
        d_fhat = d_fp
    else:
        d_in = model.fpnet.backward(state.fpcache, d_fp)
        d_fc += d_in[:, :FEATURE_DIM]
        d_fhat = d_in[:, FEATURE_DIM:]
    d_lhat = (2.0 / n) * (state.lhat - targets.l.astype(dt))
    m3 = np.repeat(state.mask, 3, axis=1)
    err_o = state.ohat * m3 - targets.o.reshape(n, 3 * k).astype(dt)
    d_ohat = (2.0 / n) * err_o * m3
    d_m3 = (2.0 / n) * err_o * state.ohat + lam * state.offset_bits_raw

    # rate of the Gaussian-conditional blocks; v_hat = v + q * u
    p = state.params
    d_mu, d_sigma, d_q = np.zeros_like(p.mu), np.zeros_like(p.sigma), np.zeros_like(p.q)
    upstream = {"feature": d_fhat, "scale": d_lhat, "offset": d_ohat}
    weight = {"feature": lam, "scale": lam, "offset": lam * m3}
    d_values = {}
    for name, d_hat in upstream.items():
        dv, dmu, dsig, dq = state.grads[name]
        w = weight[name]
        d_v = d_hat + w * dv
        s = p.slice(p.feat_dim, name)
        d_mu[:, s] = w * dmu
        d_sigma[:, s] = w * dsig
        d_q[:, s] = w * dq + d_v * state.noise[name]
        d_values[name] = d_v
    d_ctx = model.penet.backward(state.pcache, d_mu, d_sigma, d_q)

    d_feat = d_values["feature"]
    if model.variant == "predict_hyper":
        zd = d_ctx.shape[1] - FEATURE_DIM
        d_fc += d_ctx[:, zd:]
        d_zhat = d_ctx[:, :zd] + model.density.bits_backward(
            state.zhat, state.zsaved, np.full(state.zhat.shape, lam, dt))
        # z_hat = z + s * u
        model.density.grads["raw_step"] += np.sum(d_zhat * state.noise_z, axis=0) * model.density.step
        d_feat = d_feat + model.icenc.backward(state.zcache, d_zhat)
    else:
        d_fc += d_ctx

    g["feat"] += d_feat
    g["scale"] += d_values["scale"]
    g["offsets"] += d_values["offset"].reshape(n, k, 3)
    d_mask = d_m3.reshape(n, k, 3).sum(axis=2)
    g["mask_logits"] += offset_mask_backward(model.mask_logits, d_mask, cfg.lambda_m)

    model.grid.query_backward(model.lookup, d_fc, binarize=True)
    model.grid.rate_backward(lam)


@dataclass
class TrainResult:
    model: SceneModel
    curve: list            # (iteration, D, R, total)
    lambda_e: float        # final rate weight (differs from the config under distortion control)


def train(model: SceneModel, targets: TargetAnchorSet, cfg: TrainConfig, log=None) -> TrainResult:
    """Adam over every trainable block; deterministic in (targets, cfg, model seed)."""
    if model.variant != cfg.variant:
        raise ContractError(f"model variant {model.variant} does not match config {cfg.variant}")
    params, grads = model.params(), model.grads()
    state = AdamState(lr=cfg.lr)
    run = replace(cfg)
    curve = []
    for it in range(cfg.iters):
        model.zero_grad()
        rep = rd_loss(model, targets, run, iteration=it, grad=True)
        if not math.isfinite(rep.total):
            raise DivergenceError(it)
        try:
            adam_step(params, grads, state, LR_SCALE)
        except FloatingPointError as exc:
            raise DivergenceError(it, str(exc)) from None
        model.clamp_()
        curve.append((it, rep.distortion, rep.rate, rep.total))
        if cfg.target_distortion and (it + 1) % cfg.control_every == 0:
            d_now = rd_loss(model, targets, run, mode="infer").distortion
            # too much distortion -> cheaper rate, i.e. smaller lambda; bounded steps
            step = min(max(math.log(d_now / cfg.target_distortion), -CONTROL_STEP), CONTROL_STEP)
            lam = run.lambda_e * math.exp(-cfg.control_gain * step)
            run.lambda_e = min(max(lam, cfg.lambda_e / CONTROL_RANGE), cfg.lambda_e * CONTROL_RANGE)
        if log is not None and (it % 100 == 0 or it == cfg.iters - 1):
            log(f"iter {it:5d}  D={rep.distortion:.6f}  R={rep.rate:.1f}  L={rep.total:.6f}  lambda_e={run.lambda_e:.6g}")
    return TrainResult(model, curve, run.lambda_e)


def render_pair(model: SceneModel, targets: TargetAnchorSet, state: ForwardState | None = None,
                width: int = 64, height: int = 64):
    """Renders with target features and with decoded features over the same decoded geometry."""
    st = state if state is not None else forward(model, "infer")
    cam = ToyCamera.for_bbox(targets.bbox, width, height)
    n, k = model.num_anchors, model.k
    o = np.asarray(st.ohat, np.float64).reshape(n, k, 3)
    l = np.asarray(st.lhat, np.float64)
    mask = np.asarray(st.mask, bool)
    ref = render_image(derive_gaussian_arrays(model.x, targets.f, l, o, mask, model.heads, cam), cam)
    dec = render_image(derive_gaussian_arrays(model.x, st.fp, l, o, mask, model.heads, cam), cam)
    return ref, dec


@dataclass
class Evaluation:
    distortion: float
    parts: dict
    bits: dict
    psnr: float | None

    @property
    def total_bits(self) -> float:
        return float(sum(self.bits.values()))


def evaluate(model: SceneModel, targets: TargetAnchorSet, render: bool = True) -> Evaluation:
    st = forward(model, "infer")
    d = distortion(st, targets)
    bits = {k: float(v.sum()) for k, v in st.bits.items()}
    bits["grid"] = model.grid.rate()
    score = None
    if render:
        ref, dec = render_pair(model, targets, st)
        score = psnr(ref, dec)
    return Evaluation(sum(d.values()), d, bits, score)


@dataclass
class AblationRow:
    variant: str
    label: str
    distortion: float
    feature_distortion: float
    psnr: float | None
    total_bits: float
    bits: dict             # feature (f or f_r), scale, offset, z, grid
    coded_bytes: int
    feature_bytes: int
    lambda_e: float

    def share(self, key: str) -> float:
        return self.bits.get(key, 0.0) / self.total_bits if self.total_bits else 0.0


def ablate(targets: TargetAnchorSet, cfg: TrainConfig, match_distortion: bool = True,
           render: bool = True, log=None) -> list[AblationRow]:
    """Train the three variants with a shared seed and budget.

    The baseline trains at ``cfg.lambda_e``; with ``match_distortion`` the two
    predictive variants steer their rate weight toward the baseline's final
    distortion so the rows compare sizes at equal quality.
    """
    from .codec import encode_scene, stream_stats

    rows = []
    target = None
    for variant in VARIANTS:
        vcfg = replace(cfg, variant=variant, target_distortion=target if match_distortion else None)
        model = SceneModel.from_targets(targets, variant, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
        if log:
            log(f"-- {ROW_LABELS[variant]}")
        result = train(model, targets, vcfg, log=log)
        ev = evaluate(model, targets, render=render)
        if variant == "baseline":
            target = ev.distortion
        stream = encode_scene(model)
        st = stream_stats(stream)
        rows.append(AblationRow(variant, ROW_LABELS[variant], ev.distortion, ev.parts["feature"], ev.psnr,
                                ev.total_bits, ev.bits, len(stream), st.sections["features"],
                                result.lambda_e))
    return rows


def format_rows(rows: list[AblationRow], fmt: str = "text") -> str:
    keys = ("feature", "scale", "offset", "z", "grid")
    if fmt == "csv":
        head = "variant,distortion,feature_distortion,psnr,total_bits," + ",".join(f"{k}_bits" for k in keys) \
            + ",coded_bytes,feature_bytes,lambda_e"
        lines = [head]
        for r in rows:
            lines.append(",".join([CSV_LABELS[r.variant],
                                   f"{r.distortion:.6g}", f"{r.feature_distortion:.6g}",
                                   "" if r.psnr is None else f"{r.psnr:.3f}", f"{r.total_bits:.1f}"]
                                  + [f"{r.bits.get(k, 0.0):.1f}" for k in keys]
                                  + [str(r.coded_bytes), str(r.feature_bytes), f"{r.lambda_e:.6g}"]))
        return "\n".join(lines)
    lines = [f"{'variant':<20} {'D':>9} {'PSNR':>7} {'feature bytes':>14} {'share':>7} {'coded bytes':>12}"]
    for r in rows:
        ps = "-" if r.psnr is None else f"{r.psnr:.2f}"
        lines.append(f"{r.label:<20} {r.distortion:9.5f} {ps:>7} {r.feature_bytes:14d} "
                     f"{100 * r.feature_bytes / max(r.coded_bytes, 1):6.2f}% {r.coded_bytes:12d}")
    return "\n".join(lines)
