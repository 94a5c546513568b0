"""Anchor scenes: ingestion, synthetic targets, neural Gaussians and a toy renderer."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffmath import ContractError, Mlp2, philox, sigmoid
from .predictor import FEATURE_DIM, NUM_OFFSETS


class PlyError(ValueError):
    pass


class PlyHeaderError(PlyError):
    pass


class MissingPropertyError(PlyError):
    pass


class CountMismatchError(PlyError):
    pass


DEFAULT_BBOX = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@dataclass
class TargetAnchorSet:
    x: np.ndarray          # (N, 3)
    f: np.ndarray          # (N, D)
    l: np.ndarray          # (N, 3)
    o: np.ndarray          # (N, k, 3)

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.f) == len(self.l) == len(self.o) == n):
            raise ContractError("anchor attribute counts disagree")
        for name in ("x", "f", "l", "o"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"non-finite values in '{name}'")

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def k(self) -> int:
        return self.o.shape[1]

    @property
    def bbox(self):
        if self.n == 0:
            return DEFAULT_BBOX
        lo, hi = self.x.min(axis=0), self.x.max(axis=0)
        pad = np.maximum(1e-3 * (hi - lo), 1e-6)
        return tuple((lo - pad).tolist()), tuple((hi + pad).tolist())

    def subset(self, idx) -> "TargetAnchorSet":
        return TargetAnchorSet(self.x[idx], self.f[idx], self.l[idx], self.o[idx])


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FORMATS = {"ascii": None, "binary_little_endian": "<", "binary_big_endian": ">"}


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise PlyHeaderError("file does not start with 'ply'")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyHeaderError("missing end_header")
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in _FORMATS:
                raise PlyHeaderError(f"unsupported format line: {raw!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyHeaderError(f"malformed element line: {raw!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyHeaderError("property before any element")
            if parts[1] == "list":
                raise PlyHeaderError("list properties are not supported")
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise PlyHeaderError(f"malformed property line: {raw!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyHeaderError(f"unexpected header line: {raw!r}")
    if fmt is None:
        raise PlyHeaderError("missing format line")
    return fmt, elements


def _offset_count(names) -> int:
    idx = [int(m.group(1)) for m in (re.fullmatch(r"o_(\d+)", n) for n in names) if m]
    count = max(idx) + 1 if idx else 0
    if count % 3:
        raise MissingPropertyError(f"offset properties must come in triples, found {count}")
    return count // 3


def load_targets(path) -> TargetAnchorSet:
    """Read a ``vertex`` element with x,y,z, f_0..f_31, l_0..l_2, o_0..o_{3k-1}."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    byteorder = _FORMATS[fmt]
    data = None
    skip = 0
    for name, count, props in elements:
        if byteorder is None:
            if name != "vertex":
                raise PlyHeaderError("ascii files must hold the vertex element first")
            lines = body.decode("ascii").split("\n")
            rows = [ln.split() for ln in lines if ln.strip()]
            if len(rows) < count:
                raise CountMismatchError(f"header declares {count} vertices, file has {len(rows)}")
            if any(len(r) != len(props) for r in rows[:count]):
                raise CountMismatchError("vertex row width does not match the property list")
            arr = np.array(rows[:count], dtype=np.float64).reshape(count, len(props))
            data = {p: arr[:, i] for i, (p, _) in enumerate(props)}
            break
        dtype = np.dtype([(p, byteorder + t) for p, t in props])
        if name == "vertex":
            need = dtype.itemsize * count
            if len(body) - skip < need:
                raise CountMismatchError(f"header declares {count} vertices, payload holds "
                                         f"{(len(body) - skip) // max(dtype.itemsize, 1)}")
            rec = np.frombuffer(body, dtype=dtype, count=count, offset=skip)
            data = {p: rec[p].astype(np.float64) for p, _ in props}
            break
        skip += dtype.itemsize * count
    if data is None:
        raise MissingPropertyError("no 'vertex' element")
    names = list(data)
    k = _offset_count(names)
    required = ["x", "y", "z"] + [f"f_{i}" for i in range(FEATURE_DIM)] + [f"l_{i}" for i in range(3)] \
        + [f"o_{i}" for i in range(3 * k)]
    for r in required:
        if r not in data:
            raise MissingPropertyError(f"missing property '{r}'")
    n = len(data["x"])
    col = lambda keys: np.stack([data[c] for c in keys], axis=1) if keys else np.zeros((n, 0))
    return TargetAnchorSet(
        col(["x", "y", "z"]),
        col([f"f_{i}" for i in range(FEATURE_DIM)]),
        col([f"l_{i}" for i in range(3)]),
        col([f"o_{i}" for i in range(3 * k)]).reshape(n, k, 3),
    )


def save_targets(targets: TargetAnchorSet, path, binary: bool = True, ply_type: str = "double") -> None:
    names = ["x", "y", "z"] + [f"f_{i}" for i in range(targets.f.shape[1])] \
        + [f"l_{i}" for i in range(3)] + [f"o_{i}" for i in range(3 * targets.k)]
    cols = np.concatenate([targets.x, targets.f, targets.l, targets.o.reshape(targets.n, -1)], axis=1)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {targets.n}"] + [f"property {ply_type} {n}" for n in names] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype="<" + _PLY_TYPES[ply_type]).tobytes())
        else:
            buf = io.StringIO()
            np.savetxt(buf, cols, fmt="%.17g")
            fh.write(buf.getvalue().encode("ascii"))


# ---------------------------------------------------------------- synthetic scenes

@dataclass
class SynthSpec:
    n: int = 5000
    k: int = NUM_OFFSETS
    seed: int = 0
    field: str = "smooth"
    noise: float = 0.1
    freqs: tuple = (0.5, 1.0, 2.0)
    feature_gain: float = 0.55

    @classmethod
    def parse(cls, text: str) -> "SynthSpec":
        """``n=5000,seed=1,field=noisy`` style overrides."""
        spec = cls()
        for item in filter(None, (s.strip() for s in text.split(","))):
            if "=" not in item:
                raise ValueError(f"bad synth item {item!r}")
            key, val = (s.strip() for s in item.split("=", 1))
            if key in ("n", "k", "seed"):
                setattr(spec, key, int(val))
            elif key in ("noise", "feature_gain"):
                setattr(spec, key, float(val))
            elif key == "field":
                if val not in ("smooth", "noisy"):
                    raise ValueError(f"field must be smooth or noisy, got {val!r}")
                spec.field = val
            else:
                raise ValueError(f"unknown synth key {key!r}")
        if spec.n < 0 or spec.k < 1:
            raise ValueError("synth needs n >= 0 and k >= 1")
        return spec


def positional_encoding(x: np.ndarray, freqs) -> np.ndarray:
    ang = x[:, :, None] * (np.pi * np.asarray(freqs))[None, None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(x), -1)


def feature_map(spec: SynthSpec) -> np.ndarray:
    """Fixed linear map from the positional encoding to features (seed-independent)."""
    width = 3 * 2 * len(spec.freqs)
    rng = philox(0x5EED, 1)
    decay = np.tile(1.0 / np.asarray(spec.freqs) ** 2, 6)
    return spec.feature_gain * rng.normal(0.0, 1.0, (FEATURE_DIM, width)) * decay * np.sqrt(2.0 / width)


def synth_targets(spec: SynthSpec) -> TargetAnchorSet:
    rng = philox(spec.seed, 0x7A)
    n, k = spec.n, spec.k
    x = rng.random((n, 3))
    f = positional_encoding(x, spec.freqs) @ feature_map(spec).T
    if spec.field == "noisy":
        f = f + rng.normal(0.0, spec.noise, f.shape)
    l = 0.02 * np.exp(0.4 * np.sin(np.pi * x @ np.array([[1.0, 0.5, 0.2], [0.3, 1.0, 0.4], [0.2, 0.6, 1.0]])))
    o = rng.normal(0.0, 0.6, (n, k, 3))
    tiny = rng.random((n, k)) < 0.3
    o[tiny] *= 0.05
    return TargetAnchorSet(x, f, l, o)


# ---------------------------------------------------------------- neural Gaussians

@dataclass
class NeuralGaussian:
    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray     # unit quaternion (w, x, y, z)
    opacity: float
    color: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        R = quat_to_rot(self.rotation)
        S = np.diag(self.scale)
        return R @ S @ S.T @ R.T


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


@dataclass
class ToyCamera:
    width: int = 64
    height: int = 64
    window: tuple = (0.0, 1.0, 0.0, 1.0)   # xmin, xmax, ymin, ymax
    position: tuple = (0.5, 0.5, 2.0)

    def __post_init__(self):
        x0, x1, y0, y1 = self.window
        if not (x1 > x0 and y1 > y0) or self.width < 1 or self.height < 1:
            raise ContractError("camera window must have positive area")

    @classmethod
    def for_bbox(cls, bbox, width=64, height=64, distance=1.0) -> "ToyCamera":
        lo, hi = np.asarray(bbox[0]), np.asarray(bbox[1])
        c = 0.5 * (lo + hi)
        return cls(width, height, (lo[0], hi[0], lo[1], hi[1]), (c[0], c[1], hi[2] + distance))

    def pixel_centers(self):
        x0, x1, y0, y1 = self.window
        px = x0 + (np.arange(self.width) + 0.5) * (x1 - x0) / self.width
        py = y1 - (np.arange(self.height) + 0.5) * (y1 - y0) / self.height
        return px, py


class AttributeHeads:
    """Frozen decoders from ``[f_p, view distance, view direction]`` to Gaussian attributes."""

    HIDDEN = 32

    def __init__(self, k: int = NUM_OFFSETS, feat_dim: int = FEATURE_DIM, seed: int = 21,
                 nets: list | None = None, scale_bias: float = np.log(0.01)):
        self.k = k
        in_dim = feat_dim + 4
        if nets is None:
            nets = [Mlp2(in_dim, self.HIDDEN, k, seed=seed),
                    Mlp2(in_dim, self.HIDDEN, 3 * k, seed=seed + 1),
                    Mlp2(in_dim, self.HIDDEN, 7 * k, seed=seed + 2)]
            cov_bias = nets[2].params["b2"].reshape(k, 7)
            cov_bias[:, :3] += scale_bias
            cov_bias[:, 3] += 2.0
        self.opacity, self.color, self.cov = nets

    @property
    def nets(self) -> list:
        return [self.opacity, self.color, self.cov]

    def copy(self) -> "AttributeHeads":
        return AttributeHeads(self.k, nets=[n.copy() for n in self.nets])

    def __call__(self, fp: np.ndarray, x: np.ndarray, cam_pos) -> dict:
        n, k = len(fp), self.k
        rel = x - np.asarray(cam_pos, np.float64)
        dist = np.linalg.norm(rel, axis=1, keepdims=True)
        safe = dist[:, 0] > 0
        direction = np.tile([0.0, 0.0, -1.0], (n, 1))
        direction[safe] = rel[safe] / dist[safe]
        inp = np.concatenate([fp, dist, direction], axis=1)
        alpha = sigmoid(self.opacity(inp))
        color = sigmoid(self.color(inp)).reshape(n, k, 3)
        cov = self.cov(inp).reshape(n, k, 7)
        scale = np.clip(np.exp(np.minimum(cov[..., :3], 0.0)), 1e-4, 1.0)
        rot = cov[..., 3:]
        norm = np.linalg.norm(rot, axis=-1, keepdims=True)
        rot = np.where(norm > 0, rot / np.where(norm > 0, norm, 1.0), np.array([1.0, 0, 0, 0]))
        return {"alpha": alpha, "color": color, "scale": scale, "rotation": rot}


def derive_gaussian_arrays(x, fp, l, o, mask, heads: AttributeHeads, camera: ToyCamera) -> dict:
    """All neural Gaussians of a scene as flat arrays (masked offsets dropped)."""
    x, l, o = np.asarray(x, float), np.asarray(l, float), np.asarray(o, float)
    attrs = heads(np.asarray(fp, float), x, camera.position)
    mu = x[:, None, :] + o * l[:, None, :]
    keep = np.asarray(mask, bool)
    return {
        "mu": mu[keep],
        "scale": attrs["scale"][keep],
        "rotation": attrs["rotation"][keep],
        "alpha": attrs["alpha"][keep],
        "color": attrs["color"][keep],
    }


def derive_gaussians(x, fp, l, o, mask, heads: AttributeHeads, camera: ToyCamera) -> list[NeuralGaussian]:
    """Neural Gaussians spawned by one anchor: ``mu_i = x + o_i * l``."""
    g = derive_gaussian_arrays(np.asarray(x, float)[None], np.asarray(fp, float)[None],
                               np.asarray(l, float)[None], np.asarray(o, float)[None],
                               np.asarray(mask, bool)[None], heads, camera)
    return [NeuralGaussian(g["mu"][i], g["scale"][i], g["rotation"][i], float(g["alpha"][i]), g["color"][i])
            for i in range(len(g["mu"]))]


def eval_gaussian(g: NeuralGaussian, x) -> float:
    d = np.asarray(x, float) - g.mu
    try:
        L = np.linalg.cholesky(g.covariance)
    except np.linalg.LinAlgError as exc:
        raise ContractError("covariance is not positive definite") from exc
    y = np.linalg.solve(L, d)
    return float(np.exp(-0.5 * y @ y))


def render_image(gaussians, camera: ToyCamera) -> np.ndarray:
    """Front-to-back alpha compositing of orthographically projected Gaussians.

    ``gaussians`` is a list of :class:`NeuralGaussian` or the dict returned by
    :func:`derive_gaussian_arrays`.  Output is ``(height, width, 3)`` in [0, 1].
    """
    if isinstance(gaussians, dict):
        mu, scale, rot = gaussians["mu"], gaussians["scale"], gaussians["rotation"]
        alpha, color = gaussians["alpha"], gaussians["color"]
    else:
        mu = np.array([g.mu for g in gaussians]).reshape(-1, 3)
        scale = np.array([g.scale for g in gaussians]).reshape(-1, 3)
        rot = np.array([g.rotation for g in gaussians]).reshape(-1, 4)
        alpha = np.array([g.opacity for g in gaussians], float)
        color = np.array([g.color for g in gaussians]).reshape(-1, 3)
    W, H = camera.width, camera.height
    image = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    if len(mu) == 0:
        return image
    R = quat_to_rot(rot)
    M = R * scale[:, None, :]
    cov2 = np.einsum("gij,gkj->gik", M, M)[:, :2, :2]
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    px, py = camera.pixel_centers()
    x0, x1, y0, y1 = camera.window
    sx, sy = (x1 - x0) / W, (y1 - y0) / H
    order = np.argsort(-mu[:, 2], kind="stable")
    for g in order:
        if det[g] <= 0:
            continue
        a, b, c = cov2[g, 0, 0], cov2[g, 0, 1], cov2[g, 1, 1]
        rx, ry = 3.0 * np.sqrt(a), 3.0 * np.sqrt(c)
        i0 = max(int(np.floor((mu[g, 0] - rx - x0) / sx)), 0)
        i1 = min(int(np.ceil((mu[g, 0] + rx - x0) / sx)), W)
        j0 = max(int(np.floor((y1 - mu[g, 1] - ry) / sy)), 0)
        j1 = min(int(np.ceil((y1 - mu[g, 1] + ry) / sy)), H)
        if i0 >= i1 or j0 >= j1:
            continue
        dx = px[i0:i1][None, :] - mu[g, 0]
        dy = py[j0:j1][:, None] - mu[g, 1]
        maha = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det[g]
        w = np.where(maha <= 9.0, alpha[g] * np.exp(-0.5 * maha), 0.0)
        t = trans[j0:j1, i0:i1]
        image[j0:j1, i0:i1] += (t * w)[..., None] * color[g]
        trans[j0:j1, i0:i1] = t * (1.0 - w)
    return image


PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    pix = np.frombuffer(data, np.uint8, count=w * h * 3, offset=m.end()).reshape(h, w, 3)
    return pix / 255.0
