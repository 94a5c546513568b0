"""Sectioned scene container and the encode/decode pipeline.

Layout: a fixed header, a table of section lengths, then the sections in the
order of :data:`SECTIONS`.  The decoder follows the same order: locations,
networks and grid first, then the hyperprior model and ``z_hat``, and only
then the anchor payloads, whose entropy parameters need ``z_hat`` and the
grid condition.  Integers are little-endian.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..diffmath import ContractError, Mlp2, pack_tensor, sigmoid, unpack_tensor
from ..entropy import FactorizedDensity, round_half_away
from ..hashgrid import P_CLAMP, HashGrid, HashGridConfig
from ..model import VARIANTS, SceneModel, entropy_params, f32
from ..predictor import FEATURE_DIM, HYPER_DIM, PENet, predict_feature
from ..scene import AttributeHeads
from .tables import (TableError, bernoulli_table, decode_gaussian, encode_gaussian,
                     factorized_table)
from .rangecoder import decode_symbols, encode_symbols

MAGIC = b"AZ3D"
VERSION = 1
SECTIONS = ("locations", "fpnet", "icenc", "penet", "heads", "grid", "zmodel", "zpayload",
            "masks", "features", "scales", "offsets")
_HEAD = struct.Struct("<4sHBBIHHBBBBHH6dQIH")
HEADER_SIZE = _HEAD.size + 4 * len(SECTIONS)
PAYLOAD_SECTIONS = ("zpayload", "features", "scales", "offsets")
_CODED_HEAD = struct.Struct("<I")       # crc32 of the symbols
_DECODED_THETA = 0.5                    # magnitude given to decoded raw grid entries


class StreamError(ValueError):
    section = "header"


class BadMagicError(StreamError):
    pass


class UnsupportedVersionError(StreamError):
    pass


class TruncatedStreamError(StreamError):
    def __init__(self, section: str, detail: str = ""):
        super().__init__(f"stream truncated in section '{section}'" + (f": {detail}" if detail else ""))
        self.section = section


class CorruptStreamError(StreamError):
    def __init__(self, section: str, detail: str = ""):
        super().__init__(f"corrupt section '{section}'" + (f": {detail}" if detail else ""))
        self.section = section


class EncodeError(ContractError):
    pass


@dataclass
class Header:
    variant: str
    n: int
    k: int
    feat_dim: int
    grid: HashGridConfig
    seed: int
    chunk_size: int = 0
    lengths: dict = field(default_factory=dict)

    def pack(self) -> bytes:
        g = self.grid
        (lo, hi) = g.bbox
        head = _HEAD.pack(MAGIC, VERSION, VARIANTS.index(self.variant), 0, self.n, self.k, self.feat_dim,
                          g.levels, g.table_size_log2, g.feat_per_level, 0, g.base_resolution,
                          g.max_resolution, *map(float, lo), *map(float, hi), self.seed, self.chunk_size,
                          len(SECTIONS))
        return head + struct.pack(f"<{len(SECTIONS)}I", *(self.lengths.get(s, 0) for s in SECTIONS))

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < 6:
            raise TruncatedStreamError("header")
        if data[:4] != MAGIC:
            raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
        version = struct.unpack_from("<H", data, 4)[0]
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported stream version {version}")
        if len(data) < HEADER_SIZE:
            raise TruncatedStreamError("header")
        (_, _, variant, _, n, k, feat_dim, levels, tlog2, fpl, _, base, top,
         *rest) = _HEAD.unpack_from(data, 0)
        bbox, (seed, chunk, nsec) = rest[:6], rest[6:]
        if variant >= len(VARIANTS) or nsec != len(SECTIONS):
            raise CorruptStreamError("header", "unknown variant or section table")
        try:
            grid = HashGridConfig(levels, tlog2, fpl, base, top, (tuple(bbox[:3]), tuple(bbox[3:])))
        except (ContractError, ValueError) as exc:
            raise CorruptStreamError("header", str(exc)) from None
        lengths = dict(zip(SECTIONS, struct.unpack_from(f"<{nsec}I", data, _HEAD.size)))
        return cls(VARIANTS[variant], n, k, feat_dim, grid, seed, chunk, lengths)


@dataclass
class ParsedStream:
    header: Header
    sections: dict

    @property
    def total_bytes(self) -> int:
        return HEADER_SIZE + sum(self.header.lengths.values())


def parse_stream(data: bytes) -> ParsedStream:
    """Split a stream into its sections, checking framing only."""
    data = bytes(data)
    header = Header.unpack(data)
    pos = HEADER_SIZE
    sections = {}
    for name in SECTIONS:
        end = pos + header.lengths[name]
        if end > len(data):
            raise TruncatedStreamError(name, f"needs {end} bytes, have {len(data)}")
        sections[name] = data[pos:end]
        pos = end
    if pos != len(data):
        raise CorruptStreamError("header", f"{len(data) - pos} bytes beyond the declared sections")
    return ParsedStream(header, sections)


# ----------------------------------------------------------------- helpers

def _pack_nets(nets) -> bytes:
    return b"".join(pack_tensor(t) for net in nets for t in net.tensors())


def _unpack_nets(buf: bytes, count: int, section: str) -> list[Mlp2]:
    pos, nets = 0, []
    try:
        for _ in range(count):
            tensors = []
            for _ in range(4):
                t, pos = unpack_tensor(buf, pos)
                tensors.append(t)
            nets.append(Mlp2.from_tensors(tensors))
    except EOFError as exc:
        raise TruncatedStreamError(section, str(exc)) from None
    except ContractError as exc:
        raise CorruptStreamError(section, str(exc)) from None
    if pos != len(buf):
        raise CorruptStreamError(section, "trailing bytes")
    return nets


def _crc(symbols: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(symbols, "<i4").tobytes())


def _bernoulli_p(logit) -> float:
    return float(np.clip(sigmoid(np.float64(logit)), P_CLAMP, 1.0 - P_CLAMP))


def _coded_section(stream: bytes, symbols: np.ndarray) -> bytes:
    return _CODED_HEAD.pack(_crc(symbols)) + stream


def _read_coded(buf: bytes, section: str):
    if len(buf) < _CODED_HEAD.size:
        raise TruncatedStreamError(section, "missing payload header")
    return _CODED_HEAD.unpack_from(buf, 0)[0], buf[_CODED_HEAD.size:]


# ----------------------------------------------------------------- encoder

@dataclass
class EncodedScene:
    """Encoder-side view: the values the decoder will reconstruct, plus coding stats."""
    stream: bytes
    fc: np.ndarray
    z_hat: np.ndarray | None
    values: dict           # feature, scale, offset (N, 3k) reconstructed values
    symbols: dict
    mask: np.ndarray
    fp: np.ndarray
    clamped: dict
    estimated_bits: dict


def _check_finite(model: SceneModel):
    for name, v in model.params().items():
        if not np.all(np.isfinite(v)):
            raise EncodeError(f"refusing to encode non-finite parameter block '{name}'")
    for net in model.heads.nets:
        for v in net.params.values():
            if not np.all(np.isfinite(v)):
                raise EncodeError("refusing to encode non-finite attribute head")
    if not np.all(np.isfinite(model.x)):
        raise EncodeError("refusing to encode non-finite anchor location")


def _hyper_symbols(model: SceneModel) -> tuple[np.ndarray, np.ndarray]:
    s = model.density.step
    if model.z_hat is not None:
        zsym = round_half_away(model.z_hat / s)
    else:
        zsym = round_half_away(model.icenc(model.feat) / s)
    return zsym.astype(np.int64), s * zsym


def encode_scene_full(model: SceneModel) -> EncodedScene:
    _check_finite(model)
    m = model.rounded()
    n, k = m.num_anchors, m.k
    hyper = m.variant == "predict_hyper"
    header = Header(m.variant, n, k, m.feat_dim, m.grid.config, int(m.seed) & 0xFFFFFFFFFFFFFFFF)
    sec = {name: b"" for name in SECTIONS}

    sec["locations"] = np.ascontiguousarray(m.x, "<f4").tobytes()
    if m.fpnet is not None:
        sec["fpnet"] = _pack_nets([m.fpnet])
    if m.icenc is not None:
        sec["icenc"] = _pack_nets([m.icenc])
    sec["penet"] = _pack_nets([m.penet.net])
    sec["heads"] = _pack_nets(m.heads.nets)

    grid_parts = []
    for lvl in range(m.grid.config.levels):
        delta, logit = m.grid.level_scale[lvl], m.grid.bernoulli_logit[lvl]
        table = bernoulli_table(_bernoulli_p(logit))
        bits = (m.grid.tables[lvl] >= 0.0).astype(np.int64).ravel()
        coded = encode_symbols([table], np.zeros(bits.size, np.int64), bits)
        grid_parts.append(struct.pack("<ffI", delta, logit, len(coded)) + coded)
    sec["grid"] = b"".join(grid_parts)

    fc = m.grid.query(m.x, lookup=m.grid.lookup(m.x))
    zhat = None
    estimated = {}
    if hyper:
        sec["zmodel"] = b"".join(pack_tensor(t) for t in m.density.tensors())
        zsym, zhat = _hyper_symbols(m)
        tables = [factorized_table(m.density, c) for c in range(HYPER_DIM)]
        zsym = np.stack([np.clip(zsym[:, c], t.offset, t.offset + t.num_symbols - 1)
                         for c, t in enumerate(tables)], axis=1)
        zhat = m.density.step * zsym
        tidx = np.tile(np.arange(HYPER_DIM), n)
        sec["zpayload"] = encode_symbols(tables, tidx, zsym.ravel())
        estimated["z"] = float(m.density.bits(zhat)[1].sum())

    params, _ = entropy_params(m, fc, zhat)
    mask = m.mask_logits >= 0.0
    kept = np.repeat(mask, 3, axis=1)
    p_one = float(mask.mean()) if mask.size else 0.5
    mtable = bernoulli_table(p_one)
    c1 = int(mtable.cdf[2] - mtable.cdf[1])
    sec["masks"] = struct.pack("<I", c1) + encode_symbols([mtable], np.zeros(mask.size, np.int64),
                                                          mask.astype(np.int64).ravel())

    raw = {"feature": m.feat, "scale": m.scale, "offset": m.offsets.reshape(n, 3 * k)}
    names = {"feature": "features", "scale": "scales", "offset": "offsets"}
    values, symbols, clamped = {}, {}, {}
    from ..entropy import gaussian_bits
    for name, v in raw.items():
        mu, sigma, q = params.block(name)
        sym = round_half_away((v - mu) / q).astype(np.int64)
        sel = kept if name == "offset" else np.ones(sym.shape, bool)
        try:
            stream, coded, nclamp = encode_gaussian(sigma[sel], q[sel], sym[sel])
        except TableError as exc:
            raise EncodeError(f"{names[name]}: {exc}") from None
        full = np.zeros_like(sym)
        full[sel] = coded
        val = np.where(sel, mu + q * full, 0.0)
        values[name], symbols[name], clamped[name] = val, full, nclamp
        sec[names[name]] = _coded_section(stream, coded)
        estimated[name] = float(np.sum(gaussian_bits(val, mu, sigma, q)[1][sel]))

    fp = values["feature"] if m.fpnet is None else predict_feature(m.fpnet, fc, values["feature"])[0]
    header.lengths = {name: len(b) for name, b in sec.items()}
    stream = header.pack() + b"".join(sec[name] for name in SECTIONS)
    return EncodedScene(stream, fc, zhat, values, symbols, mask, fp, clamped, estimated)


def encode_scene(model: SceneModel) -> bytes:
    return encode_scene_full(model).stream


# ----------------------------------------------------------------- decoder

@dataclass
class SceneStructure:
    """Everything decodable without the hyperprior or anchor payloads."""
    header: Header
    x: np.ndarray
    grid: HashGrid
    fpnet: Mlp2 | None
    icenc: Mlp2 | None
    penet: PENet
    heads: AttributeHeads
    density: FactorizedDensity | None


def decode_structure(parsed: ParsedStream) -> SceneStructure:
    h, sec = parsed.header, parsed.sections
    hyper = h.variant == "predict_hyper"
    n, k = h.n, h.k
    if len(sec["locations"]) != 12 * n:
        raise CorruptStreamError("locations", "size does not match the anchor count")
    x = np.frombuffer(sec["locations"], "<f4").reshape(n, 3).astype(np.float64)

    def nets(name, count, present):
        if not present:
            if sec[name]:
                raise CorruptStreamError(name, "unexpected section for this variant")
            return [None] * count
        return _unpack_nets(sec[name], count, name)

    fpnet = nets("fpnet", 1, h.variant != "baseline")[0]
    icenc = nets("icenc", 1, hyper)[0]
    pe = nets("penet", 1, True)[0]
    heads = AttributeHeads(k, nets=nets("heads", 3, True))
    ctx = FEATURE_DIM + (HYPER_DIM if hyper else 0)
    try:
        penet = PENet(ctx, h.feat_dim, k, net=pe)
        if fpnet is not None and fpnet.in_dim != FEATURE_DIM + h.feat_dim:
            raise ContractError("FP-Net input does not match the residual width")
    except ContractError as exc:
        raise CorruptStreamError("penet" if "PE-Net" in str(exc) else "fpnet", str(exc)) from None

    cfg = h.grid
    buf, pos = sec["grid"], 0
    tables, deltas, logits = [], [], []
    for lvl in range(cfg.levels):
        if pos + 12 > len(buf):
            raise TruncatedStreamError("grid", f"level {lvl}")
        delta, logit, size = struct.unpack_from("<ffI", buf, pos)
        pos += 12
        if pos + size > len(buf):
            raise TruncatedStreamError("grid", f"level {lvl}")
        if not (np.isfinite(delta) and delta > 0 and np.isfinite(logit)):
            raise CorruptStreamError("grid", f"level {lvl} scale")
        count = cfg.table_size * cfg.feat_per_level
        bits, over = decode_symbols(buf[pos:pos + size], [bernoulli_table(_bernoulli_p(logit))],
                                    np.zeros(count, np.int64))
        pos += size
        tables.append(np.where(bits == 1, _DECODED_THETA, -_DECODED_THETA).reshape(cfg.table_size, -1))
        deltas.append(delta)
        logits.append(logit)
    if pos != len(buf):
        raise CorruptStreamError("grid", "trailing bytes")
    grid = HashGrid(cfg, tables, np.array(deltas, np.float64), np.array(logits, np.float64))

    density = None
    if hyper:
        density = FactorizedDensity(HYPER_DIM)
        pos = 0
        try:
            for name in density.param_order():
                t, pos = unpack_tensor(sec["zmodel"], pos)
                target = density.params()[name]
                if t.shape != target.shape:
                    raise CorruptStreamError("zmodel", f"tensor {name} has shape {t.shape}")
                target[...] = t
        except EOFError as exc:
            raise TruncatedStreamError("zmodel", str(exc)) from None
        if pos != len(sec["zmodel"]):
            raise CorruptStreamError("zmodel", "trailing bytes")
    elif sec["zmodel"] or sec["zpayload"]:
        raise CorruptStreamError("zmodel", "unexpected hyperprior for this variant")
    return SceneStructure(h, x, grid, fpnet, icenc, penet, heads, density)


def _decode_block(buf: bytes, section: str, sigma, q):
    crc, stream = _read_coded(buf, section)
    try:
        sym, over = decode_gaussian(stream, sigma, q)
    except TableError as exc:
        raise CorruptStreamError(section, str(exc)) from None
    if over > 0 or _crc(sym) != crc:
        raise CorruptStreamError(section, "payload does not match its checksum")
    return sym


def decode_scene(data: bytes) -> SceneModel:
    """Rebuild a renderable :class:`SceneModel` from a stream."""
    parsed = parse_stream(data)
    st = decode_structure(parsed)
    h, sec = st.header, parsed.sections
    n, k = h.n, h.k
    lookup = st.grid.lookup(st.x)
    fc = st.grid.query(st.x, lookup=lookup)

    # hyperprior first: its tables need only the density
    zhat = None
    if st.density is not None:
        try:
            tables = [factorized_table(st.density, c) for c in range(HYPER_DIM)]
        except TableError as exc:
            raise CorruptStreamError("zmodel", str(exc)) from None
        zsym, over = decode_symbols(sec["zpayload"], tables, np.tile(np.arange(HYPER_DIM), n))
        zhat = st.density.step * zsym.reshape(n, HYPER_DIM).astype(np.float64)

    params, _ = estimate_from(st, fc, zhat)

    buf = sec["masks"]
    if len(buf) < 4:
        raise TruncatedStreamError("masks")
    c1 = struct.unpack_from("<I", buf, 0)[0]
    if not 1 <= c1 < 65536:
        raise CorruptStreamError("masks", "bad table")
    from .tables import CdfTable
    mtable = CdfTable(0, np.array([0, 65536 - c1, 65536], np.int64))
    mbits, _ = decode_symbols(buf[4:], [mtable], np.zeros(n * k, np.int64))
    mask = mbits.reshape(n, k).astype(bool)
    kept = np.repeat(mask, 3, axis=1)

    names = {"feature": "features", "scale": "scales", "offset": "offsets"}
    values = {}
    for name, section in names.items():
        mu, sigma, q = params.block(name)
        sel = kept if name == "offset" else np.ones(mu.shape, bool)
        sym = np.zeros(mu.shape, np.int64)
        sym[sel] = _decode_block(sec[section], section, sigma[sel], q[sel])
        values[name] = np.where(sel, mu + q * sym, 0.0)

    model = SceneModel(h.variant, st.x, values["feature"], values["scale"], values["offset"].reshape(n, k, 3),
                       np.where(mask, 1.0, -1.0), st.grid, st.penet, st.heads, st.fpnet, st.icenc,
                       st.density, z_hat=zhat, seed=h.seed)
    model._lookup = lookup
    return model


def estimate_from(st: SceneStructure, fc, zhat):
    return st.penet.forward(fc if zhat is None else np.concatenate([zhat, fc], axis=1))


def decoded_feature(model: SceneModel) -> np.ndarray:
    """``f_p`` of a decoded model (its ``feat`` already holds the quantized values)."""
    fc = model.grid.query(model.x, lookup=model.lookup)
    if model.fpnet is None:
        return model.feat
    return predict_feature(model.fpnet, fc, model.feat)[0]


# ----------------------------------------------------------------- stats

@dataclass
class StreamStats:
    header_bytes: int
    sections: dict
    total_bytes: int

    @property
    def payload_bytes(self) -> dict:
        """Range-coded bytes of the hyperprior and anchor payloads (checksums excluded)."""
        return {s: max(0, self.sections[s] - (_CODED_HEAD.size if s in ("features", "scales", "offsets") else 0))
                for s in PAYLOAD_SECTIONS}


def stream_stats(data: bytes) -> StreamStats:
    parsed = parse_stream(data)
    return StreamStats(HEADER_SIZE, dict(parsed.header.lengths), parsed.total_bytes)
