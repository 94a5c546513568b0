import struct

import numpy as np
import pytest

from splatcodec.codec import (HEADER_SIZE, SECTIONS, BadMagicError, CorruptStreamError, EncodeError,
                              TruncatedStreamError, UnsupportedVersionError, decode_scene, decode_structure,
                              decoded_feature, encode_scene, encode_scene_full, parse_stream, stream_stats)
from splatcodec.model import VARIANTS

VARIANT_IDS = list(VARIANTS)


@pytest.fixture(scope="module")
def streams(trained_models):
    return {v: encode_scene_full(m) for v, m in trained_models.items()}


@pytest.mark.parametrize("variant", VARIANT_IDS)
def test_decode_matches_encoder_side(streams, variant):
    enc = streams[variant]
    m = decode_scene(enc.stream)
    assert np.array_equal(m.feat, enc.values["feature"])
    assert np.array_equal(m.scale, enc.values["scale"])
    kept = np.repeat(enc.mask, 3, axis=1)
    assert np.array_equal(m.offsets.reshape(kept.shape)[kept], enc.values["offset"][kept])
    assert np.array_equal(m.mask(), enc.mask)
    assert np.array_equal(decoded_feature(m), enc.fp)
    if variant == "predict_hyper":
        assert np.array_equal(m.z_hat, enc.z_hat)


@pytest.mark.parametrize("variant", VARIANT_IDS)
def test_reencode_is_byte_identical(streams, variant):
    s = streams[variant].stream
    assert encode_scene(decode_scene(s)) == s


def test_encoding_is_deterministic(trained_models):
    m = trained_models["predict_hyper"]
    assert encode_scene(m) == encode_scene(m)


@pytest.mark.parametrize("variant", VARIANT_IDS)
def test_section_sizes_sum_to_file_size(streams, variant):
    s = streams[variant].stream
    st = stream_stats(s)
    assert st.header_bytes + sum(st.sections.values()) == len(s) == st.total_bytes


def test_variant_isolation_in_sections(streams):
    secs = {v: stream_stats(e.stream).sections for v, e in streams.items()}
    assert secs["baseline"]["fpnet"] == 0 and secs["baseline"]["icenc"] == 0
    assert secs["predict"]["fpnet"] > 0 and secs["predict"]["icenc"] == 0 and secs["predict"]["zpayload"] == 0
    assert secs["predict_hyper"]["icenc"] > 0 and secs["predict_hyper"]["zpayload"] > 0


def test_payload_close_to_estimate(streams):
    for enc in streams.values():
        pay = stream_stats(enc.stream).payload_bytes
        est = sum(enc.estimated_bits.values()) / 8
        assert abs(sum(pay.values()) - est) <= 0.01 * est + 64


def test_locations_stored_as_f32(streams, trained_models):
    m = decode_scene(streams["predict"].stream)
    assert np.array_equal(m.x, trained_models["predict"].x.astype(np.float32).astype(np.float64))


def test_bad_magic_and_version(streams):
    s = bytearray(streams["predict"].stream)
    with pytest.raises(BadMagicError):
        parse_stream(b"XXXX" + bytes(s[4:]))
    s[4:6] = struct.pack("<H", 99)
    with pytest.raises(UnsupportedVersionError):
        parse_stream(bytes(s))


@pytest.mark.parametrize("cut", [3, HEADER_SIZE - 1])
def test_truncated_header(streams, cut):
    with pytest.raises((TruncatedStreamError, BadMagicError)):
        parse_stream(streams["predict"].stream[:cut])


def test_truncation_names_the_section(streams):
    s = streams["predict_hyper"].stream
    st = stream_stats(s)
    pos = HEADER_SIZE
    for name in SECTIONS:
        size = st.sections[name]
        if size:
            with pytest.raises(TruncatedStreamError) as err:
                decode_scene(s[:pos + size - 1])
            assert err.value.section == name and name in str(err.value)
        pos += size


def test_trailing_garbage_rejected(streams):
    with pytest.raises(CorruptStreamError):
        parse_stream(streams["predict"].stream + b"\0")


def _zpayload_span(stream):
    st = stream_stats(stream)
    start = HEADER_SIZE + sum(st.sections[n] for n in SECTIONS[:SECTIONS.index("zpayload")])
    return start, st.sections["zpayload"]


def test_corrupt_hyperprior_breaks_residuals_not_structure(streams):
    s = bytearray(streams["predict_hyper"].stream)
    start, size = _zpayload_span(s)
    for i in range(start, start + size, 7):
        s[i] ^= 0x5A
    bad = bytes(s)
    structure = decode_structure(parse_stream(bad))        # locations, grid, networks still parse
    assert structure.x.shape[0] == streams["predict_hyper"].fp.shape[0]
    errors = []
    for _ in range(2):
        with pytest.raises(CorruptStreamError) as err:
            decode_scene(bad)
        errors.append(str(err.value))
    assert errors[0] == errors[1]
    assert err.value.section in ("features", "scales", "offsets")


def test_refuses_non_finite(trained_models):
    m = trained_models["predict"].copy()
    m.feat[0, 0] = np.nan
    with pytest.raises(EncodeError, match="feat"):
        encode_scene(m)
