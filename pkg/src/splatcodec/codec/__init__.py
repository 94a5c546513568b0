"""Entropy coding and the scene bitstream."""

from .bitstream import (HEADER_SIZE, MAGIC, SECTIONS, VERSION, BadMagicError, CorruptStreamError,
                        EncodedScene, EncodeError, Header, ParsedStream, StreamError, StreamStats,
                        TruncatedStreamError, UnsupportedVersionError, decode_scene, decode_structure,
                        decoded_feature, encode_scene, encode_scene_full, parse_stream, stream_stats)
from .rangecoder import RangeDecoder, RangeEncoder, decode_symbols, encode_symbols
from .tables import (CdfTable, TableError, bernoulli_table, build_cdf_table, decode_gaussian,
                     encode_gaussian, factorized_table)
