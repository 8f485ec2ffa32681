import io
import math
import struct
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datapipe import wire
from datapipe.wire import (
    BadMagic,
    Codec,
    CodecError,
    ColumnBlock,
    EncodingLimit,
    FormatCode,
    FrameType,
    RecordBatch,
    Schema,
    TransferHeader,
    TruncatedInput,
    TypeCode,
    TypeMismatch,
    UnknownCode,
    UnsupportedVersion,
)

EMPTY_HEADER = b"PGEN" + bytes([0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00])
# column count 1, then type INT32, name length 1, "a"
ONE_COLUMN_HEADER = b"PGEN" + bytes([0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x01, 0x00, 0x01, 0x01, 0x00]) + b"a"


# -- strategies ---------------------------------------------------------

_values = {
    TypeCode.INT32: st.integers(wire.INT32_MIN, wire.INT32_MAX),
    TypeCode.INT64: st.integers(wire.INT64_MIN, wire.INT64_MAX),
    TypeCode.FLOAT64: st.floats(allow_nan=True, allow_infinity=True),
    TypeCode.BOOL: st.booleans(),
    TypeCode.TEXT: st.text(max_size=12),
}

type_codes = st.sampled_from(list(TypeCode))


@st.composite
def schemas(draw, max_cols=5):
    types = draw(st.lists(type_codes, max_size=max_cols))
    names = draw(st.lists(st.text(max_size=6), min_size=len(types), max_size=len(types), unique=True))
    return Schema.of(*zip(names, types))


@st.composite
def batches(draw, max_rows=20, max_cols=5):
    schema = draw(schemas(max_cols))
    n = draw(st.integers(0, max_rows))
    rows = [tuple(draw(_values[t]) for t in schema.types) for _ in range(n)]
    return RecordBatch(schema, rows)


@st.composite
def headers(draw):
    return TransferHeader(
        draw(st.sampled_from(list(FormatCode))),
        draw(st.sampled_from(list(Codec))),
        draw(st.text(max_size=20)),
        draw(schemas(8)),
    )


def bits(v):
    return struct.pack("<d", v) if isinstance(v, float) else v


def same_rows(a, b):
    return len(a) == len(b) and all(
        tuple(map(bits, x)) == tuple(map(bits, y)) for x, y in zip(a, b)
    )


# -- header -------------------------------------------------------------


def test_empty_header_golden_bytes():
    h = TransferHeader(FormatCode.ROW, Codec.NONE, "", Schema())
    assert wire.encode_header(h) == EMPTY_HEADER
    assert len(EMPTY_HEADER) == 12


def test_one_column_header_golden_bytes():
    h = TransferHeader(FormatCode.ROW, Codec.NONE, "", Schema.of(("a", TypeCode.INT32)))
    assert wire.encode_header(h) == ONE_COLUMN_HEADER


def test_decode_hand_assembled_header():
    h, consumed = wire.decode_header(ONE_COLUMN_HEADER + b"trailing")
    assert consumed == len(ONE_COLUMN_HEADER)
    assert h.schema == Schema.of(("a", TypeCode.INT32))
    assert (h.format_code, h.compression_code, h.query_id) == (FormatCode.ROW, Codec.NONE, "")


@settings(max_examples=200)
@given(headers())
def test_header_round_trip(h):
    raw = wire.encode_header(h)
    back, consumed = wire.decode_header(raw)
    assert back == h
    assert consumed == len(raw)


def test_bad_magic():
    with pytest.raises(BadMagic):
        wire.decode_header(b"X" + ONE_COLUMN_HEADER[1:])


def test_truncated_after_magic():
    with pytest.raises(TruncatedInput):
        wire.decode_header(b"PGEN")


def test_unsupported_version():
    with pytest.raises(UnsupportedVersion):
        wire.decode_header(b"PGEN\x02\x00" + EMPTY_HEADER[6:])


@pytest.mark.parametrize("offset,value", [(6, 9), (7, 3), (12, 0), (12, 6)])
def test_unknown_codes(offset, value):
    raw = bytearray(ONE_COLUMN_HEADER)
    raw[offset] = value
    with pytest.raises(UnknownCode):
        wire.decode_header(bytes(raw))


def test_error_kinds_are_distinct():
    kinds = {BadMagic, UnsupportedVersion, UnknownCode, TruncatedInput}
    assert len(kinds) == 4
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)


def test_header_limits():
    with pytest.raises(EncodingLimit):
        wire.encode_header(TransferHeader(query_id="q" * 65536))
    with pytest.raises(EncodingLimit):
        Schema.of(*[TypeCode.INT32] * 65536)


def test_duplicate_names_rejected_but_empty_names_allowed():
    Schema.of(TypeCode.INT32, TypeCode.INT32)
    with pytest.raises(ValueError):
        Schema.of(("a", TypeCode.INT32), ("a", TypeCode.TEXT))


# -- frames -------------------------------------------------------------


def test_frame_layout():
    assert wire.encode_frame(FrameType.DATA, b"xyz") == b"\x00\x03\x00\x00\x00xyz"
    assert wire.encode_frame(FrameType.END_OF_STREAM) == b"\x05\x00\x00\x00\x00"


def test_end_of_stream_must_be_empty():
    with pytest.raises(wire.WireError):
        wire.encode_frame(FrameType.END_OF_STREAM, b"x")
    with pytest.raises(wire.WireError):
        wire.read_frame(io.BytesIO(b"\x05\x01\x00\x00\x00x"))


def test_read_frame_truncated_and_unknown():
    with pytest.raises(TruncatedInput):
        wire.read_frame(io.BytesIO(b"\x00\x09\x00\x00\x00abc"))
    with pytest.raises(UnknownCode):
        wire.read_frame(io.BytesIO(b"\x07\x00\x00\x00\x00"))


# -- row blocks ---------------------------------------------------------


def test_empty_row_block():
    assert wire.encode_block_row(RecordBatch(Schema.of(TypeCode.INT64), [])) == b"\x00\x00\x00\x00"


def test_one_int64_row_golden():
    b = RecordBatch(Schema.of(TypeCode.INT64), [(7,)])
    assert wire.encode_block_row(b) == bytes([1, 0, 0, 0, 7, 0, 0, 0, 0, 0, 0, 0])


def test_row_block_all_types_hand_assembled():
    schema = Schema.of(TypeCode.INT32, TypeCode.INT64, TypeCode.FLOAT64, TypeCode.BOOL, TypeCode.TEXT)
    b = RecordBatch(schema, [(-1, 2**40, 0.5, True, "hé")])
    expected = (
        struct.pack("<I", 1) + struct.pack("<i", -1) + struct.pack("<q", 2**40)
        + struct.pack("<d", 0.5) + b"\x01" + struct.pack("<I", 3) + "hé".encode()
    )
    assert wire.encode_block_row(b) == expected


@settings(max_examples=200)
@given(batches())
def test_row_block_round_trip(b):
    raw = wire.encode_block_row(b)
    assert wire.encode_block_row(b) == raw
    back = wire.decode_block_row(raw, b.schema)
    assert same_rows(back.rows, b.rows)


@pytest.mark.parametrize(
    "tc,value",
    [
        (TypeCode.INT32, 2**31),
        (TypeCode.INT32, 1.0),
        (TypeCode.INT64, True),
        (TypeCode.FLOAT64, 1),
        (TypeCode.BOOL, 1),
        (TypeCode.TEXT, b"x"),
    ],
)
def test_row_block_type_mismatch(tc, value):
    with pytest.raises(TypeMismatch):
        wire.encode_block_row(RecordBatch(Schema.of(tc), [(value,)]))


def test_row_block_arity_mismatch():
    with pytest.raises(TypeMismatch):
        wire.encode_block_row(RecordBatch(Schema.of(TypeCode.INT32, TypeCode.INT32), [(1,)]))


def test_decode_row_block_truncated():
    raw = wire.encode_block_row(RecordBatch(Schema.of(TypeCode.TEXT), [("hello",)]))
    with pytest.raises(TruncatedInput):
        wire.decode_block_row(raw[:-1], Schema.of(TypeCode.TEXT))
    with pytest.raises(TruncatedInput):
        wire.decode_block_row(b"\x02\x00\x00\x00" + b"\x00" * 4, Schema.of(TypeCode.INT32))


# -- pivot --------------------------------------------------------------


def test_pivot_transposes():
    schema = Schema.of(TypeCode.INT32, TypeCode.FLOAT64)
    c = wire.pivot(RecordBatch(schema, [(1, 2.0), (3, 4.0)]))
    assert c.row_count == 2
    assert c.columns == [[1, 3], [2.0, 4.0]]


def test_pivot_empty():
    schema = Schema.of(TypeCode.INT32, TypeCode.TEXT)
    c = wire.pivot(RecordBatch(schema, []))
    assert c.schema == schema and c.row_count == 0 and c.columns == [[], []]


@given(batches())
def test_unpivot_pivot_identity(b):
    assert same_rows(wire.unpivot(wire.pivot(b)).rows, b.rows)


# -- column blocks ------------------------------------------------------


def test_empty_column_block():
    c = ColumnBlock(Schema.of(TypeCode.INT32), 0, [[]])
    assert wire.encode_block_column(c) == b"\x00\x00\x00\x00"


def test_two_row_column_block_golden():
    c = ColumnBlock(Schema.of(TypeCode.INT32, TypeCode.FLOAT64), 2, [[1, 3], [2.0, 4.0]])
    expected = struct.pack("<I", 2) + struct.pack("<2i", 1, 3) + struct.pack("<2d", 2.0, 4.0)
    assert wire.encode_block_column(c) == expected


def test_text_column_offsets_golden():
    c = ColumnBlock(Schema.of(TypeCode.TEXT), 3, [["ab", "", "c"]])
    expected = struct.pack("<I", 3) + struct.pack("<4I", 0, 2, 2, 3) + b"abc"
    assert wire.encode_block_column(c) == expected


@settings(max_examples=200)
@given(batches())
def test_column_block_round_trip_and_size(b):
    c = wire.pivot(b)
    raw = wire.encode_block_column(c)
    assert len(raw) == wire.column_payload_size(b.schema, c.columns)
    back = wire.decode_block_column(raw, b.schema)
    assert back.row_count == c.row_count
    assert same_rows(wire.unpivot(back).rows, b.rows)


def test_column_block_type_mismatch():
    with pytest.raises(TypeMismatch):
        wire.encode_block_column(ColumnBlock(Schema.of(TypeCode.INT32), 2, [[1, "x"]]))
    with pytest.raises(TypeMismatch):
        wire.encode_block_column(ColumnBlock(Schema.of(TypeCode.INT32), 2, [[1]]))


def test_float_bits_survive():
    odd = [-0.0, math.inf, -math.inf, 5e-324, struct.unpack("<d", b"\x01\x00\x00\x00\x00\x00\xf8\x7f")[0]]
    schema = Schema.of(TypeCode.FLOAT64)
    b = RecordBatch(schema, [(v,) for v in odd])
    for fmt in FormatCode:
        for codec in Codec:
            if codec == Codec.RLE and fmt == FormatCode.ROW:
                continue
            back = wire.decode_batch(wire.encode_batch(b, fmt, codec), schema, fmt, codec)
            assert [bits(r[0]) for r in back.rows] == [bits(v) for v in odd]


# -- codecs -------------------------------------------------------------


def test_rle_runs_golden():
    raw = wire.rle_encode_column([5, 5, 5, 1], TypeCode.INT32)
    assert raw == struct.pack("<I", 2) + struct.pack("<Ii", 3, 5) + struct.pack("<Ii", 1, 1)


def test_none_is_identity():
    schema = Schema.of(TypeCode.INT32)
    for fmt in FormatCode:
        assert wire.compress(b"anything", Codec.NONE, schema, fmt) == b"anything"


def test_deflate_is_zlib():
    payload = wire.encode_block_row(RecordBatch(Schema.of(TypeCode.INT32), [(1,)] * 100))
    out = wire.compress(payload, Codec.DEFLATE, Schema.of(TypeCode.INT32), FormatCode.ROW)
    assert zlib.decompress(out) == payload


def test_rle_requires_column_format():
    with pytest.raises(CodecError):
        wire.compress(b"\x00\x00\x00\x00", Codec.RLE, Schema(), FormatCode.ROW)
    with pytest.raises(CodecError):
        wire.decompress(b"\x00\x00\x00\x00", Codec.RLE, Schema(), FormatCode.ROW)


def test_corrupt_payloads():
    schema = Schema.of(TypeCode.INT32)
    with pytest.raises(CodecError):
        wire.decompress(b"not zlib", Codec.DEFLATE, schema, FormatCode.COLUMN)
    good = wire.compress(wire.encode_block_column(ColumnBlock(schema, 3, [[1, 1, 2]])), Codec.RLE, schema,
                         FormatCode.COLUMN)
    with pytest.raises(CodecError):
        wire.decompress(good[:-2], Codec.RLE, schema, FormatCode.COLUMN)
    # run lengths that do not add up to the row count
    bad = bytearray(good)
    bad[8] = 9
    with pytest.raises(CodecError):
        wire.decompress(bytes(bad), Codec.RLE, schema, FormatCode.COLUMN)


@settings(max_examples=200)
@given(batches(), st.sampled_from([Codec.RLE, Codec.DEFLATE]))
def test_compress_round_trip(b, codec):
    payload = wire.encode_block_column(wire.pivot(b))
    packed = wire.compress(payload, codec, b.schema, FormatCode.COLUMN)
    assert wire.decompress(packed, codec, b.schema, FormatCode.COLUMN) == payload


@given(st.lists(st.sampled_from([0, 1, 2]), max_size=50))
def test_rle_run_count_matches_oracle(values):
    raw = wire.rle_encode_column(values, TypeCode.INT32)
    runs = sum(1 for i, v in enumerate(values) if i == 0 or values[i - 1] != v)
    assert struct.unpack_from("<I", raw)[0] == runs
    assert len(raw) == 4 + 8 * runs


def test_rle_never_grows_constant_column():
    schema = Schema.of(TypeCode.INT64)
    payload = wire.encode_block_column(ColumnBlock(schema, 1000, [[3] * 1000]))
    packed = wire.compress(payload, Codec.RLE, schema, FormatCode.COLUMN)
    assert len(packed) == 4 + 4 + 12
