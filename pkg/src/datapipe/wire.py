"""Binary wire format for data pipes.

All multi-byte integers are little-endian. A transfer is a
:class:`TransferHeader` followed by a sequence of frames; each frame is
``frame_type u8 | payload_length u32 | payload``. Block payloads come in a
row-major and a column-major flavor, optionally compressed per the header's
codec.
"""

from __future__ import annotations

import enum
import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MAGIC = b"PGEN"
VERSION = 1

MAX_U16 = 0xFFFF
MAX_U32 = 0xFFFFFFFF
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
INT64_MIN, INT64_MAX = -(2**63), 2**63 - 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_FRAME_HEAD = struct.Struct("<BI")


class TypeCode(enum.IntEnum):
    INT32 = 1
    INT64 = 2
    FLOAT64 = 3
    BOOL = 4
    TEXT = 5


class FormatCode(enum.IntEnum):
    ROW = 0
    COLUMN = 1


class Codec(enum.IntEnum):
    NONE = 0
    RLE = 1
    DEFLATE = 2


class FrameType(enum.IntEnum):
    DATA = 0
    KEY_HEADER = 1
    KEY_EXTEND = 2
    VERBATIM_ROW = 3
    BITMAP_ROW = 4
    END_OF_STREAM = 5


# struct codes and numpy dtypes for the fixed-width types
_STRUCT_CODE = {
    TypeCode.INT32: "i",
    TypeCode.INT64: "q",
    TypeCode.FLOAT64: "d",
    TypeCode.BOOL: "?",
}
_DTYPE = {
    TypeCode.INT32: np.dtype("<i4"),
    TypeCode.INT64: np.dtype("<i8"),
    TypeCode.FLOAT64: np.dtype("<f8"),
    TypeCode.BOOL: np.dtype("?"),
}
FIXED_WIDTH = {TypeCode.INT32: 4, TypeCode.INT64: 8, TypeCode.FLOAT64: 8, TypeCode.BOOL: 1}


class WireError(Exception):
    """Base class for malformed or unencodable wire data."""


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class UnknownCode(WireError):
    pass


class TruncatedInput(WireError):
    pass


class TypeMismatch(WireError):
    pass


class EncodingLimit(WireError):
    """A length or count does not fit its wire field."""


class CodecError(WireError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    type_code: TypeCode


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))
        if len(self.columns) > MAX_U16:
            raise EncodingLimit(f"schema has {len(self.columns)} columns, at most {MAX_U16} allowed")
        seen = set()
        for col in self.columns:
            TypeCode(col.type_code)
            if col.name:
                if col.name in seen:
                    raise ValueError(f"duplicate column name {col.name!r}")
                seen.add(col.name)

    @classmethod
    def of(cls, *specs: tuple[str, TypeCode] | TypeCode) -> "Schema":
        """Build a schema from ``(name, type)`` pairs or bare types (unnamed)."""
        cols = []
        for spec in specs:
            if isinstance(spec, tuple):
                cols.append(Column(spec[0], TypeCode(spec[1])))
            else:
                cols.append(Column("", TypeCode(spec)))
        return cls(tuple(cols))

    @property
    def types(self) -> tuple[TypeCode, ...]:
        return tuple(c.type_code for c in self.columns)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def __len__(self) -> int:
        return len(self.columns)


@dataclass(frozen=True)
class TransferHeader:
    format_code: FormatCode = FormatCode.ROW
    compression_code: Codec = Codec.NONE
    query_id: str = ""
    schema: Schema = field(default_factory=Schema)
    magic: bytes = MAGIC
    version: int = VERSION


@dataclass
class RecordBatch:
    schema: Schema
    rows: list[tuple]

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class ColumnBlock:
    schema: Schema
    row_count: int
    columns: list[list]

    def __len__(self) -> int:
        return self.row_count


# -- low-level readers ---------------------------------------------------


def read_exact(stream: BinaryIO, n: int) -> bytes:
    """Read exactly *n* bytes or raise :class:`TruncatedInput`."""
    data = stream.read(n)
    if data is None or len(data) != n:
        got = 0 if not data else len(data)
        raise TruncatedInput(f"expected {n} bytes, got {got}")
    return data


def _pack_str16(s: str, what: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > MAX_U16:
        raise EncodingLimit(f"{what} is {len(raw)} bytes, at most {MAX_U16} allowed")
    return _U16.pack(len(raw)) + raw


def _read_str16(stream: BinaryIO) -> str:
    (n,) = _U16.unpack(read_exact(stream, 2))
    return read_exact(stream, n).decode("utf-8")


def _code(enum_cls, value: int, what: str):
    try:
        return enum_cls(value)
    except ValueError:
        raise UnknownCode(f"unknown {what} code {value}") from None


# -- header --------------------------------------------------------------


def encode_header(h: TransferHeader) -> bytes:
    if h.magic != MAGIC:
        raise BadMagic(f"magic must be {MAGIC!r}")
    if h.version != VERSION:
        raise UnsupportedVersion(f"version {h.version}")
    parts = [
        MAGIC,
        _U16.pack(h.version),
        bytes((int(h.format_code), int(h.compression_code))),
        _pack_str16(h.query_id, "query id"),
        _U16.pack(len(h.schema.columns)),
    ]
    for col in h.schema.columns:
        parts.append(bytes((int(col.type_code),)))
        parts.append(_pack_str16(col.name, "column name"))
    return b"".join(parts)


def read_header(stream: BinaryIO) -> TransferHeader:
    magic = read_exact(stream, 4)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    (version,) = _U16.unpack(read_exact(stream, 2))
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    fmt, codec = read_exact(stream, 2)
    fmt = _code(FormatCode, fmt, "format")
    codec = _code(Codec, codec, "compression")
    query_id = _read_str16(stream)
    (ncols,) = _U16.unpack(read_exact(stream, 2))
    cols = []
    for _ in range(ncols):
        (tc,) = read_exact(stream, 1)
        cols.append(Column(_read_str16(stream), _code(TypeCode, tc, "type")))
    return TransferHeader(fmt, codec, query_id, Schema(tuple(cols)))


def decode_header(b: bytes) -> tuple[TransferHeader, int]:
    """Decode a header from the front of *b*; returns it and the bytes consumed."""
    stream = io.BytesIO(b)
    header = read_header(stream)
    return header, stream.tell()


# -- frames --------------------------------------------------------------


def encode_frame(frame_type: FrameType, payload: bytes = b"") -> bytes:
    if frame_type == FrameType.END_OF_STREAM and payload:
        raise WireError("END_OF_STREAM carries no payload")
    if len(payload) > MAX_U32:
        raise EncodingLimit("frame payload exceeds 4 GiB")
    return _FRAME_HEAD.pack(int(frame_type), len(payload)) + payload


def read_frame(stream: BinaryIO) -> tuple[FrameType, bytes]:
    ftype, length = _FRAME_HEAD.unpack(read_exact(stream, _FRAME_HEAD.size))
    ftype = _code(FrameType, ftype, "frame")
    if ftype == FrameType.END_OF_STREAM and length:
        raise WireError("END_OF_STREAM frame with non-empty payload")
    return ftype, read_exact(stream, length)


# -- value checks --------------------------------------------------------


def check_value(value, type_code: TypeCode) -> None:
    """Raise :class:`TypeMismatch` unless *value* is a valid *type_code* value."""
    if type_code == TypeCode.BOOL:
        ok = isinstance(value, (bool, np.bool_))
    elif type_code == TypeCode.TEXT:
        ok = isinstance(value, str)
    elif type_code == TypeCode.FLOAT64:
        ok = isinstance(value, (float, np.floating))
    else:
        ok = isinstance(value, (int, np.integer)) and not isinstance(value, (bool, np.bool_))
        if ok:
            lo, hi = (INT32_MIN, INT32_MAX) if type_code == TypeCode.INT32 else (INT64_MIN, INT64_MAX)
            ok = lo <= value <= hi
    if not ok:
        raise TypeMismatch(f"{value!r} is not a valid {type_code.name} value")


def check_batch(batch: RecordBatch) -> None:
    types = batch.schema.types
    width = len(types)
    for i, row in enumerate(batch.rows):
        if len(row) != width:
            raise TypeMismatch(f"row {i} has {len(row)} values, schema has {width}")
        for value, tc in zip(row, types):
            check_value(value, tc)


def _column_array(values: Sequence, type_code: TypeCode) -> np.ndarray:
    """Convert a column to a little-endian numpy array, validating types."""
    dtype = _DTYPE[type_code]
    if not len(values):
        return np.empty(0, dtype=dtype)
    try:
        arr = np.asarray(values)
    except (OverflowError, ValueError) as exc:
        raise TypeMismatch(f"{type_code.name} column: {exc}") from None
    kind = arr.dtype.kind
    if type_code == TypeCode.BOOL:
        ok = kind == "b"
    elif type_code == TypeCode.FLOAT64:
        ok = kind == "f"
    else:
        ok = kind in "iu"
        if ok:
            info = np.iinfo(dtype)
            ok = info.min <= arr.min() and arr.max() <= info.max
    if not ok or arr.ndim != 1:
        # slow path names the offending value
        for v in values:
            check_value(v, type_code)
        raise TypeMismatch(f"{type_code.name} column holds mixed values")
    return arr.astype(dtype, copy=False)


# -- row blocks ----------------------------------------------------------


def _row_struct(types: Sequence[TypeCode]) -> struct.Struct | None:
    if any(t == TypeCode.TEXT for t in types):
        return None
    return struct.Struct("<" + "".join(_STRUCT_CODE[t] for t in types))


def encode_block_row(b: RecordBatch) -> bytes:
    if len(b.rows) > MAX_U32:
        raise EncodingLimit("too many rows for one block")
    types = b.schema.types
    check_batch(b)
    out = [_U32.pack(len(b.rows))]
    fixed = _row_struct(types)
    if fixed is not None:
        if b.rows and types:
            many = struct.Struct("<" + fixed.format[1:] * len(b.rows))
            out.append(many.pack(*[v for row in b.rows for v in row]))
        return b"".join(out)
    for row in b.rows:
        for value, tc in zip(row, types):
            if tc == TypeCode.TEXT:
                raw = value.encode("utf-8")
                out.append(_U32.pack(len(raw)))
                out.append(raw)
            else:
                out.append(struct.pack("<" + _STRUCT_CODE[tc], value))
    return b"".join(out)


def decode_block_row(data: bytes, schema: Schema) -> RecordBatch:
    if len(data) < 4:
        raise TruncatedInput("row block shorter than its row count")
    (n,) = _U32.unpack_from(data, 0)
    types = schema.types
    fixed = _row_struct(types)
    if fixed is not None:
        expected = 4 + n * fixed.size
        if len(data) != expected:
            raise TruncatedInput(f"row block is {len(data)} bytes, expected {expected}")
        if not types:
            return RecordBatch(schema, [()] * n)
        return RecordBatch(schema, list(fixed.iter_unpack(memoryview(data)[4:])))
    rows = []
    pos = 4
    view = memoryview(data)
    try:
        for _ in range(n):
            row = []
            for tc in types:
                if tc == TypeCode.TEXT:
                    (length,) = _U32.unpack_from(data, pos)
                    pos += 4
                    if pos + length > len(data):
                        raise TruncatedInput("text value runs past end of block")
                    row.append(str(view[pos : pos + length], "utf-8"))
                    pos += length
                else:
                    (v,) = struct.unpack_from("<" + _STRUCT_CODE[tc], data, pos)
                    pos += FIXED_WIDTH[tc]
                    row.append(v)
            rows.append(tuple(row))
    except struct.error:
        raise TruncatedInput("row block truncated") from None
    if pos != len(data):
        raise WireError(f"{len(data) - pos} trailing bytes after row block")
    return RecordBatch(schema, rows)


# -- pivoting ------------------------------------------------------------


def pivot(b: RecordBatch) -> ColumnBlock:
    width = len(b.schema)
    if not b.rows:
        return ColumnBlock(b.schema, 0, [[] for _ in range(width)])
    for i, row in enumerate(b.rows):
        if len(row) != width:
            raise TypeMismatch(f"row {i} has {len(row)} values, schema has {width}")
    if width == 0:
        return ColumnBlock(b.schema, len(b.rows), [])
    return ColumnBlock(b.schema, len(b.rows), [list(col) for col in zip(*b.rows)])


def unpivot(c: ColumnBlock) -> RecordBatch:
    for col in c.columns:
        if len(col) != c.row_count:
            raise TypeMismatch(f"column has {len(col)} entries, block has {c.row_count} rows")
    if not c.columns:
        return RecordBatch(c.schema, [()] * c.row_count)
    return RecordBatch(c.schema, list(zip(*c.columns)))


# -- column blocks -------------------------------------------------------


def _encode_text_column(values: Sequence[str]) -> bytes:
    raws = []
    for v in values:
        if not isinstance(v, str):
            raise TypeMismatch(f"{v!r} is not a valid TEXT value")
        raws.append(v.encode("utf-8"))
    lengths = np.fromiter((len(r) for r in raws), dtype=np.int64, count=len(raws))
    offsets = np.zeros(len(raws) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    if offsets[-1] > MAX_U32:
        raise EncodingLimit("text column exceeds 4 GiB in one block")
    return offsets.astype("<u4").tobytes() + b"".join(raws)


def encode_column(values: Sequence, type_code: TypeCode) -> bytes:
    """Encode one column's values (no row count prefix)."""
    if type_code == TypeCode.TEXT:
        return _encode_text_column(values)
    return _column_array(values, type_code).tobytes()


def encode_block_column(c: ColumnBlock) -> bytes:
    if c.row_count > MAX_U32:
        raise EncodingLimit("too many rows for one block")
    if len(c.columns) != len(c.schema):
        raise TypeMismatch("column count differs from schema")
    out = [_U32.pack(c.row_count)]
    for values, tc in zip(c.columns, c.schema.types):
        if len(values) != c.row_count:
            raise TypeMismatch(f"column has {len(values)} entries, block has {c.row_count} rows")
        out.append(encode_column(values, tc))
    return b"".join(out)


def _decode_column(data: bytes, pos: int, n: int, tc: TypeCode) -> tuple[list, int]:
    if tc == TypeCode.TEXT:
        end_offsets = pos + 4 * (n + 1)
        if end_offsets > len(data):
            raise TruncatedInput("text offsets run past end of block")
        offsets = np.frombuffer(data, dtype="<u4", count=n + 1, offset=pos).tolist()
        base = end_offsets
        if offsets[0] != 0 or any(a > b for a, b in zip(offsets, offsets[1:])):
            raise WireError("text offsets are not monotone from zero")
        if base + offsets[-1] > len(data):
            raise TruncatedInput("text bytes run past end of block")
        view = memoryview(data)
        values = [str(view[base + a : base + b], "utf-8") for a, b in zip(offsets, offsets[1:])]
        return values, base + offsets[-1]
    width = FIXED_WIDTH[tc]
    end = pos + width * n
    if end > len(data):
        raise TruncatedInput(f"{tc.name} column runs past end of block")
    arr = np.frombuffer(data, dtype=_DTYPE[tc], count=n, offset=pos)
    return arr.tolist(), end


def decode_block_column(data: bytes, schema: Schema) -> ColumnBlock:
    if len(data) < 4:
        raise TruncatedInput("column block shorter than its row count")
    (n,) = _U32.unpack_from(data, 0)
    pos = 4
    columns = []
    for tc in schema.types:
        values, pos = _decode_column(data, pos, n, tc)
        columns.append(values)
    if pos != len(data):
        raise WireError(f"{len(data) - pos} trailing bytes after column block")
    return ColumnBlock(schema, n, columns)


def column_payload_size(schema: Schema, columns: Sequence[Sequence]) -> int:
    """Byte length of an uncompressed column block, computed without encoding."""
    n = len(columns[0]) if columns else 0
    size = 4
    for values, tc in zip(columns, schema.types):
        if tc == TypeCode.TEXT:
            size += 4 * (n + 1) + sum(len(v.encode("utf-8")) for v in values)
        else:
            size += FIXED_WIDTH[tc] * n
    return size


# -- compression ---------------------------------------------------------


def _run_bounds(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start indices and lengths of maximal runs of identical values."""
    n = len(arr)
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    # compare bit patterns so -0.0 / 0.0 and NaN payloads are kept distinct
    bits = arr.view(np.dtype(f"<u{arr.dtype.itemsize}")) if arr.dtype.kind == "f" else arr
    change = np.flatnonzero(bits[1:] != bits[:-1]) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [n])))
    return starts, lengths


def rle_encode_column(values: Sequence, tc: TypeCode) -> bytes:
    """``run_count u32`` then ``(run_length u32, value)`` pairs over maximal runs."""
    if tc == TypeCode.TEXT:
        runs: list[tuple[int, str]] = []
        for v in values:
            if runs and runs[-1][1] == v:
                runs[-1] = (runs[-1][0] + 1, v)
            else:
                runs.append((1, v))
        out = [_U32.pack(len(runs))]
        for length, v in runs:
            raw = v.encode("utf-8")
            out.append(_U32.pack(length) + _U32.pack(len(raw)) + raw)
        return b"".join(out)
    arr = _column_array(values, tc)
    starts, lengths = _run_bounds(arr)
    rec = np.empty(len(starts), dtype=[("len", "<u4"), ("val", _DTYPE[tc])])
    rec["len"] = lengths
    rec["val"] = arr[starts]
    return _U32.pack(len(starts)) + rec.tobytes()


def _rle_decode_column(data: bytes, pos: int, n: int, tc: TypeCode) -> tuple[list, int]:
    if pos + 4 > len(data):
        raise CodecError("RLE column truncated before run count")
    (nruns,) = _U32.unpack_from(data, pos)
    pos += 4
    if tc == TypeCode.TEXT:
        values: list = []
        for _ in range(nruns):
            if pos + 8 > len(data):
                raise CodecError("RLE text run truncated")
            length, size = struct.unpack_from("<II", data, pos)
            pos += 8
            if pos + size > len(data):
                raise CodecError("RLE text value truncated")
            values.extend([data[pos : pos + size].decode("utf-8")] * length)
            pos += size
    else:
        dtype = np.dtype([("len", "<u4"), ("val", _DTYPE[tc])])
        end = pos + dtype.itemsize * nruns
        if end > len(data):
            raise CodecError("RLE runs truncated")
        rec = np.frombuffer(data, dtype=dtype, count=nruns, offset=pos)
        values = np.repeat(rec["val"], rec["len"].astype(np.int64)).tolist()
        pos = end
    if len(values) != n:
        raise CodecError(f"RLE column expands to {len(values)} values, block has {n} rows")
    return values, pos


def _rle_compress(payload: bytes, schema: Schema) -> bytes:
    (n,) = _U32.unpack_from(payload, 0)
    out = [_U32.pack(n)]
    pos = 4
    for tc in schema.types:
        values, pos = _decode_column(payload, pos, n, tc)
        out.append(rle_encode_column(values, tc))
    if pos != len(payload):
        raise CodecError("trailing bytes after column payload")
    return b"".join(out)


def _rle_decompress(data: bytes, schema: Schema) -> bytes:
    if len(data) < 4:
        raise CodecError("RLE payload shorter than its row count")
    (n,) = _U32.unpack_from(data, 0)
    out = [_U32.pack(n)]
    pos = 4
    for tc in schema.types:
        values, pos = _rle_decode_column(data, pos, n, tc)
        out.append(encode_column(values, tc))
    if pos != len(data):
        raise CodecError("trailing bytes after RLE payload")
    return b"".join(out)


def compress(payload: bytes, codec: Codec, schema: Schema, format_code: FormatCode) -> bytes:
    codec = Codec(codec)
    if codec == Codec.NONE:
        return payload
    if codec == Codec.DEFLATE:
        return zlib.compress(payload)
    if format_code != FormatCode.COLUMN:
        raise CodecError("RLE requires the COLUMN format")
    try:
        return _rle_compress(payload, schema)
    except WireError as exc:
        raise CodecError(f"payload is not a column block: {exc}") from None


def decompress(data: bytes, codec: Codec, schema: Schema, format_code: FormatCode) -> bytes:
    codec = Codec(codec)
    if codec == Codec.NONE:
        return data
    if codec == Codec.DEFLATE:
        try:
            return zlib.decompress(data)
        except zlib.error as exc:
            raise CodecError(f"corrupt deflate stream: {exc}") from None
    if format_code != FormatCode.COLUMN:
        raise CodecError("RLE requires the COLUMN format")
    try:
        return _rle_decompress(data, schema)
    except (WireError, UnicodeDecodeError, struct.error) as exc:
        if isinstance(exc, CodecError):
            raise
        raise CodecError(f"corrupt RLE payload: {exc}") from None


# -- block helpers used by the pipe endpoints ----------------------------


def encode_batch(batch: RecordBatch, format_code: FormatCode, codec: Codec) -> bytes:
    """Encode and compress one batch as a DATA frame payload."""
    if format_code == FormatCode.COLUMN:
        payload = encode_block_column(pivot(batch))
    else:
        payload = encode_block_row(batch)
    return compress(payload, codec, batch.schema, format_code)


def decode_batch(data: bytes, schema: Schema, format_code: FormatCode, codec: Codec) -> RecordBatch:
    payload = decompress(data, codec, schema, format_code)
    if format_code == FormatCode.COLUMN:
        return unpivot(decode_block_column(payload, schema))
    return decode_block_row(payload, schema)


def iter_blocks(rows: Iterable[tuple], block_rows: int) -> Iterable[list[tuple]]:
    """Group *rows* into lists of at most *block_rows*."""
    block: list[tuple] = []
    for row in rows:
        block.append(row)
        if len(block) >= block_rows:
            yield block
            block = []
    if block:
        yield block
