"""Text-format optimizations applied inside a data pipe.

* delimiter inference over the components of exported records;
* CSV interception: delimiters and newlines are dropped on export and typed
  values are batched, while import can rebuild the exact CSV text;
* JSON key headers: the keys of a stream of flat objects are sent once and
  each object then travels as bare values.

The canonical CSV text used throughout escapes backslash, the delimiter and
line terminators inside text values with a backslash, so a line splits
unambiguously on unescaped delimiters.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

from .augtext import AugText, render
from .wire import (
    INT32_MAX,
    INT32_MIN,
    INT64_MAX,
    INT64_MIN,
    MAX_U16,
    Column,
    FrameType,
    RecordBatch,
    Schema,
    TypeCode,
    WireError,
)

TERMINATORS = frozenset("\n\r")
NUMERIC = frozenset((TypeCode.INT32, TypeCode.INT64, TypeCode.FLOAT64))


class FormatError(ValueError):
    """Exported text does not follow the record layout the pipe expects."""


class NoDelimiterFound(FormatError):
    pass


# -- delimiter inference -------------------------------------------------


@dataclass
class DelimiterReport:
    delimiter: str
    candidate_counts: dict[str, int]
    ambiguous: bool = False


def _flatten(parts: Iterable) -> Iterator:
    for p in parts:
        if isinstance(p, AugText):
            yield from p.parts
        else:
            yield p


def infer_delimiter(parts: Iterable) -> DelimiterReport:
    """Pick the most frequent one-character text part as the delimiter.

    Numeric parts and record terminators never count. Ties go first to
    non-alphanumeric characters, then to whichever appeared first.
    """
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for i, p in enumerate(_flatten(parts)):
        if isinstance(p, str) and len(p) == 1 and p not in TERMINATORS:
            counts[p] += 1
            first_seen.setdefault(p, i)
    if not counts:
        raise NoDelimiterFound("no one-character text parts to choose a delimiter from")
    top = max(counts.values())
    tied = [c for c in counts if counts[c] == top]
    best = min(tied, key=lambda c: (c.isalnum(), first_seen[c]))
    return DelimiterReport(best, dict(counts), ambiguous=len(tied) > 1)


# -- canonical CSV text --------------------------------------------------


def escape_text(s: str, delim: str) -> str:
    if "\\" in s:
        s = s.replace("\\", "\\\\")
    if delim in s:
        s = s.replace(delim, "\\" + delim)
    if "\n" in s:
        s = s.replace("\n", "\\n")
    if "\r" in s:
        s = s.replace("\r", "\\r")
    return s


_UNESCAPE = {"n": "\n", "r": "\r"}


def unescape_text(s: str) -> str:
    if "\\" not in s:
        return s
    out = []
    it = iter(s)
    for ch in it:
        if ch == "\\":
            nxt = next(it, None)
            if nxt is None:
                raise FormatError(f"dangling escape in {s!r}")
            out.append(_UNESCAPE.get(nxt, nxt))
        else:
            out.append(ch)
    return "".join(out)


def split_fields(line: str, delim: str) -> list[str]:
    """Split on delimiters that are not backslash-escaped; fields stay escaped."""
    if "\\" not in line:
        return line.split(delim)
    fields = []
    start = 0
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch == "\\":
            i += 2
            continue
        if ch == delim:
            fields.append(line[start:i])
            start = i + 1
        i += 1
    fields.append(line[start:])
    return fields


def _render_bool(v) -> str:
    return "true" if v else "false"


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise FormatError(f"not a boolean: {s!r}")


def _parse_int(s: str) -> int:
    if "_" in s:
        raise FormatError(f"not an integer: {s!r}")
    try:
        return int(s)
    except ValueError:
        raise FormatError(f"not an integer: {s!r}") from None


def _parse_float(s: str) -> float:
    if "_" in s:
        raise FormatError(f"not a number: {s!r}")
    try:
        return float(s)
    except ValueError:
        raise FormatError(f"not a number: {s!r}") from None


def _renderers(types: Sequence[TypeCode], delim: str):
    fns = []
    for t in types:
        if t == TypeCode.TEXT:
            fns.append(lambda v, d=delim: escape_text(v, d))
        elif t == TypeCode.BOOL:
            fns.append(_render_bool)
        elif t == TypeCode.FLOAT64:
            fns.append(float.__repr__)
        else:
            fns.append(int.__repr__)
    return fns


def _parsers(types: Sequence[TypeCode]):
    fns = []
    for t in types:
        if t == TypeCode.TEXT:
            fns.append(unescape_text)
        elif t == TypeCode.BOOL:
            fns.append(_parse_bool)
        elif t == TypeCode.FLOAT64:
            fns.append(_parse_float)
        else:
            fns.append(_parse_int)
    return fns


def format_rows(rows: Iterable[tuple], types: Sequence[TypeCode], delim: str = ",") -> str:
    """Canonical CSV text for *rows*, one ``\\n``-terminated line each."""
    if set(types) <= NUMERIC:
        # str() of int and float is already canonical
        lines = [delim.join(map(str, row)) for row in rows]
    else:
        fns = _renderers(types, delim)
        lines = [delim.join([f(v) for f, v in zip(fns, row)]) for row in rows]
    if not lines:
        return ""
    lines.append("")
    return "\n".join(lines)


def parse_lines(lines: Iterable[str], types: Sequence[TypeCode], delim: str = ",") -> list[tuple]:
    """Parse canonical CSV lines (terminators optional) into typed rows."""
    fns = _parsers(types)
    width = len(types)
    rows = []
    all_numeric = set(types) <= NUMERIC
    for line in lines:
        if line.endswith("\n"):
            line = line[:-1]
        fields = line.split(delim) if all_numeric else split_fields(line, delim)
        if len(fields) != width:
            if width == 0 and fields == [""]:
                rows.append(())
                continue
            raise FormatError(f"line has {len(fields)} fields, expected {width}: {line[:80]!r}")
        rows.append(tuple([f(x) for f, x in zip(fns, fields)]))
    return rows


class CsvWriter:
    """Writes typed rows as canonical CSV text to a text stream."""

    def __init__(self, stream: IO[str], schema: Schema, delim: str = ","):
        self.stream = stream
        self.schema = schema
        self.delim = delim
        self.rows_written = 0

    def writerows(self, rows: Sequence[tuple]) -> None:
        self.stream.write(format_rows(rows, self.schema.types, self.delim))
        self.rows_written += len(rows)


def read_csv_rows(stream: IO[str], schema: Schema, delim: str = ",", block_rows: int = 65536) -> Iterator[list[tuple]]:
    """Yield blocks of typed rows read from canonical CSV text."""
    types = schema.types
    block: list[str] = []
    for line in stream:
        block.append(line)
        if len(block) >= block_rows:
            yield parse_lines(block, types, delim)
            block = []
    if block:
        yield parse_lines(block, types, delim)


# -- CSV interception ----------------------------------------------------


_TEXT_TYPE = TypeCode.TEXT


class CsvInterceptor:
    """Turns exported CSV records built from :class:`AugText` into typed rows.

    Records may arrive split across any number of AugText chunks; fields end
    at unescaped delimiters and records at ``\\n``. The first record fixes
    the schema (unnamed columns, types from its components).
    """

    def __init__(self, delim: str, schema: Schema | None = None):
        if len(delim) != 1 or delim in TERMINATORS or delim == "\\":
            raise FormatError(f"unusable delimiter {delim!r}")
        self.delim = delim
        self.schema = schema
        self._split_re = re.compile("([" + re.escape(delim) + "\n])")
        self._pieces: list[tuple[TypeCode, object]] = []
        self._fields: list = []
        self._field_types: list[TypeCode] = []
        self._escape_pending = False
        self._rows: list[tuple] = []
        self.records = 0

    def _end_field(self) -> None:
        pieces = self._pieces
        if len(pieces) == 1 and pieces[0][0] != _TEXT_TYPE:
            tag, value = pieces[0]
        else:
            text = "".join(render(t, v) for t, v in pieces)
            tag, value = _TEXT_TYPE, unescape_text(text)
        self._fields.append(value)
        self._field_types.append(tag)
        self._pieces = []

    def _end_record(self) -> None:
        pieces = self._pieces
        if pieces and pieces[-1][0] == _TEXT_TYPE and pieces[-1][1].endswith("\r"):
            last = pieces[-1][1][:-1]
            if last:
                pieces[-1] = (_TEXT_TYPE, last)
            else:
                pieces.pop()
        self._end_field()
        fields, types = self._fields, self._field_types
        self._fields, self._field_types = [], []
        if self.schema is None:
            self.schema = Schema(tuple(Column("", t) for t in types))
        expected = self.schema.types
        if len(types) != len(expected):
            raise FormatError(
                f"record {self.records} has {len(types)} fields, first record had {len(expected)}"
            )
        if tuple(types) != expected:
            for i, (got, want) in enumerate(zip(types, expected)):
                if got != want:
                    raise FormatError(
                        f"record {self.records} field {i} is {got.name}, expected {want.name}"
                    )
        self._rows.append(tuple(fields))
        self.records += 1

    def _feed_text(self, text: str) -> None:
        if "\\" in text or self._escape_pending:
            self._feed_escaped(text)
            return
        for piece in self._split_re.split(text):
            if piece == self.delim:
                self._end_field()
            elif piece == "\n":
                self._end_record()
            elif piece:
                self._pieces.append((_TEXT_TYPE, piece))

    def _feed_escaped(self, text: str) -> None:
        buf = []
        for ch in text:
            if self._escape_pending:
                buf.append(ch)
                self._escape_pending = False
            elif ch == "\\":
                buf.append(ch)
                self._escape_pending = True
            elif ch == self.delim or ch == "\n":
                if buf:
                    self._pieces.append((_TEXT_TYPE, "".join(buf)))
                    buf = []
                if ch == "\n":
                    self._end_record()
                else:
                    self._end_field()
            else:
                buf.append(ch)
        if buf:
            self._pieces.append((_TEXT_TYPE, "".join(buf)))

    def feed(self, chunk) -> list[tuple]:
        """Consume one exported chunk; returns rows completed by it."""
        if isinstance(chunk, AugText):
            parts = chunk.tagged_parts
        else:
            parts = [(_TEXT_TYPE, chunk)]
        for tag, value in parts:
            if tag == _TEXT_TYPE:
                self._feed_text(value)
            else:
                self._pieces.append((tag, value))
        rows, self._rows = self._rows, []
        return rows

    def close(self) -> list[tuple]:
        """Flush a final record that lacked a trailing newline."""
        if self._pieces or self._fields:
            self._end_record()
        rows, self._rows = self._rows, []
        return rows


def csv_intercept_export(
    records: Iterable, delim: str, block_rows: int = 4096, schema: Schema | None = None
) -> Iterator[RecordBatch]:
    """Convert a stream of exported AugText records into typed batches."""
    ic = CsvInterceptor(delim, schema)
    pending: list[tuple] = []
    for rec in records:
        pending.extend(ic.feed(rec))
        while len(pending) >= block_rows:
            yield RecordBatch(ic.schema, pending[:block_rows])
            pending = pending[block_rows:]
    pending.extend(ic.close())
    while pending:
        yield RecordBatch(ic.schema, pending[:block_rows])
        pending = pending[block_rows:]


def csv_reconstruct_import(batches: Iterable[RecordBatch], delim: str) -> Iterator[str]:
    """Canonical CSV text for each incoming batch."""
    for batch in batches:
        if batch.rows:
            yield format_rows(batch.rows, batch.schema.types, delim)


def typed_rows(batches: Iterable[RecordBatch]) -> Iterator[tuple]:
    """The typed path: values straight from the wire, no text involved."""
    for batch in batches:
        yield from batch.rows


def records_as_augtext(batches: Iterable[RecordBatch], delim: str) -> Iterator[AugText]:
    """One AugText per row, ``[v0, delim, v1, ...]`` with values unrendered.

    Like a line reader, records carry no terminator.
    """
    for batch in batches:
        types = batch.schema.types
        tags = []
        for i, t in enumerate(types):
            if i:
                tags.append(_TEXT_TYPE)
            tags.append(t)
        text_cols = [i for i, t in enumerate(types) if t == _TEXT_TYPE]
        for row in batch.rows:
            if text_cols:
                row = list(row)
                for i in text_cols:
                    row[i] = escape_text(row[i], delim)
            vals = []
            for i, v in enumerate(row):
                if i:
                    vals.append(delim)
                vals.append(v)
            # empty text values would break the tag/value alignment
            keep = [(t, v) for t, v in zip(tags, vals) if not (t == _TEXT_TYPE and v == "")]
            yield AugText._raw([t for t, _ in keep], [v for _, v in keep])


# -- JSON key headers ----------------------------------------------------

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

# value tags inside JSON rows; 1-5 mirror the column type codes
J_NULL, J_INT32, J_INT64, J_FLOAT64, J_BOOL, J_TEXT, J_RAW = range(7)

_SCALARS = (type(None), bool, int, float, str)


def _pack_value(v, out: list) -> None:
    if v is None:
        out.append(b"\x00")
    elif v is True or v is False:
        out.append(bytes((J_BOOL, 1 if v else 0)))
    elif isinstance(v, int):
        if INT32_MIN <= v <= INT32_MAX:
            out.append(struct.pack("<Bi", J_INT32, v))
        elif INT64_MIN <= v <= INT64_MAX:
            out.append(struct.pack("<Bq", J_INT64, v))
        else:
            raw = json.dumps(v).encode()
            out.append(struct.pack("<BI", J_RAW, len(raw)) + raw)
    elif isinstance(v, float):
        out.append(struct.pack("<Bd", J_FLOAT64, v))
    elif isinstance(v, str):
        raw = v.encode("utf-8")
        out.append(struct.pack("<BI", J_TEXT, len(raw)) + raw)
    else:
        raw = json.dumps(v).encode()
        out.append(struct.pack("<BI", J_RAW, len(raw)) + raw)


def _unpack_value(data: bytes, pos: int):
    try:
        tag = data[pos]
        pos += 1
        if tag == J_NULL:
            return None, pos
        if tag == J_BOOL:
            return bool(data[pos]), pos + 1
        if tag == J_INT32:
            return struct.unpack_from("<i", data, pos)[0], pos + 4
        if tag == J_INT64:
            return struct.unpack_from("<q", data, pos)[0], pos + 8
        if tag == J_FLOAT64:
            return struct.unpack_from("<d", data, pos)[0], pos + 8
        if tag in (J_TEXT, J_RAW):
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + n > len(data):
                raise FormatError("value runs past end of frame")
            raw = data[pos : pos + n].decode("utf-8")
            return (raw if tag == J_TEXT else json.loads(raw)), pos + n
    except (IndexError, struct.error):
        raise FormatError("value truncated") from None
    raise FormatError(f"unknown value tag {tag}")


def _pack_keys(keys: Sequence[str]) -> bytes:
    if len(keys) > MAX_U16:
        raise FormatError("too many keys")
    out = [_U16.pack(len(keys))]
    for k in keys:
        raw = k.encode("utf-8")
        if len(raw) > MAX_U16:
            raise FormatError("key longer than 65535 bytes")
        out.append(_U16.pack(len(raw)) + raw)
    return b"".join(out)


def _unpack_keys(data: bytes) -> list[str]:
    try:
        (n,) = _U16.unpack_from(data, 0)
        pos = 2
        keys = []
        for _ in range(n):
            (length,) = _U16.unpack_from(data, pos)
            pos += 2
            if pos + length > len(data):
                raise FormatError("key runs past end of frame")
            keys.append(data[pos : pos + length].decode("utf-8"))
            pos += length
    except struct.error:
        raise FormatError("key list truncated") from None
    if pos != len(data):
        raise FormatError("trailing bytes after key list")
    return keys


def _is_subsequence(keys: Sequence[str], header: Sequence[str]) -> bool:
    it = iter(header)
    return all(k in it for k in keys)


@dataclass
class KeyHeader:
    keys: list[str] = field(default_factory=list)
    extended: bool = False

    def extend(self, new_keys: Sequence[str]) -> None:
        for k in new_keys:
            if k in self.keys:
                raise FormatError(f"key {k!r} already in header")
            self.keys.append(k)
        if new_keys:
            self.extended = True


Frame = tuple[FrameType, bytes]


class JsonDedupEncoder:
    """Key-header state machine for a stream of flat JSON objects."""

    def __init__(self, block_rows: int = 4096):
        self.block_rows = block_rows
        self.header: KeyHeader | None = None
        self._key_set: set[str] = set()
        self._rows: list[bytes] = []

    def _flush(self) -> list[Frame]:
        if not self._rows:
            return []
        payload = _U32.pack(len(self._rows)) + b"".join(self._rows)
        self._rows = []
        return [(FrameType.DATA, payload)]

    def _verbatim(self, doc: dict) -> list[Frame]:
        text = json.dumps(doc, ensure_ascii=False, allow_nan=True)
        return self._flush() + [(FrameType.VERBATIM_ROW, text.encode("utf-8"))]

    def _bitmap_row(self, doc: dict) -> Frame:
        keys = self.header.keys
        bitmap = bytearray((len(keys) + 7) // 8)
        out: list[bytes] = []
        for i, k in enumerate(keys):
            if k in doc:
                bitmap[i // 8] |= 1 << (i % 8)
                _pack_value(doc[k], out)
        return FrameType.BITMAP_ROW, bytes(bitmap) + b"".join(out)

    def encode(self, doc) -> list[Frame]:
        if not isinstance(doc, dict):
            raise FormatError(f"top-level JSON value must be an object, got {type(doc).__name__}")
        if not all(isinstance(v, _SCALARS) for v in doc.values()):
            return self._verbatim(doc)
        keys = list(doc)
        if self.header is None:
            self.header = KeyHeader(list(keys))
            self._key_set = set(keys)
            frames: list[Frame] = [(FrameType.KEY_HEADER, _pack_keys(keys))]
            return frames + self._bare(doc)
        header = self.header.keys
        if keys == header:
            return self._bare(doc)
        doc_set = set(keys)
        if doc_set <= self._key_set:
            if _is_subsequence(keys, header):
                return self._flush() + [self._bitmap_row(doc)]
            return self._verbatim(doc)
        if self._key_set <= doc_set:
            new_keys = [k for k in keys if k not in self._key_set]
            if _is_subsequence(keys, header + new_keys):
                frames = self._flush() + [(FrameType.KEY_EXTEND, _pack_keys(new_keys))]
                self.header.extend(new_keys)
                self._key_set.update(new_keys)
                return frames + [self._bitmap_row(doc)]
        # disjoint or partially overlapping keys: send this one with its keys
        return self._verbatim(doc)

    def _bare(self, doc: dict) -> list[Frame]:
        out: list[bytes] = []
        for v in doc.values():
            _pack_value(v, out)
        self._rows.append(b"".join(out))
        if len(self._rows) >= self.block_rows:
            return self._flush()
        return []

    def finish(self) -> list[Frame]:
        return self._flush()


def json_dedup_encode(docs: Iterable, block_rows: int = 4096) -> Iterator[Frame]:
    enc = JsonDedupEncoder(block_rows)
    for doc in docs:
        yield from enc.encode(doc)
    yield from enc.finish()


class JsonDedupDecoder:
    """Reverses :class:`JsonDedupEncoder`."""

    def __init__(self):
        self.header: list[str] | None = None
        self.finished = False

    def _need_header(self, what: str) -> list[str]:
        if self.header is None:
            raise FormatError(f"{what} frame before key header")
        return self.header

    def decode(self, frame_type, payload: bytes) -> list[dict]:
        try:
            frame_type = FrameType(frame_type)
        except ValueError:
            raise FormatError(f"unknown frame type {frame_type}") from None
        if self.finished:
            raise FormatError("frame after end of stream")
        if frame_type == FrameType.KEY_HEADER:
            if self.header is not None:
                raise FormatError("second key header")
            self.header = _unpack_keys(payload)
            return []
        if frame_type == FrameType.KEY_EXTEND:
            header = self._need_header("key extension")
            header.extend(_unpack_keys(payload))
            return []
        if frame_type == FrameType.VERBATIM_ROW:
            doc = json.loads(payload.decode("utf-8"))
            if not isinstance(doc, dict):
                raise FormatError("verbatim row is not an object")
            return [doc]
        if frame_type == FrameType.DATA:
            header = self._need_header("data")
            if len(payload) < 4:
                raise FormatError("data frame truncated")
            (n,) = _U32.unpack_from(payload, 0)
            pos = 4
            docs = []
            for _ in range(n):
                doc = {}
                for k in header:
                    doc[k], pos = _unpack_value(payload, pos)
                docs.append(doc)
            if pos != len(payload):
                raise FormatError("trailing bytes after data rows")
            return docs
        if frame_type == FrameType.BITMAP_ROW:
            header = self._need_header("bitmap row")
            nbytes = (len(header) + 7) // 8
            if len(payload) < nbytes:
                raise FormatError("bitmap shorter than key header")
            bitmap = payload[:nbytes]
            if len(header) % 8 and bitmap and bitmap[-1] >> (len(header) % 8):
                raise FormatError("bitmap has bits beyond the key header")
            pos = nbytes
            doc = {}
            for i, k in enumerate(header):
                if bitmap[i // 8] >> (i % 8) & 1:
                    doc[k], pos = _unpack_value(payload, pos)
            if pos != len(payload):
                raise FormatError("bitmap row length does not match its bitmap")
            return [doc]
        self.finished = True
        return []


def json_dedup_decode(frames: Iterable[Frame]) -> Iterator[dict]:
    dec = JsonDedupDecoder()
    for ftype, payload in frames:
        yield from dec.decode(ftype, payload)
        if dec.finished:
            return


def dumps_json_line(doc: dict) -> str:
    """The reference one-object-per-line rendering."""
    return json.dumps(doc, ensure_ascii=False) + "\n"


def read_json_lines(stream: IO[str]) -> Iterator:
    for line in stream:
        if line.strip():
            yield json.loads(line)


def encoded_size(frames: Iterable[Frame]) -> int:
    """Bytes the frames occupy on the wire, envelope included."""
    return sum(5 + len(payload) for _, payload in frames)


__all__ = [
    "CsvInterceptor",
    "CsvWriter",
    "DelimiterReport",
    "FormatError",
    "JsonDedupDecoder",
    "JsonDedupEncoder",
    "KeyHeader",
    "NoDelimiterFound",
    "WireError",
    "csv_intercept_export",
    "csv_reconstruct_import",
    "format_rows",
    "infer_delimiter",
    "json_dedup_decode",
    "json_dedup_encode",
    "parse_lines",
    "read_csv_rows",
    "records_as_augtext",
    "typed_rows",
]
