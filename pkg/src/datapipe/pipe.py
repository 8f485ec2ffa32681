"""Data-pipe endpoints.

:func:`open_output` and :func:`open_input` are the stream factory: a plain
path gives a CSV file sink/source, a reserved target (``db://NAME``) gives a
socket-backed pipe that rendezvouses through the worker directory. Both
kinds of endpoint expose the same methods, so engine code written against
files runs unchanged over a pipe.
"""

from __future__ import annotations

import io
import logging
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from . import directory as dirmod
from . import formatopt, wire
from .augtext import AugText
from .directory import DirectoryClient, FilePath, ReservedTarget, Side
from .wire import Codec, FormatCode, FrameType, RecordBatch, Schema, TypeCode

log = logging.getLogger(__name__)

TEXT_CHUNK = 1 << 16
_TEXT_SCHEMA = Schema.of(TypeCode.TEXT)


class TransferError(Exception):
    """A transfer could not complete; never a silently truncated result."""


class SchemaMismatch(TransferError):
    pass


class VerificationError(TransferError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass
class PipeConfig:
    format_code: FormatCode = FormatCode.COLUMN
    compression_code: Codec = Codec.NONE
    block_rows: int = 4096
    debug_n: int | None = None
    directory: tuple[str, int] | str | None = None
    delimiter: str | None = ","
    # ship exported text as-is (redirection only, no format optimization)
    passthrough: bool = False
    query_id: str | None = None
    reserved_template: str | None = None
    listen_host: str = "127.0.0.1"
    accept_timeout: float = dirmod.DEFAULT_LOOKUP_TIMEOUT

    def __post_init__(self) -> None:
        self.format_code = FormatCode(self.format_code)
        self.compression_code = Codec(self.compression_code)
        if self.block_rows < 1:
            raise ValueError("block_rows must be at least 1")
        if self.compression_code == Codec.RLE and self.format_code != FormatCode.COLUMN:
            raise wire.CodecError("RLE requires the COLUMN format")

    def directory_client(self) -> DirectoryClient:
        addr = self.directory or dirmod.directory_from_env()
        if addr is None:
            raise TransferError(f"no directory address; pass one or set {dirmod.ENV_DIRECTORY}")
        return DirectoryClient(addr)


@dataclass
class Metrics:
    rows: int = 0
    wire_bytes: int = 0
    frames: int = 0
    started: float = field(default_factory=time.perf_counter)
    finished: float | None = None

    @property
    def duration(self) -> float:
        end = self.finished if self.finished is not None else time.perf_counter()
        return end - self.started

    def as_dict(self) -> dict:
        return {"rows": self.rows, "wire_bytes": self.wire_bytes, "frames": self.frames,
                "duration": self.duration}


# -- file endpoints ------------------------------------------------------


class FileSink:
    """Baseline sink: canonical CSV text on disk."""

    def __init__(self, path: str | Path, cfg: PipeConfig | None = None, schema: Schema | None = None):
        self.cfg = cfg or PipeConfig()
        self.path = Path(path)
        self.schema = schema
        self.delim = self.cfg.delimiter or ","
        self._f = open(self.path, "w", encoding="utf-8", newline="")
        self.metrics = Metrics()
        self.closed = False

    def write_rows(self, rows: list[tuple]) -> None:
        if self.schema is None:
            raise SchemaMismatch("file sink needs a schema before typed rows")
        text = formatopt.format_rows(rows, self.schema.types, self.delim)
        self._f.write(text)
        self.metrics.rows += len(rows)
        self.metrics.wire_bytes += len(text.encode("utf-8")) if not text.isascii() else len(text)

    def write_batch(self, batch: RecordBatch) -> None:
        if self.schema is None:
            self.schema = batch.schema
        elif batch.schema.types != self.schema.types:
            raise SchemaMismatch("batch schema differs from the sink's")
        self.write_rows(batch.rows)

    def write_text(self, chunk) -> None:
        text = chunk.materialize() if isinstance(chunk, AugText) else chunk
        self._f.write(text)
        self.metrics.wire_bytes += len(text.encode("utf-8"))
        self.metrics.rows += text.count("\n")

    def write_documents(self, docs: Iterable[dict]) -> None:
        for doc in docs:
            self.write_text(formatopt.dumps_json_line(doc))

    def close(self) -> None:
        if not self.closed:
            self._f.close()
            self.closed = True
            self.metrics.finished = time.perf_counter()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FileSource:
    def __init__(self, path: str | Path, cfg: PipeConfig | None = None, schema: Schema | None = None):
        self.cfg = cfg or PipeConfig()
        self.path = Path(path)
        self.schema = schema
        self.delim = self.cfg.delimiter or ","
        self.metrics = Metrics()

    def batches(self) -> Iterator[RecordBatch]:
        if self.schema is None:
            raise SchemaMismatch("file source needs a schema to parse typed rows")
        self.metrics.wire_bytes = self.path.stat().st_size
        with open(self.path, encoding="utf-8", newline="") as f:
            for rows in formatopt.read_csv_rows(f, self.schema, self.delim, self.cfg.block_rows):
                self.metrics.rows += len(rows)
                yield RecordBatch(self.schema, rows)
        self.metrics.finished = time.perf_counter()

    def rows(self) -> Iterator[tuple]:
        for batch in self.batches():
            yield from batch.rows

    def text(self) -> Iterator[str]:
        with open(self.path, encoding="utf-8", newline="") as f:
            while chunk := f.read(TEXT_CHUNK):
                self.metrics.wire_bytes += len(chunk)
                yield chunk
        self.metrics.finished = time.perf_counter()

    def documents(self) -> Iterator[dict]:
        with open(self.path, encoding="utf-8") as f:
            yield from formatopt.read_json_lines(f)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- pipe endpoints ------------------------------------------------------


class PipeSink:
    """Exporting end of a pipe over any writable binary stream."""

    def __init__(self, stream: BinaryIO, cfg: PipeConfig, query_id: str = "",
                 schema: Schema | None = None, on_close=None):
        self.cfg = cfg
        self.query_id = query_id
        self._stream = stream
        self._on_close = on_close
        self.schema: Schema | None = None
        self.metrics = Metrics()
        self._pending: list[tuple] = []
        self._text: list[str] = []
        self._text_len = 0
        self._interceptor: formatopt.CsvInterceptor | None = None
        self._json: formatopt.JsonDedupEncoder | None = None
        self._sniff: list[AugText] = []
        self.closed = False
        if schema is not None:
            self._start(schema)

    def _send(self, data: bytes) -> None:
        try:
            self._stream.write(data)
        except OSError as exc:
            raise TransferError(f"pipe write failed: {exc}") from exc
        self.metrics.wire_bytes += len(data)

    def _start(self, schema: Schema, format_code: FormatCode | None = None,
               codec: Codec | None = None) -> None:
        if self.schema is not None:
            if schema.types != self.schema.types:
                raise SchemaMismatch("schema changed mid-stream")
            return
        self.schema = schema
        self._format = self.cfg.format_code if format_code is None else format_code
        self._codec = self.cfg.compression_code if codec is None else codec
        header = wire.TransferHeader(self._format, self._codec, self.query_id, schema)
        self._send(wire.encode_header(header))

    def _frame(self, frame_type: FrameType, payload: bytes = b"") -> None:
        self._send(wire.encode_frame(frame_type, payload))
        self.metrics.frames += 1

    def _emit(self, rows: list[tuple]) -> None:
        batch = RecordBatch(self.schema, rows)
        try:
            payload = wire.encode_batch(batch, self._format, self._codec)
        except wire.TypeMismatch as exc:
            raise SchemaMismatch(str(exc)) from exc
        self._frame(FrameType.DATA, payload)
        self.metrics.rows += len(rows)

    def write_rows(self, rows: list[tuple]) -> None:
        if self.schema is None:
            raise SchemaMismatch("pipe sink needs a schema before typed rows")
        pending = self._pending
        pending.extend(rows)
        block = self.cfg.block_rows
        if len(pending) >= block:
            start = 0
            while len(pending) - start >= block:
                self._emit(pending[start : start + block])
                start += block
            del pending[:start]

    def write_batch(self, batch: RecordBatch) -> None:
        self._start(batch.schema)
        if batch.schema.types != self.schema.types:
            raise SchemaMismatch("batch schema differs from the transfer header")
        self.write_rows(batch.rows)

    def write_text(self, chunk) -> None:
        """Accept exported text; typed components are intercepted unless passthrough."""
        if self.cfg.passthrough:
            self._passthrough(chunk)
        else:
            self._intercept(AugText.from_value(chunk))

    def _passthrough(self, chunk) -> None:
        text = chunk.materialize() if isinstance(chunk, AugText) else chunk
        if self.schema is None:
            self._start(_TEXT_SCHEMA, FormatCode.ROW, self._row_codec())
        self._text.append(text)
        self._text_len += len(text)
        if self._text_len >= TEXT_CHUNK:
            self._flush_text()

    def _row_codec(self) -> Codec:
        codec = self.cfg.compression_code
        return Codec.NONE if codec == Codec.RLE else codec

    def _flush_text(self) -> None:
        if self._text:
            payload = wire.compress(wire.encode_block_row(RecordBatch(_TEXT_SCHEMA, [("".join(self._text),)])),
                                    self._codec, _TEXT_SCHEMA, FormatCode.ROW)
            self._frame(FrameType.DATA, payload)
            self._text = []
            self._text_len = 0

    def _intercept(self, chunk: AugText) -> None:
        if self._interceptor is None:
            delim = self.cfg.delimiter
            if delim is None:
                # infer from whole records before committing to a delimiter
                self._sniff.append(chunk)
                if "\n" not in chunk.materialize():
                    return
                delim = formatopt.infer_delimiter(self._sniff).delimiter
                log.info("inferred delimiter %r", delim)
            self._interceptor = formatopt.CsvInterceptor(delim)
            chunks, self._sniff = self._sniff or [chunk], []
        else:
            chunks = [chunk]
        for c in chunks:
            rows = self._interceptor.feed(c)
            if rows:
                if self.schema is None:
                    self._start(self._interceptor.schema)
                self.write_rows(rows)

    def write_documents(self, docs: Iterable[dict]) -> None:
        if self._json is None:
            self._start(Schema(), FormatCode.ROW, Codec.NONE)
            self._json = formatopt.JsonDedupEncoder(self.cfg.block_rows)
        for doc in docs:
            for ftype, payload in self._json.encode(doc):
                self._frame(ftype, payload)
                if ftype != FrameType.KEY_HEADER and ftype != FrameType.KEY_EXTEND:
                    self.metrics.rows += 1 if ftype != FrameType.DATA else int.from_bytes(payload[:4], "little")

    def close(self) -> None:
        if self.closed:
            return
        try:
            if self._sniff:
                # stream ended before a full record; fall back to configured/comma
                self._interceptor = formatopt.CsvInterceptor(formatopt.infer_delimiter(self._sniff).delimiter)
                sniffed, self._sniff = self._sniff, []
                for c in sniffed:
                    self._intercept(c)
            if self._interceptor is not None:
                rows = self._interceptor.close()
                if rows:
                    if self.schema is None:
                        self._start(self._interceptor.schema)
                    self.write_rows(rows)
            if self._json is not None:
                for ftype, payload in self._json.finish():
                    self._frame(ftype, payload)
                    self.metrics.rows += int.from_bytes(payload[:4], "little")
            if self.schema is None:
                self._start(Schema())
            self._flush_text()
            if self._pending:
                self._emit(self._pending)
                self._pending = []
            self._frame(FrameType.END_OF_STREAM)
            self._stream.flush()
        finally:
            self.closed = True
            self.metrics.finished = time.perf_counter()
            if self._on_close is not None:
                self._on_close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *exc):
        if exc_type is None:
            self.close()
        else:
            # no end-of-stream on failure: the importer must see a broken transfer
            self.closed = True
            if self._on_close is not None:
                self._on_close()


class PipeSource:
    """Importing end of a pipe over any readable binary stream."""

    def __init__(self, stream: BinaryIO | None, cfg: PipeConfig, query_id: str | None = None,
                 connect=None, on_close=None):
        self.cfg = cfg
        self.query_id = query_id
        self._stream = stream
        self._connect = connect
        self._on_close = on_close
        self.header: wire.TransferHeader | None = None
        self.metrics = Metrics()
        self._done = False

    def _read(self, n: int) -> bytes:
        try:
            data = wire.read_exact(self._stream, n)
        except wire.TruncatedInput as exc:
            raise TransferError(f"connection closed mid-transfer: {exc}") from None
        except OSError as exc:
            raise TransferError(f"pipe read failed: {exc}") from exc
        self.metrics.wire_bytes += n
        return data

    def open(self) -> wire.TransferHeader:
        """Accept the connection (if needed) and read the transfer header."""
        if self.header is None:
            if self._stream is None:
                self._stream = self._connect()
            counting = _CountingReader(self._stream)
            try:
                header = wire.read_header(counting)
            except wire.TruncatedInput as exc:
                raise TransferError(f"connection closed during handshake: {exc}") from None
            finally:
                self.metrics.wire_bytes += counting.count
            if self.query_id is not None and header.query_id not in ("", self.query_id):
                raise TransferError(f"handshake for query {header.query_id!r}, expected {self.query_id!r}")
            self.header = header
        return self.header

    @property
    def schema(self) -> Schema:
        return self.open().schema

    def frames(self) -> Iterator[tuple[FrameType, bytes]]:
        self.open()
        while not self._done:
            ftype, length = wire._FRAME_HEAD.unpack(self._read(5))
            try:
                ftype = FrameType(ftype)
            except ValueError:
                raise wire.UnknownCode(f"unknown frame type {ftype}") from None
            if ftype == FrameType.END_OF_STREAM:
                if length:
                    raise wire.WireError("END_OF_STREAM frame with non-empty payload")
                self._finish()
                return
            self.metrics.frames += 1
            yield ftype, self._read(length)

    def _finish(self) -> None:
        self._done = True
        self.metrics.finished = time.perf_counter()
        self.close()

    def batches(self) -> Iterator[RecordBatch]:
        h = self.open()
        for ftype, payload in self.frames():
            if ftype != FrameType.DATA:
                raise wire.WireError(f"unexpected {ftype.name} frame in a record stream")
            batch = wire.decode_batch(payload, h.schema, h.format_code, h.compression_code)
            self.metrics.rows += len(batch.rows)
            yield batch

    def rows(self) -> Iterator[tuple]:
        for batch in self.batches():
            yield from batch.rows

    def text(self) -> Iterator[str]:
        """The exported text, rebuilt from typed values when needed."""
        if self.cfg.passthrough:
            for batch in self.batches():
                for (chunk,) in batch.rows:
                    yield chunk
            return
        yield from formatopt.csv_reconstruct_import(self.batches(), self.cfg.delimiter or ",")

    def records(self) -> Iterator[AugText]:
        return formatopt.records_as_augtext(self.batches(), self.cfg.delimiter or ",")

    def documents(self) -> Iterator[dict]:
        self.open()
        dec = formatopt.JsonDedupDecoder()
        for ftype, payload in self.frames():
            for doc in dec.decode(ftype, payload):
                self.metrics.rows += 1
                yield doc

    def close(self) -> None:
        if self._on_close is not None:
            on_close, self._on_close = self._on_close, None
            on_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _CountingReader:
    def __init__(self, stream: BinaryIO):
        self.stream = stream
        self.count = 0

    def read(self, n: int) -> bytes:
        data = self.stream.read(n)
        self.count += len(data)
        return data


# -- factory -------------------------------------------------------------


def _query_for(target: ReservedTarget, cfg: PipeConfig) -> str:
    return target.resolved_query(cfg.query_id)


def open_output(target: str, cfg: PipeConfig | None = None, worker_index: int = 0,
                schema: Schema | None = None):
    """A record sink for *target*: a CSV file or a pipe to a registered importer."""
    cfg = cfg or PipeConfig()
    parsed = dirmod.parse_target(target, cfg.reserved_template)
    if isinstance(parsed, FilePath):
        return FileSink(parsed.path, cfg, schema)
    query_id = _query_for(parsed, cfg)
    client = cfg.directory_client()
    client.declare(query_id, Side.EXPORT, parsed.worker_count)
    entry = client.lookup(query_id, worker_index)
    try:
        sock = socket.create_connection((entry.hostname, entry.port), timeout=cfg.accept_timeout)
    except OSError as exc:
        raise TransferError(f"cannot connect to importer {entry.hostname}:{entry.port}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    stream = sock.makefile("wb", buffering=1 << 16)

    def _close():
        try:
            stream.close()
        except OSError:
            pass
        sock.close()

    sink = PipeSink(stream, cfg, query_id, schema, on_close=_close)
    if cfg.debug_n:
        log.debug("debug mirroring requested on export; wrap with debug_mirror()")
    return sink


def open_input(target: str, cfg: PipeConfig | None = None, worker_index: int = 0,
               schema: Schema | None = None):
    """A record source for *target*; pipe sources register before returning."""
    cfg = cfg or PipeConfig()
    parsed = dirmod.parse_target(target, cfg.reserved_template)
    if isinstance(parsed, FilePath):
        return FileSource(parsed.path, cfg, schema)
    query_id = _query_for(parsed, cfg)
    client = cfg.directory_client()
    listener = socket.create_server((cfg.listen_host, 0))
    try:
        client.declare(query_id, Side.IMPORT, parsed.worker_count)
        host, port = listener.getsockname()[:2]
        client.register(query_id, worker_index, host, port)
    except BaseException:
        listener.close()
        raise
    state: dict = {}

    def _connect() -> BinaryIO:
        listener.settimeout(cfg.accept_timeout)
        try:
            conn, _ = listener.accept()
        except socket.timeout:
            raise TransferError(f"no exporter connected within {cfg.accept_timeout:g} s") from None
        finally:
            listener.close()
        conn.settimeout(cfg.accept_timeout)
        state["conn"] = conn
        return conn.makefile("rb", buffering=1 << 16)

    def _close():
        listener.close()
        conn = state.get("conn")
        if conn is not None:
            conn.close()

    return PipeSource(None, cfg, query_id, connect=_connect, on_close=_close)


# -- verification proxy --------------------------------------------------


_INT_FIELD = re.compile(r"-?[0-9]+\Z")


def infer_csv_schema(line: str, delim: str = ",") -> Schema:
    """Column types guessed from one canonical CSV line."""
    types = []
    for f in formatopt.split_fields(line.rstrip("\n"), delim):
        if _INT_FIELD.match(f):
            types.append(TypeCode.INT64)
        elif f in ("true", "false"):
            types.append(TypeCode.BOOL)
        else:
            try:
                float(f)
                types.append(TypeCode.FLOAT64 if "_" not in f else TypeCode.TEXT)
            except ValueError:
                types.append(TypeCode.TEXT)
    return Schema.of(*types)


@dataclass
class ProxyReport:
    received_rows: int = 0
    sent_rows: int = 0
    out_bytes: int = 0
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def proxy_receive(listen: str, out_path: str | Path, cfg: PipeConfig, report: ProxyReport) -> None:
    """Import from *listen* and write what arrives to *out_path* as canonical CSV."""
    try:
        with open_input(listen, cfg) as src, open(out_path, "w", encoding="utf-8", newline="") as out:
            for chunk in src.text():
                out.write(chunk)
            report.received_rows = src.metrics.rows
        report.out_bytes = Path(out_path).stat().st_size
    except Exception as exc:  # surfaced in the report
        report.errors.append(f"receive: {exc}")


def proxy_send(send: str, in_path: str | Path, cfg: PipeConfig, report: ProxyReport,
               schema: Schema | None = None) -> None:
    """Read *in_path* from disk and export it through a pipe to *send*."""
    delim = cfg.delimiter or ","
    try:
        with open(in_path, encoding="utf-8", newline="") as f:
            first = f.readline()
            if schema is None:
                schema = infer_csv_schema(first, delim) if first else Schema()
            sink = open_output(send, cfg, schema=schema)
            try:
                if first:
                    sink.write_rows(formatopt.parse_lines([first], schema.types, delim))
                for rows in formatopt.read_csv_rows(f, schema, delim, cfg.block_rows):
                    sink.write_rows(rows)
                sink.close()
            except BaseException:
                sink.__exit__(Exception, None, None)
                raise
            report.sent_rows = sink.metrics.rows
    except Exception as exc:
        report.errors.append(f"send: {exc}")


def run_verification_proxy(cfg: PipeConfig, listen: str | None = None, out_path: str | Path | None = None,
                           send: str | None = None, in_path: str | Path | None = None,
                           schema: Schema | None = None) -> ProxyReport:
    """Stand in for a remote engine, mirroring pipe traffic to and from files.

    Data arriving on *listen* is written to *out_path*; rows read from
    *in_path* are transmitted to *send*. Both directions run concurrently.
    """
    report = ProxyReport()
    threads = []
    if listen is not None and out_path is not None:
        threads.append(threading.Thread(target=proxy_receive, args=(listen, out_path, cfg, report)))
    if send is not None and in_path is not None:
        threads.append(threading.Thread(target=proxy_send, args=(send, in_path, cfg, report, schema)))
    if not threads:
        raise ValueError("proxy needs listen+out_path and/or send+in_path")
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return report


# -- probabilistic debug mode --------------------------------------------


class DebugMirrorSink:
    """Writes the first *n* exported rows to *path* before transmitting them."""

    def __init__(self, sink, n: int, path: str | Path, delim: str = ","):
        self.sink = sink
        self.n = n
        self.path = Path(path)
        self.delim = delim
        self._left = n
        self._f = open(self.path, "w", encoding="utf-8", newline="") if n > 0 else None

    @property
    def metrics(self) -> Metrics:
        return self.sink.metrics

    def _mirror(self, rows: list[tuple], schema: Schema) -> None:
        if self._f is not None and self._left > 0:
            head = rows[: self._left]
            self._f.write(formatopt.format_rows(head, schema.types, self.delim))
            # disk copy must be complete before the same rows go on the wire
            self._f.flush()
            self._left -= len(head)

    def write_rows(self, rows: list[tuple]) -> None:
        self._mirror(rows, self.sink.schema)
        self.sink.write_rows(rows)

    def write_batch(self, batch: RecordBatch) -> None:
        self._mirror(batch.rows, batch.schema)
        self.sink.write_batch(batch)

    def close(self) -> None:
        if self._f is not None:
            self._f.close()
            self._f = None
        self.sink.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class Verdict:
    ok: bool
    checked: int
    first_mismatch: int | None = None


class DebugCompareSource:
    """Compares the first *n* imported rows with the exporter's disk copy."""

    def __init__(self, source, path: str | Path, n: int, delim: str = ","):
        self.source = source
        self.path = Path(path)
        self.n = n
        self.delim = delim
        self.verdict: Verdict | None = None
        self.checked = 0

    @property
    def metrics(self) -> Metrics:
        return self.source.metrics

    @property
    def schema(self) -> Schema:
        return self.source.schema

    def _fail(self, index: int, why: str):
        self.verdict = Verdict(False, self.checked, index)
        self.source.close()
        raise VerificationError(f"debug verification failed at record {index}: {why}", index)

    def batches(self) -> Iterator[RecordBatch]:
        if self.n <= 0:
            yield from self.source.batches()
            self.verdict = Verdict(True, 0)
            return
        f = None
        try:
            for batch in self.source.batches():
                if self.checked < self.n:
                    if f is None:
                        f = open(self.path, encoding="utf-8", newline="")
                    head = batch.rows[: self.n - self.checked]
                    got = formatopt.format_rows(head, batch.schema.types, self.delim).splitlines(keepends=True)
                    for line in got:
                        want = f.readline()
                        if want != line:
                            self._fail(self.checked, f"pipe gave {line!r}, disk has {want!r}")
                        self.checked += 1
                yield batch
            if f is not None and self.checked < self.n:
                extra = f.readline()
                if extra:
                    self._fail(self.checked, f"disk has {extra!r} but the pipe ended")
        finally:
            if f is not None:
                f.close()
        self.verdict = Verdict(True, self.checked)

    def rows(self) -> Iterator[tuple]:
        for batch in self.batches():
            yield from batch.rows

    def close(self) -> None:
        self.source.close()


def debug_mirror(sink, n: int, path: str | Path, delim: str = ",") -> DebugMirrorSink:
    return DebugMirrorSink(sink, n, path, delim)


def debug_compare(source, path: str | Path, n: int, delim: str = ",") -> DebugCompareSource:
    return DebugCompareSource(source, path, n, delim)


def export_batches(sink, batches: Iterable[RecordBatch]) -> Metrics:
    """Send every batch and close the sink; returns its metrics."""
    for batch in batches:
        sink.write_batch(batch)
    sink.close()
    return sink.metrics


def import_batches(source) -> list[RecordBatch]:
    return list(source.batches())


class _KeepOpen(io.BytesIO):
    def close(self) -> None:
        pass


def memory_pipe(cfg: PipeConfig, query_id: str = ""):
    """A sink writing into memory plus a factory for sources over those bytes."""
    buf = _KeepOpen()
    sink = PipeSink(buf, cfg, query_id)

    def source(data: bytes | None = None) -> PipeSource:
        return PipeSource(io.BytesIO(buf.getvalue() if data is None else data), cfg)

    return sink, source
