"""Worker directory: rendezvous between importing and exporting workers.

Importers listen on a socket and register ``(query_id, worker_index) ->
(host, port)``. Exporters look the entry up (blocking until it exists),
claim it, and connect. When importers outnumber exporters the directory
itself connects to each orphaned importer and sends an empty stream; when
exporters outnumber importers the query fails and registered importers are
disconnected without a header.

Protocol (one or more requests per TCP connection)::

    request  = op u8 | query_id (u16 len + utf8) | worker_index u32 | body
    REGISTER = op 1, body = hostname (u16 len + utf8) | port u16
    LOOKUP   = op 2, body = (empty)
    DECLARE  = op 3, body = side u8 (0 import, 1 export) | worker_count u32
    response = status u8 | (LOOKUP with OK only) hostname (u16 len + utf8) | port u16
    error    = status u8 (non-zero) | message (u16 len + utf8)
"""

from __future__ import annotations

import enum
import logging
import os
import re
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO
from urllib.parse import parse_qs

from . import wire

log = logging.getLogger(__name__)

DEFAULT_LOOKUP_TIMEOUT = 60.0
ENV_DIRECTORY = "PIPEGEN_DIRECTORY"

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class DirectoryError(Exception):
    pass


class TargetError(DirectoryError, ValueError):
    pass


class DuplicateRegistration(DirectoryError):
    pass


class LookupTimeout(DirectoryError):
    pass


class UnsupportedConfiguration(DirectoryError):
    pass


class AlreadyClaimed(DirectoryError):
    pass


class MalformedRequest(DirectoryError):
    pass


class Op(enum.IntEnum):
    REGISTER = 1
    LOOKUP = 2
    DECLARE = 3


class Status(enum.IntEnum):
    OK = 0
    DUPLICATE = 1
    TIMEOUT = 2
    UNSUPPORTED = 3
    MALFORMED = 4
    CLAIMED = 5


class Side(enum.IntEnum):
    IMPORT = 0
    EXPORT = 1


_STATUS_ERRORS = {
    Status.DUPLICATE: DuplicateRegistration,
    Status.TIMEOUT: LookupTimeout,
    Status.UNSUPPORTED: UnsupportedConfiguration,
    Status.MALFORMED: MalformedRequest,
    Status.CLAIMED: AlreadyClaimed,
}
_ERROR_STATUS = {cls: status for status, cls in _STATUS_ERRORS.items()}


# -- reserved targets ----------------------------------------------------


@dataclass(frozen=True)
class ReservedTarget:
    system_name: str
    workers: int | None = None
    query_id: str | None = None

    @property
    def worker_count(self) -> int:
        return self.workers if self.workers is not None else 1

    def resolved_query(self, default: str | None = None) -> str:
        """Query id for this transfer; falls back to *default*, then the name."""
        return self.query_id or default or self.system_name


@dataclass(frozen=True)
class FilePath:
    path: Path


_TEMPLATE_TOKEN = "[Name]"


def _parse_query(name: str, query: str, original: str) -> ReservedTarget:
    if not name:
        raise TargetError(f"reserved target {original!r} has an empty name")
    workers = None
    query_id = None
    if query:
        params = parse_qs(query, keep_blank_values=True, strict_parsing=False)
        if "workers" in params:
            raw = params["workers"][-1]
            if not raw.isdigit() or int(raw) < 1:
                raise TargetError(f"workers must be a positive integer, got {raw!r}")
            workers = int(raw)
        if "query" in params:
            query_id = params["query"][-1] or None
    return ReservedTarget(name, workers, query_id)


def parse_target(s: str, template: str | None = None) -> ReservedTarget | FilePath:
    """Classify *s* as a reserved pipe target or a plain file path.

    ``db://NAME[?workers=K][&query=ID]`` is always reserved. *template*, if
    given, is an alternate reserved filename with ``[Name]`` standing for
    the system name, e.g. ``\\tmp\\__reserved__[Name]``.
    """
    if s.startswith("db://"):
        rest = s[len("db://") :]
        name, _, query = rest.partition("?")
        return _parse_query(name, query, s)
    if template:
        if _TEMPLATE_TOKEN not in template:
            raise TargetError(f"reserved template {template!r} lacks {_TEMPLATE_TOKEN}")
        prefix, _, suffix = template.partition(_TEMPLATE_TOKEN)
        pattern = re.escape(prefix) + r"(?P<name>[^?]*?)" + re.escape(suffix) + r"(?:\?(?P<query>.*))?\Z"
        m = re.match(pattern, s)
        if m:
            return _parse_query(m.group("name"), m.group("query") or "", s)
    return FilePath(Path(s))


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"directory address must be HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


def directory_from_env() -> tuple[str, int] | None:
    addr = os.environ.get(ENV_DIRECTORY)
    return parse_address(addr) if addr else None


# -- registry ------------------------------------------------------------


@dataclass(frozen=True)
class DirectoryEntry:
    query_id: str
    worker_index: int
    hostname: str
    port: int


def reconcile(query_id: str, exporter_count: int, importer_count: int) -> list[int]:
    """Importer indices that get a stub end-of-stream connection.

    Exporter surplus is not supported and raises.
    """
    if exporter_count < 1 or importer_count < 1:
        raise ValueError("worker counts must be positive")
    if exporter_count > importer_count:
        raise UnsupportedConfiguration(
            f"query {query_id!r}: {exporter_count} exporters cannot feed {importer_count} importers"
        )
    return list(range(exporter_count, importer_count))


@dataclass
class _Query:
    importers: int | None = None
    exporters: int | None = None
    claimed: set = field(default_factory=set)
    failed: str | None = None
    failed_at: float = 0.0
    stubs_planned: bool = False


class Registry:
    """Thread-safe map of importer entries with blocking, claim-once lookup."""

    def __init__(self, lookup_timeout: float = DEFAULT_LOOKUP_TIMEOUT):
        self.lookup_timeout = lookup_timeout
        self._entries: dict[tuple[str, int], DirectoryEntry] = {}
        self._queries: dict[str, _Query] = {}
        self._cond = threading.Condition()
        self.on_stubs = None  # callback(query_id, [indices]) set by the server
        self.on_abort = None  # callback([entries]) for importers of a failed query

    def _query(self, query_id: str) -> _Query:
        q = self._queries.get(query_id)
        if q is not None and q.failed and time.monotonic() - q.failed_at > self.lookup_timeout:
            q = None
        if q is None:
            q = self._queries[query_id] = _Query()
        return q

    def _check_failed(self, query_id: str) -> None:
        q = self._queries.get(query_id)
        if q is not None and q.failed:
            raise UnsupportedConfiguration(q.failed)

    def declare(self, query_id: str, side: Side, count: int) -> None:
        """Record one side's worker count; reconciles once both are known."""
        if count < 1:
            raise MalformedRequest("worker count must be positive")
        stubs: list[int] = []
        dropped: list[DirectoryEntry] = []
        failure = None
        with self._cond:
            q = self._query(query_id)
            if q.failed:
                raise UnsupportedConfiguration(q.failed)
            attr = "importers" if Side(side) == Side.IMPORT else "exporters"
            current = getattr(q, attr)
            if current is not None and current != count:
                raise MalformedRequest(f"{attr} of {query_id!r} already declared as {current}")
            setattr(q, attr, count)
            if q.importers is not None and q.exporters is not None and not q.stubs_planned:
                try:
                    stubs = reconcile(query_id, q.exporters, q.importers)
                except UnsupportedConfiguration as exc:
                    q.failed = str(exc)
                    q.failed_at = time.monotonic()
                    dropped = [self._entries.pop(k) for k in [k for k in self._entries if k[0] == query_id]]
                    self._cond.notify_all()
                    failure = exc
                else:
                    q.stubs_planned = True
        if failure is not None:
            if dropped and self.on_abort is not None:
                self.on_abort(dropped)
            raise failure
        if stubs and self.on_stubs is not None:
            self.on_stubs(query_id, stubs)

    def register(self, entry: DirectoryEntry) -> None:
        key = (entry.query_id, entry.worker_index)
        with self._cond:
            self._check_failed(entry.query_id)
            q = self._query(entry.query_id)
            if key in self._entries or entry.worker_index in q.claimed:
                raise DuplicateRegistration(f"worker {entry.worker_index} of {entry.query_id!r} already registered")
            self._entries[key] = entry
            self._cond.notify_all()

    def lookup(self, query_id: str, worker_index: int, timeout: float | None = None) -> DirectoryEntry:
        """Block until the entry exists, then claim it."""
        timeout = self.lookup_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        key = (query_id, worker_index)
        with self._cond:
            while True:
                self._check_failed(query_id)
                q = self._queries.get(query_id)
                if q is not None and worker_index in q.claimed and key not in self._entries:
                    raise AlreadyClaimed(f"worker {worker_index} of {query_id!r} was already claimed")
                entry = self._entries.pop(key, None)
                if entry is not None:
                    q = self._query(query_id)
                    q.claimed.add(worker_index)
                    if q.importers is not None and len(q.claimed) >= q.importers:
                        # transfer fully matched; forget it so the name can be reused
                        del self._queries[query_id]
                    return entry
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise LookupTimeout(f"no importer registered for worker {worker_index} of {query_id!r} within {timeout:g} s")
                self._cond.wait(remaining)

    def pending(self) -> list[DirectoryEntry]:
        with self._cond:
            return list(self._entries.values())


# -- wire helpers --------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > wire.MAX_U16:
        raise MalformedRequest("string too long")
    return _U16.pack(len(raw)) + raw


def _read_str(stream: BinaryIO) -> str:
    (n,) = _U16.unpack(wire.read_exact(stream, 2))
    return wire.read_exact(stream, n).decode("utf-8")


def encode_request(op: Op, query_id: str, worker_index: int, hostname: str = "", port: int = 0,
                   side: Side = Side.IMPORT, count: int = 0) -> bytes:
    out = bytes((int(op),)) + _pack_str(query_id) + _U32.pack(worker_index)
    if op == Op.REGISTER:
        out += _pack_str(hostname) + _U16.pack(port)
    elif op == Op.DECLARE:
        out += bytes((int(side),)) + _U32.pack(count)
    return out


def send_stub(entry: DirectoryEntry, timeout: float = 10.0) -> None:
    """Connect to an orphaned importer and send an immediately empty stream."""
    header = wire.TransferHeader(wire.FormatCode.ROW, wire.Codec.NONE, entry.query_id, wire.Schema())
    with socket.create_connection((entry.hostname, entry.port), timeout=timeout) as sock:
        sock.sendall(wire.encode_header(header) + wire.encode_frame(wire.FrameType.END_OF_STREAM))


def abort_importer(entry: DirectoryEntry, timeout: float = 10.0) -> None:
    """Connect and hang up without a header so a waiting importer fails fast."""
    try:
        socket.create_connection((entry.hostname, entry.port), timeout=timeout).close()
    except OSError as exc:
        log.warning("could not abort worker %d of %r: %s", entry.worker_index, entry.query_id, exc)


# -- server --------------------------------------------------------------


class _Handler(socketserver.StreamRequestHandler):
    server: "DirectoryServer"

    def handle(self) -> None:
        registry = self.server.registry
        while True:
            op_byte = self.rfile.read(1)
            if not op_byte:
                return
            try:
                try:
                    op = Op(op_byte[0])
                    query_id = _read_str(self.rfile)
                    (index,) = _U32.unpack(wire.read_exact(self.rfile, 4))
                    if op == Op.REGISTER:
                        host = _read_str(self.rfile)
                        (port,) = _U16.unpack(wire.read_exact(self.rfile, 2))
                    elif op == Op.DECLARE:
                        side = Side(wire.read_exact(self.rfile, 1)[0])
                        (count,) = _U32.unpack(wire.read_exact(self.rfile, 4))
                except (ValueError, wire.WireError) as exc:
                    raise MalformedRequest(str(exc)) from None
                if op == Op.REGISTER:
                    registry.register(DirectoryEntry(query_id, index, host, port))
                    reply = bytes((Status.OK,))
                elif op == Op.DECLARE:
                    registry.declare(query_id, side, count)
                    reply = bytes((Status.OK,))
                else:
                    entry = registry.lookup(query_id, index)
                    reply = bytes((Status.OK,)) + _pack_str(entry.hostname) + _U16.pack(entry.port)
            except DirectoryError as exc:
                log.info("directory request failed: %s", exc)
                reply = bytes((_ERROR_STATUS.get(type(exc), Status.MALFORMED),))
                self.wfile.write(reply + _pack_str(str(exc)))
                self.wfile.flush()
                if isinstance(exc, MalformedRequest):
                    return
                continue
            self.wfile.write(reply)
            self.wfile.flush()


class DirectoryServer(socketserver.ThreadingTCPServer):
    """The directory service; ``serve_forever`` in a thread or the foreground."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int] = ("127.0.0.1", 0), lookup_timeout: float = DEFAULT_LOOKUP_TIMEOUT):
        self.registry = Registry(lookup_timeout)
        self.registry.on_stubs = self._dispatch_stubs
        self.registry.on_abort = self._dispatch_aborts
        super().__init__(address, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port

    def _dispatch_stubs(self, query_id: str, indices: list[int]) -> None:
        for index in indices:
            threading.Thread(target=self._stub, args=(query_id, index), daemon=True,
                             name=f"stub-{query_id}-{index}").start()

    def _stub(self, query_id: str, index: int) -> None:
        try:
            entry = self.registry.lookup(query_id, index)
            send_stub(entry)
            log.info("sent stub end-of-stream to worker %d of %r", index, query_id)
        except (DirectoryError, OSError) as exc:
            log.warning("stub for worker %d of %r failed: %s", index, query_id, exc)

    def _dispatch_aborts(self, entries: list[DirectoryEntry]) -> None:
        for entry in entries:
            threading.Thread(target=abort_importer, args=(entry,), daemon=True).start()

    def start(self) -> "DirectoryServer":
        threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True,
                         name="directory").start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self) -> "DirectoryServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


# -- client --------------------------------------------------------------


class DirectoryClient:
    """Blocking client for :class:`DirectoryServer`; one connection per call."""

    def __init__(self, address: tuple[str, int] | str, timeout: float | None = None):
        self.address = parse_address(address) if isinstance(address, str) else tuple(address)
        # socket timeout must outlast the server-side lookup deadline
        self.timeout = timeout

    def _call(self, request: bytes) -> tuple[Status, BinaryIO, socket.socket]:
        sock = socket.create_connection(self.address, timeout=self.timeout)
        sock.sendall(request)
        stream = sock.makefile("rb")
        try:
            status = Status(wire.read_exact(stream, 1)[0])
        except wire.TruncatedInput:
            sock.close()
            raise DirectoryError("directory closed the connection") from None
        if status != Status.OK:
            message = _read_str(stream)
            sock.close()
            raise _STATUS_ERRORS.get(status, DirectoryError)(message)
        return status, stream, sock

    def declare(self, query_id: str, side: Side, count: int) -> None:
        _, _, sock = self._call(encode_request(Op.DECLARE, query_id, 0, side=side, count=count))
        sock.close()

    def register(self, query_id: str, worker_index: int, hostname: str, port: int) -> None:
        _, _, sock = self._call(encode_request(Op.REGISTER, query_id, worker_index, hostname, port))
        sock.close()

    def lookup(self, query_id: str, worker_index: int) -> DirectoryEntry:
        _, stream, sock = self._call(encode_request(Op.LOOKUP, query_id, worker_index))
        try:
            host = _read_str(stream)
            (port,) = _U16.unpack(wire.read_exact(stream, 2))
        finally:
            sock.close()
        return DirectoryEntry(query_id, worker_index, host, port)
