"""Desk-scale benchmark harness: mock engines, datasets, file and pipe runs.

Two mock engines stand in for real systems. Both only know how to export
rows to, and import rows from, a "file" they open through the pipe stream
factory; whether that file is on disk or is a data pipe is decided solely by
the target string. Each engine can be driven in two styles:

``writer``
    the engine serializes through a CSV writer object. Over an optimized
    pipe the writer is swapped for one that hands typed rows straight to the
    pipe (the library-substitution route).
``concat``
    the engine builds every line by string concatenation. Over an optimized
    pipe the strings are :class:`~datapipe.augtext.AugText` values and the
    pipe intercepts their typed components.

Random data comes from numpy's ``default_rng`` (PCG64) seeded with the
BenchSpec seed, drawing columns in schema order, so sizes are reproducible.
"""

from __future__ import annotations

import enum
import json
import statistics
import tempfile
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import formatopt
from .augtext import AugText
from .directory import DirectoryServer
from .pipe import FileSink, FileSource, PipeConfig, PipeSink, PipeSource, TransferError, open_input, open_output
from .wire import Codec, FormatCode, RecordBatch, Schema, TypeCode

DELIM = ","
EXPORT_BLOCK = 16384


class Mode(str, enum.Enum):
    FILE_CSV = "FILE_CSV"
    PIPE_TEXT = "PIPE_TEXT"
    PIPE_ROW = "PIPE_ROW"
    PIPE_COLUMN = "PIPE_COLUMN"


class Payload(str, enum.Enum):
    BENCH_SCHEMA = "BENCH_SCHEMA"
    INT = "INT"
    FLOAT = "FLOAT"
    STRING = "STRING"


BENCH_SCHEMA = Schema.of(
    ("key", TypeCode.INT64),
    ("int1", TypeCode.INT32), ("dbl1", TypeCode.FLOAT64),
    ("int2", TypeCode.INT32), ("dbl2", TypeCode.FLOAT64),
    ("int3", TypeCode.INT32), ("dbl3", TypeCode.FLOAT64),
)

_SWEEP_WIDTH = 4


def schema_for(payload: Payload) -> Schema:
    payload = Payload(payload)
    if payload == Payload.BENCH_SCHEMA:
        return BENCH_SCHEMA
    tc = {Payload.INT: TypeCode.INT32, Payload.FLOAT: TypeCode.FLOAT64, Payload.STRING: TypeCode.TEXT}[payload]
    return Schema.of(*[(f"c{i}", tc) for i in range(_SWEEP_WIDTH)])


@dataclass
class BenchSpec:
    n: int = 100_000
    seed: int = 1
    mode: Mode = Mode.PIPE_COLUMN
    codec: Codec = Codec.NONE
    workers: int = 1
    payload: Payload = Payload.BENCH_SCHEMA
    block_rows: int = 4096
    style: str = "writer"

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        self.codec = Codec(self.codec)
        self.payload = Payload(self.payload)
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.style not in ("writer", "concat"):
            raise ValueError(f"unknown engine style {self.style!r}")

    @property
    def effective_codec(self) -> Codec:
        """Codec actually used on the wire.

        Files are never compressed, and value-level RLE only exists for
        column blocks, so row-oriented modes fall back to NONE.
        """
        if self.mode == Mode.FILE_CSV:
            return Codec.NONE
        if self.codec == Codec.RLE and self.mode != Mode.PIPE_COLUMN:
            return Codec.NONE
        return self.codec

    def pipe_config(self, directory=None) -> PipeConfig:
        fmt = FormatCode.COLUMN if self.mode == Mode.PIPE_COLUMN else FormatCode.ROW
        return PipeConfig(format_code=fmt, compression_code=self.effective_codec,
                          block_rows=self.block_rows, directory=directory,
                          passthrough=self.mode == Mode.PIPE_TEXT, delimiter=DELIM)


@dataclass
class BenchResult:
    mode: str
    codec: str
    codec_effective: str
    n: int
    seed: int
    workers: int
    payload: str
    export_s: float
    transfer_s: float
    import_s: float
    total_s: float
    bytes: int
    rows: int
    speedup: float | None = None
    baseline: str | None = None
    imported: list = field(default=None, repr=False, compare=False)

    def key(self) -> tuple:
        return (self.n, self.seed, self.workers, self.payload)

    def record(self) -> dict:
        d = asdict(self)
        d.pop("imported")
        return d


# -- datasets ------------------------------------------------------------


def _random_strings(rng: np.random.Generator, n: int) -> list[str]:
    alphabet = np.frombuffer(b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789", dtype="S1")
    lengths = rng.integers(8, 17, size=n)
    chars = alphabet[rng.integers(0, len(alphabet), size=int(lengths.sum()))].tobytes().decode("ascii")
    ends = np.cumsum(lengths).tolist()
    starts = [0] + ends[:-1]
    return [chars[a:b] for a, b in zip(starts, ends)]


def dataset_columns(n: int, seed: int, payload: Payload = Payload.BENCH_SCHEMA) -> list[list]:
    rng = np.random.default_rng(seed)
    payload = Payload(payload)
    if payload == Payload.BENCH_SCHEMA:
        cols: list[list] = [list(range(n))]
        for _ in range(3):
            cols.append(rng.integers(0, n, size=n, endpoint=True, dtype=np.int32).tolist())
            cols.append(rng.standard_normal(n).tolist())
        return cols
    if payload == Payload.INT:
        return [rng.integers(0, n, size=n, endpoint=True, dtype=np.int32).tolist() for _ in range(_SWEEP_WIDTH)]
    if payload == Payload.FLOAT:
        return [rng.standard_normal(n).tolist() for _ in range(_SWEEP_WIDTH)]
    return [_random_strings(rng, n) for _ in range(_SWEEP_WIDTH)]


def dataset_rows(n: int, seed: int, payload: Payload = Payload.BENCH_SCHEMA) -> list[tuple]:
    cols = dataset_columns(n, seed, payload)
    return list(zip(*cols)) if n else []


def generate_dataset(n: int, seed: int, payload: Payload = Payload.BENCH_SCHEMA,
                     block_rows: int = 65536) -> Iterator[RecordBatch]:
    """The benchmark dataset as a stream of batches; fully determined by the seed."""
    schema = schema_for(payload)
    rows = dataset_rows(n, seed, payload)
    for start in range(0, n, block_rows):
        yield RecordBatch(schema, rows[start : start + block_rows])


def partition(rows: Sequence[tuple], workers: int) -> list[list[tuple]]:
    """Row *i* goes to worker ``i mod workers``."""
    return [list(rows[w::workers]) for w in range(workers)]


def rows_identical(a: Sequence[tuple], b: Sequence[tuple]) -> bool:
    """Exact equality; floats compared by bit pattern."""
    if len(a) != len(b):
        return False
    if not a:
        return True
    if any(len(x) != len(y) for x, y in zip(a[:1], b[:1])):
        return False
    for ca, cb in zip(zip(*a), zip(*b)):
        if {type(v) for v in ca} != {type(v) for v in cb}:
            return False
        if isinstance(ca[0], float):
            xa = np.asarray(ca, dtype=np.float64).view(np.uint64)
            xb = np.asarray(cb, dtype=np.float64).view(np.uint64)
            if not np.array_equal(xa, xb):
                return False
        elif ca != cb:
            return False
    return True


# -- mock engines --------------------------------------------------------


def _is_optimized_pipe(endpoint) -> bool:
    return isinstance(endpoint, (PipeSink, PipeSource)) and not endpoint.cfg.passthrough


class _TextCsvWriter:
    def __init__(self, sink, schema: Schema):
        self.sink = sink
        self.types = schema.types

    def writerows(self, rows: Sequence[tuple]) -> None:
        self.sink.write_text(formatopt.format_rows(rows, self.types, DELIM))


class _TypedCsvWriter:
    """Pipe-aware writer: typed rows bypass text entirely."""

    def __init__(self, sink, schema: Schema):
        self.sink = sink

    def writerows(self, rows: Sequence[tuple]) -> None:
        self.sink.write_rows(list(rows))


def csv_writer_for(sink, schema: Schema):
    if _is_optimized_pipe(sink):
        return _TypedCsvWriter(sink, schema)
    return _TextCsvWriter(sink, schema)


def iter_lines(chunks: Iterable[str]) -> Iterator[str]:
    """Reassemble ``\\n``-terminated lines from arbitrary text chunks."""
    tail = ""
    for chunk in chunks:
        if tail:
            chunk = tail + chunk
        lines = chunk.split("\n")
        tail = lines.pop()
        yield from lines
    if tail:
        yield tail


class CsvEngine:
    """A mock engine whose only bulk IO is CSV export/import."""

    def __init__(self, schema: Schema, style: str = "writer"):
        self.schema = schema
        self.style = style
        self.kinds = schema.types

    # export ------------------------------------------------------------

    def export(self, rows: Sequence[tuple], target: str, cfg: PipeConfig, worker_index: int = 0):
        # text-shipping sinks learn their schema from the first write
        schema = None if cfg.passthrough or self.style == "concat" else self.schema
        sink = open_output(target, cfg, worker_index, schema=schema)
        try:
            if self.style == "concat":
                self._export_concat(rows, sink)
            else:
                writer = csv_writer_for(sink, self.schema)
                for start in range(0, len(rows), EXPORT_BLOCK):
                    writer.writerows(rows[start : start + EXPORT_BLOCK])
        except BaseException:
            sink.__exit__(Exception, None, None)
            raise
        sink.close()
        return sink.metrics

    def _export_concat(self, rows: Sequence[tuple], sink) -> None:
        kinds = self.kinds
        last = len(kinds) - 1
        for row in rows:
            line = AugText()
            for i, (v, k) in enumerate(zip(row, kinds)):
                if k == TypeCode.TEXT:
                    v = formatopt.escape_text(v, DELIM)
                line = line + AugText.from_value(v, k) + ("\n" if i == last else DELIM)
            sink.write_text(line)

    # import ------------------------------------------------------------

    def import_(self, source) -> list[tuple]:
        if self.style == "concat":
            return self._import_concat(source)
        if _is_optimized_pipe(source):
            return list(source.rows())
        if isinstance(source, FileSource):
            return list(source.rows())
        table: list[tuple] = []
        types = self.schema.types
        lines: list[str] = []
        for line in iter_lines(source.text()):
            lines.append(line)
            if len(lines) >= EXPORT_BLOCK:
                table.extend(formatopt.parse_lines(lines, types, DELIM))
                lines = []
        table.extend(formatopt.parse_lines(lines, types, DELIM))
        return table

    def _import_concat(self, source) -> list[tuple]:
        if _is_optimized_pipe(source):
            records: Iterable = source.records()
        else:
            records = (AugText.from_value(line) for line in iter_lines(source.text()))
        converters = []
        for k in self.kinds:
            if k == TypeCode.FLOAT64:
                converters.append(AugText.parse_float)
            elif k in (TypeCode.INT32, TypeCode.INT64):
                converters.append(AugText.parse_int)
            elif k == TypeCode.BOOL:
                converters.append(lambda a: formatopt._parse_bool(a.materialize()))
            else:
                converters.append(lambda a: formatopt.unescape_text(a.materialize()))
        width = len(converters)
        table = []
        for rec in records:
            fields = rec.split(DELIM)
            if len(fields) != width:
                raise formatopt.FormatError(f"record has {len(fields)} fields, expected {width}")
            table.append(tuple(conv(f) for conv, f in zip(converters, fields)))
        return table


# -- runs ----------------------------------------------------------------


def _result(spec: BenchSpec, export_s: float, transfer_s: float, import_s: float, total_s: float,
            nbytes: int, imported: list[list[tuple]]) -> BenchResult:
    merged = _merge(imported)
    return BenchResult(spec.mode.value, spec.codec.name, spec.effective_codec.name, spec.n, spec.seed,
                       spec.workers, spec.payload.value, export_s, transfer_s, import_s, total_s,
                       nbytes, len(merged), imported=merged)


def _merge(parts: list[list[tuple]]) -> list[tuple]:
    """Undo the round-robin partitioning."""
    if len(parts) == 1:
        return parts[0]
    total = sum(len(p) for p in parts)
    out: list = [None] * total
    for w, p in enumerate(parts):
        out[w::len(parts)] = p
    return out


def run_baseline_file(spec: BenchSpec, workdir: str | Path | None = None,
                      rows: Sequence[tuple] | None = None) -> BenchResult:
    """Export to one CSV file per worker, then import them back."""
    if spec.mode != Mode.FILE_CSV:
        raise ValueError("run_baseline_file needs mode FILE_CSV")
    schema = schema_for(spec.payload)
    rows = dataset_rows(spec.n, spec.seed, spec.payload) if rows is None else rows
    parts = partition(rows, spec.workers)
    cfg = PipeConfig(block_rows=max(spec.block_rows, EXPORT_BLOCK), delimiter=DELIM)
    engine_a = CsvEngine(schema, spec.style)
    engine_b = CsvEngine(schema, spec.style)
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        paths = [str(Path(tmp) / f"part-{w:05d}.csv") for w in range(spec.workers)]
        t0 = time.perf_counter()
        for w, path in enumerate(paths):
            engine_a.export(parts[w], path, cfg, w)
        t1 = time.perf_counter()
        nbytes = sum(Path(p).stat().st_size for p in paths)
        imported = []
        for path in paths:
            imported.append(engine_b.import_(open_input(path, cfg, schema=schema)))
        t2 = time.perf_counter()
    return _result(spec, t1 - t0, 0.0, t2 - t1, t2 - t0, nbytes, imported)


def _run_threads(targets: list) -> None:
    errors: list[BaseException] = []

    def wrap(fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # re-raised in the caller
                errors.append(exc)
        return run

    threads = [threading.Thread(target=wrap(fn), daemon=True) for fn in targets]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def run_pipe(spec: BenchSpec, directory: tuple[str, int] | None = None,
             rows: Sequence[tuple] | None = None, importers: int | None = None) -> BenchResult:
    """W importer and W exporter workers moving the dataset through pipes.

    A private directory service is started when *directory* is None.
    *importers* may exceed ``spec.workers`` to exercise stub streams.
    """
    if spec.mode == Mode.FILE_CSV:
        raise ValueError("run_pipe needs a PIPE_* mode")
    server = None
    if directory is None:
        server = DirectoryServer().start()
        directory = server.address
    try:
        return _run_pipe(spec, directory, rows, importers or spec.workers)
    finally:
        if server is not None:
            server.stop()


def _run_pipe(spec: BenchSpec, directory, rows, importers: int) -> BenchResult:
    schema = schema_for(spec.payload)
    rows = dataset_rows(spec.n, spec.seed, spec.payload) if rows is None else rows
    parts = partition(rows, spec.workers)
    cfg = spec.pipe_config(directory)
    query = uuid.uuid4().hex
    out_target = f"db://bench?workers={spec.workers}&query={query}"
    in_target = f"db://bench?workers={importers}&query={query}"
    imported: list = [None] * importers
    export_metrics: list = [None] * spec.workers
    import_times = [0.0] * importers
    engine_a = CsvEngine(schema, spec.style)
    engine_b = CsvEngine(schema, spec.style)

    t0 = time.perf_counter()
    sources = [open_input(in_target, cfg, w) for w in range(importers)]

    def importer(w):
        def run():
            with sources[w] as src:
                imported[w] = engine_b.import_(src)
            import_times[w] = time.perf_counter() - t0
        return run

    def exporter(w):
        def run():
            export_metrics[w] = engine_a.export(parts[w], out_target, cfg, w)
        return run

    _run_threads([importer(w) for w in range(importers)] + [exporter(w) for w in range(spec.workers)])
    total = time.perf_counter() - t0
    nbytes = sum(m.wire_bytes for m in export_metrics)
    export_s = max(m.duration for m in export_metrics)
    result = _result(spec, export_s, total, max(import_times), total, nbytes, imported[: spec.workers])
    stub_rows = sum(len(t) for t in imported[spec.workers :])
    if stub_rows:
        raise TransferError(f"stub importers received {stub_rows} rows")
    return result


def run(spec: BenchSpec, directory=None, rows=None) -> BenchResult:
    if spec.mode == Mode.FILE_CSV:
        return run_baseline_file(spec, rows=rows)
    return run_pipe(spec, directory, rows)


# -- reporting -----------------------------------------------------------


def bench_report(results: Sequence[BenchResult]) -> tuple[str, str]:
    """Plain-text table and JSON-lines records with speedups vs FILE_CSV."""
    baselines = [r for r in results if r.mode == Mode.FILE_CSV.value]
    pipes = [r for r in results if r.mode != Mode.FILE_CSV.value]
    if not baselines or not pipes:
        raise ValueError("a report needs at least one FILE_CSV and one pipe result")
    by_key: dict[tuple, list[BenchResult]] = {}
    for b in baselines:
        by_key.setdefault(b.key(), []).append(b)
    for r in pipes:
        if r.key() not in by_key:
            raise ValueError(f"no FILE_CSV baseline for n={r.n} seed={r.seed} workers={r.workers} payload={r.payload}")
    for key, group in by_key.items():
        base_total = statistics.median(b.total_s for b in group)
        for r in results:
            if r.key() == key:
                r.speedup = base_total / r.total_s if r.total_s > 0 else float("inf")
                r.baseline = Mode.FILE_CSV.value
    header = f"{'mode':<12} {'codec':<8} {'n':>9} {'W':>3} {'export_s':>9} {'transfer_s':>10} {'import_s':>9} {'total_s':>8} {'bytes':>12} {'speedup':>8}"
    lines = [header, "-" * len(header)]
    for r in results:
        lines.append(
            f"{r.mode:<12} {r.codec_effective:<8} {r.n:>9} {r.workers:>3} {r.export_s:>9.3f} "
            f"{r.transfer_s:>10.3f} {r.import_s:>9.3f} {r.total_s:>8.3f} {r.bytes:>12} {r.speedup:>8.2f}"
        )
    jsonl = "".join(json.dumps(r.record(), sort_keys=True) + "\n" for r in results)
    return "\n".join(lines) + "\n", jsonl


def parse_report(jsonl: str) -> list[BenchResult]:
    return [BenchResult(**json.loads(line)) for line in jsonl.splitlines() if line.strip()]


def load_bench_spec(path: str | Path) -> dict:
    """Read a ``key=value`` benchmark file; list values are comma separated."""
    out: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"bad line in {path}: {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def run_bench_file(path: str | Path, directory=None) -> list[BenchResult]:
    """Run every (mode, codec) combination a bench file lists, ``runs`` times each."""
    cfg = load_bench_spec(path)
    modes = [Mode(m.strip().upper()) for m in cfg.get("modes", cfg.get("mode", "FILE_CSV,PIPE_COLUMN")).split(",")]
    codecs = [Codec[c.strip().upper()] for c in cfg.get("codecs", cfg.get("codec", "NONE")).split(",")]
    n = int(cfg.get("n", 100_000))
    seed = int(cfg.get("seed", 1))
    workers = int(cfg.get("workers", 1))
    payload = Payload(cfg.get("payload", "BENCH_SCHEMA").upper())
    runs = int(cfg.get("runs", 1))
    block_rows = int(cfg.get("block_rows", 4096))
    style = cfg.get("style", "writer")
    rows = dataset_rows(n, seed, payload)
    results = []
    for mode in modes:
        for codec in codecs if mode != Mode.FILE_CSV else [Codec.NONE]:
            for _ in range(runs):
                spec = BenchSpec(n, seed, mode, codec, workers, payload, block_rows, style)
                r = run(spec, directory, rows)
                r.imported = None
                results.append(r)
    return results
