"""Command line entry point.

Every flag may also come from a ``key=value`` file given with ``--config``;
command-line flags win. ``PIPEGEN_DIRECTORY`` supplies the directory address
when ``--directory`` is absent.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path

from . import directory as dirmod
from .harness import (
    CsvEngine,
    Payload,
    bench_report,
    dataset_rows,
    partition,
    run_bench_file,
    schema_for,
)
from .pipe import PipeConfig, TransferError, debug_compare, debug_mirror, open_input, open_output, run_verification_proxy
from .wire import Codec, FormatCode

log = logging.getLogger("datapipe")

_FORMATS = {"text": (FormatCode.ROW, True), "row": (FormatCode.ROW, False), "column": (FormatCode.COLUMN, False)}


def read_config(path: str | Path) -> dict:
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SystemExit(f"{path}: expected key=value, got {raw!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _pipe_config(args) -> PipeConfig:
    fmt, passthrough = _FORMATS[args.format]
    codec = Codec[args.codec.upper()]
    if codec == Codec.RLE and fmt != FormatCode.COLUMN:
        log.warning("RLE needs --format column; sending uncompressed")
        codec = Codec.NONE
    return PipeConfig(format_code=fmt, compression_code=codec, block_rows=args.block_rows,
                      directory=args.directory, passthrough=passthrough, delimiter=args.delimiter,
                      reserved_template=args.reserved_template, accept_timeout=args.timeout)


def _run_workers(fn, count: int) -> list:
    results: list = [None] * count
    errors: list = []

    def run(w):
        try:
            results[w] = fn(w)
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(w,)) for w in range(count)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def _worker_target(target: str, w: int, count: int) -> str:
    # file targets get one file per worker
    if count > 1 and not isinstance(dirmod.parse_target(target), dirmod.ReservedTarget):
        return f"{target}.{w}"
    return target


def cmd_directory(args) -> int:
    server = dirmod.DirectoryServer((args.host, args.port), lookup_timeout=args.timeout)
    host, port = server.address
    print(f"directory listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_export(args) -> int:
    cfg = _pipe_config(args)
    payload = Payload(args.payload.upper())
    parts = partition(dataset_rows(args.n, args.seed, payload), args.workers)
    engine = CsvEngine(schema_for(payload), args.style)

    def export(w):
        target = _worker_target(args.target, w, args.workers)
        if args.debug_n:
            sink = debug_mirror(open_output(target, cfg, w, schema_for(payload)), args.debug_n,
                                f"{args.debug_file}.{w}", cfg.delimiter or ",")
            sink.write_rows(parts[w])
            sink.close()
            return sink.metrics
        return engine.export(parts[w], target, cfg, w)

    metrics = _run_workers(export, args.workers)
    print(json.dumps({"rows": sum(m.rows for m in metrics), "wire_bytes": sum(m.wire_bytes for m in metrics),
                      "duration_s": max(m.duration for m in metrics)}))
    return 0


def cmd_import(args) -> int:
    cfg = _pipe_config(args)
    payload = Payload(args.payload.upper())
    schema = schema_for(payload)
    engine = CsvEngine(schema, args.style)
    sources = [open_input(_worker_target(args.source, w, args.workers), cfg, w, schema)
               for w in range(args.workers)]

    def run(w):
        src = sources[w]
        if args.debug_n:
            src = debug_compare(src, f"{args.debug_file}.{w}", args.debug_n, cfg.delimiter or ",")
            return list(src.rows())
        with src:
            return engine.import_(src)

    tables = _run_workers(run, args.workers)
    if args.out:
        from .formatopt import format_rows

        with open(args.out, "w", encoding="utf-8", newline="") as f:
            for table in tables:
                f.write(format_rows(table, schema.types, cfg.delimiter or ","))
    print(json.dumps({"rows": sum(len(t) for t in tables),
                      "wire_bytes": sum(s.metrics.wire_bytes for s in sources)}))
    return 0


def cmd_bench(args) -> int:
    results = run_bench_file(args.spec, directory=args.directory)
    text, jsonl = bench_report(results)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(jsonl)
    return 0


def cmd_proxy(args) -> int:
    cfg = _pipe_config(args)
    if args.in_path and not args.send:
        raise SystemExit("--in needs --send TARGET")
    report = run_verification_proxy(cfg, listen=args.listen, out_path=args.out,
                                    send=args.send, in_path=args.in_path)
    print(json.dumps({"received_rows": report.received_rows, "sent_rows": report.sent_rows,
                      "errors": report.errors}))
    return 0 if report.ok else 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=sorted(_FORMATS), default="column")
    p.add_argument("--codec", choices=["none", "rle", "deflate"], default="none")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--block-rows", type=int, default=4096)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--payload", default="bench_schema", choices=[x.value.lower() for x in Payload])
    p.add_argument("--style", choices=["writer", "concat"], default="writer")
    p.add_argument("--timeout", type=float, default=dirmod.DEFAULT_LOOKUP_TIMEOUT)
    _global_flags(p)


def _global_flags(p: argparse.ArgumentParser) -> None:
    # also accepted after the subcommand; SUPPRESS keeps the top-level value otherwise
    p.add_argument("--directory", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    p.add_argument("--reserved-template", default=argparse.SUPPRESS, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datapipe", description="socket data pipes between mock engines")
    parser.add_argument("--config", help="key=value file supplying defaults for any flag")
    parser.add_argument("--directory", help="directory service HOST:PORT (default: $PIPEGEN_DIRECTORY)")
    parser.add_argument("--reserved-template", help="alternate reserved filename, e.g. /tmp/__reserved__[Name]")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("directory", help="worker directory service")
    dsub = d.add_subparsers(dest="action", required=True)
    serve = dsub.add_parser("serve")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=0)
    serve.add_argument("--timeout", type=float, default=dirmod.DEFAULT_LOOKUP_TIMEOUT,
                       help="seconds a lookup waits for its importer")
    serve.set_defaults(func=cmd_directory)

    e = sub.add_parser("export", help="generate a dataset and export it")
    e.add_argument("--target", required=True)
    e.add_argument("--n", type=int, default=100_000)
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--debug-n", type=int, default=0)
    e.add_argument("--debug-file", default="debug-mirror.csv")
    _common(e)
    e.set_defaults(func=cmd_export)

    i = sub.add_parser("import", help="import from a file or pipe")
    i.add_argument("--source", required=True)
    i.add_argument("--out", help="write imported rows here as CSV")
    i.add_argument("--debug-n", type=int, default=0)
    i.add_argument("--debug-file", default="debug-mirror.csv")
    _common(i)
    i.set_defaults(func=cmd_import)

    b = sub.add_parser("bench", help="run a benchmark described by a key=value file")
    b.add_argument("--spec", required=True)
    b.add_argument("--out", help="write JSON-lines results here")
    _global_flags(b)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("proxy", help="verification proxy mirroring pipes to files")
    x.add_argument("--listen", help="reserved target to receive on")
    x.add_argument("--out", help="file receiving what arrives on --listen")
    x.add_argument("--in", dest="in_path", help="file to transmit")
    x.add_argument("--send", help="reserved target to transmit --in to")
    _common(x)
    x.set_defaults(func=cmd_proxy)
    return parser


def _set_defaults(parser: argparse.ArgumentParser, defaults: dict) -> None:
    parser.set_defaults(**defaults)
    if parser._subparsers is None:
        return
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            _set_defaults(sub, defaults)


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        _set_defaults(parser, read_config(known.config))
    args = parser.parse_args(argv)
    # values from the config file arrive as strings
    for name in ("workers", "n", "seed", "block_rows", "port", "debug_n"):
        if isinstance(getattr(args, name, None), str):
            setattr(args, name, int(getattr(args, name)))
    if isinstance(getattr(args, "timeout", None), str):
        args.timeout = float(args.timeout)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.directory is None:
        env = dirmod.directory_from_env()
        args.directory = f"{env[0]}:{env[1]}" if env else None
    try:
        return args.func(args)
    except (dirmod.DirectoryError, TransferError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
