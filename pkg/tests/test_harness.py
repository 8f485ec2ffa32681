import math

import pytest

from datapipe import wire
from datapipe.directory import DirectoryServer
from datapipe.harness import (
    BENCH_SCHEMA,
    BenchResult,
    BenchSpec,
    Mode,
    Payload,
    bench_report,
    dataset_rows,
    generate_dataset,
    iter_lines,
    load_bench_spec,
    parse_report,
    partition,
    rows_identical,
    run,
    run_baseline_file,
    run_bench_file,
    run_pipe,
    schema_for,
)
from datapipe.wire import Codec, FormatCode, TypeCode

MODES = list(Mode)


def result(mode, total, n=10, **kw):
    base = dict(mode=mode, codec="NONE", codec_effective="NONE", n=n, seed=1, workers=1,
                payload="BENCH_SCHEMA", export_s=total / 2, transfer_s=0.0, import_s=total / 2,
                total_s=total, bytes=100, rows=n)
    base.update(kw)
    return BenchResult(**base)


# -- datasets ----------------------------------------------------------


def test_dataset_is_deterministic():
    a = list(generate_dataset(500, 3, block_rows=128))
    b = list(generate_dataset(500, 3, block_rows=128))
    assert [len(x) for x in a] == [128, 128, 128, 116]
    for x, y in zip(a, b):
        assert wire.encode_block_column(wire.pivot(x)) == wire.encode_block_column(wire.pivot(y))
    assert dataset_rows(50, 3) != dataset_rows(50, 4)


def test_empty_dataset():
    assert list(generate_dataset(0, 1)) == []
    assert dataset_rows(0, 1) == []


def test_dataset_shape_and_ranges():
    n = 2000
    rows = dataset_rows(n, 1)
    assert [r[0] for r in rows] == list(range(n))
    for r in rows[:200]:
        wire.check_batch(wire.RecordBatch(BENCH_SCHEMA, [r]))
        assert all(0 <= r[i] <= n for i in (1, 3, 5))
        assert all(isinstance(r[i], float) for i in (2, 4, 6))
    doubles = [r[2] for r in rows]
    mean = sum(doubles) / n
    sd = math.sqrt(sum((d - mean) ** 2 for d in doubles) / n)
    assert abs(mean) < 0.1 and 0.9 < sd < 1.1


@pytest.mark.parametrize("payload", list(Payload))
def test_payload_schemas(payload):
    schema = schema_for(payload)
    rows = dataset_rows(30, 2, payload)
    wire.check_batch(wire.RecordBatch(schema, rows))
    if payload == Payload.STRING:
        assert all(8 <= len(v) <= 16 and v.isalnum() for r in rows for v in r)


def test_binary_width_is_44_bytes():
    widths = sum(wire.FIXED_WIDTH[t] for t in BENCH_SCHEMA.types)
    assert widths == 8 + 3 * (4 + 8) == 44
    n = 1000
    rows = dataset_rows(n, 1)
    payload = wire.encode_block_column(wire.pivot(wire.RecordBatch(BENCH_SCHEMA, rows)))
    assert len(payload) == 4 + 44 * n


def test_column_wire_bytes_match_arithmetic():
    n = 100_000
    r = run_pipe(BenchSpec(n, 1, Mode.PIPE_COLUMN))
    header = wire.TransferHeader(FormatCode.COLUMN, Codec.NONE, "q" * 32, BENCH_SCHEMA)
    blocks = math.ceil(n / 4096)
    assert r.bytes == len(wire.encode_header(header)) + blocks * (5 + 4) + 44 * n + 5


def test_partition_round_robin():
    parts = partition(list(range(10)), 3)
    assert parts == [[0, 3, 6, 9], [1, 4, 7], [2, 5, 8]]


def test_rows_identical_uses_bits():
    assert rows_identical([(1, 0.0)], [(1, 0.0)])
    assert not rows_identical([(1, 0.0)], [(1, -0.0)])
    assert not rows_identical([(1, 1.0)], [(1, 1)])
    assert not rows_identical([(1,)], [(1,), (2,)])
    assert rows_identical([(float("nan"),)], [(float("nan"),)])


def test_iter_lines():
    assert list(iter_lines(["a\nb", "c\n", "d"])) == ["a", "bc", "d"]


def test_spec_validation():
    with pytest.raises(ValueError):
        BenchSpec(n=-1)
    with pytest.raises(ValueError):
        BenchSpec(workers=0)
    assert BenchSpec(mode=Mode.PIPE_ROW, codec=Codec.RLE).effective_codec == Codec.NONE
    assert BenchSpec(mode=Mode.FILE_CSV, codec=Codec.DEFLATE).effective_codec == Codec.NONE
    assert BenchSpec(mode=Mode.PIPE_COLUMN, codec=Codec.RLE).effective_codec == Codec.RLE


# -- runs --------------------------------------------------------------


def test_baseline_round_trip():
    r = run_baseline_file(BenchSpec(1000, 1, Mode.FILE_CSV))
    assert r.rows == 1000
    assert rows_identical(r.imported, dataset_rows(1000, 1))
    assert r.bytes > 44 * 1000


def test_baseline_empty():
    r = run_baseline_file(BenchSpec(0, 1, Mode.FILE_CSV, workers=2))
    assert r.rows == 0 and r.bytes == 0


def test_modes_agree():
    n = 3000
    expected = dataset_rows(n, 5)
    results = [run(BenchSpec(n, 5, mode)) for mode in MODES]
    for r in results:
        assert r.rows == n
        assert rows_identical(r.imported, expected), r.mode
    column = next(r for r in results if r.mode == "PIPE_COLUMN")
    csv = next(r for r in results if r.mode == "FILE_CSV")
    assert column.bytes < csv.bytes


@pytest.mark.parametrize("style", ["writer", "concat"])
@pytest.mark.parametrize("payload", list(Payload))
def test_styles_and_payloads(style, payload):
    n = 700
    expected = dataset_rows(n, 9, payload)
    with DirectoryServer() as srv:
        for mode in MODES:
            for codec in Codec:
                r = run(BenchSpec(n, 9, mode, codec, workers=3, payload=payload, style=style), srv.address)
                assert rows_identical(r.imported, expected), (mode, codec)


def test_four_workers_union():
    r = run_pipe(BenchSpec(4000, 2, Mode.PIPE_ROW, workers=4))
    assert sorted(r.imported) == sorted(dataset_rows(4000, 2))


def test_stub_importer_in_run_pipe():
    r = run_pipe(BenchSpec(500, 2, Mode.PIPE_COLUMN, workers=2), importers=3)
    assert rows_identical(r.imported, dataset_rows(500, 2))


def test_run_pipe_rejects_file_mode():
    with pytest.raises(ValueError):
        run_pipe(BenchSpec(mode=Mode.FILE_CSV))
    with pytest.raises(ValueError):
        run_baseline_file(BenchSpec(mode=Mode.PIPE_ROW))


def test_strings_get_no_width_savings():
    n = 2000
    csv = run(BenchSpec(n, 1, Mode.FILE_CSV, payload=Payload.STRING))
    col = run(BenchSpec(n, 1, Mode.PIPE_COLUMN, payload=Payload.STRING))
    ints_csv = run(BenchSpec(n, 1, Mode.FILE_CSV, payload=Payload.FLOAT))
    ints_col = run(BenchSpec(n, 1, Mode.PIPE_COLUMN, payload=Payload.FLOAT))
    assert col.bytes >= csv.bytes
    assert ints_col.bytes < 0.5 * ints_csv.bytes


def test_results_reproducible_except_timings():
    a = run(BenchSpec(800, 4, Mode.PIPE_COLUMN, Codec.DEFLATE, workers=2))
    b = run(BenchSpec(800, 4, Mode.PIPE_COLUMN, Codec.DEFLATE, workers=2))
    assert (a.bytes, a.rows) == (b.bytes, b.rows)
    assert rows_identical(a.imported, b.imported)


# -- reporting ---------------------------------------------------------


def test_report_identical_results_speedup_one():
    text, _ = bench_report([result("FILE_CSV", 3.0), result("PIPE_COLUMN", 3.0)])
    assert "1.00" in text.splitlines()[-1]


def test_report_speedup_arithmetic():
    rs = [result("FILE_CSV", 10.0), result("PIPE_COLUMN", 4.0)]
    bench_report(rs)
    assert rs[1].speedup == pytest.approx(2.5)
    assert rs[0].speedup == pytest.approx(1.0)


def test_report_median_baseline():
    rs = [result("FILE_CSV", t) for t in (9.0, 10.0, 30.0)] + [result("PIPE_ROW", 5.0)]
    bench_report(rs)
    assert rs[-1].speedup == pytest.approx(2.0)


def test_report_round_trip():
    rs = [result("FILE_CSV", 10.0), result("PIPE_TEXT", 8.0, codec="RLE")]
    _, jsonl = bench_report(rs)
    back = parse_report(jsonl)
    assert [b.record() for b in back] == [r.record() for r in rs]


def test_report_errors():
    with pytest.raises(ValueError):
        bench_report([result("PIPE_ROW", 1.0)])
    with pytest.raises(ValueError):
        bench_report([result("FILE_CSV", 1.0, n=5), result("PIPE_ROW", 1.0, n=6)])


def test_bench_file(tmp_path):
    spec = tmp_path / "bench.txt"
    spec.write_text("# tiny\nn=300\nseed=2\nmodes=FILE_CSV, PIPE_COLUMN\ncodecs=none,rle\nruns=2\n")
    assert load_bench_spec(spec)["modes"] == "FILE_CSV, PIPE_COLUMN"
    results = run_bench_file(spec)
    assert [(r.mode, r.codec) for r in results] == [
        ("FILE_CSV", "NONE"), ("FILE_CSV", "NONE"),
        ("PIPE_COLUMN", "NONE"), ("PIPE_COLUMN", "NONE"),
        ("PIPE_COLUMN", "RLE"), ("PIPE_COLUMN", "RLE"),
    ]
    text, jsonl = bench_report(results)
    assert len(parse_report(jsonl)) == 6
    bad = tmp_path / "bad.txt"
    bad.write_text("no equals sign\n")
    with pytest.raises(ValueError):
        load_bench_spec(bad)
