import json
import subprocess
import sys
import threading

import pytest

from datapipe import cli
from datapipe.directory import DirectoryServer
from datapipe.formatopt import format_rows
from datapipe.harness import BENCH_SCHEMA, dataset_rows


@pytest.fixture
def directory():
    with DirectoryServer(lookup_timeout=10) as srv:
        host, port = srv.address
        yield f"{host}:{port}"


def test_help_runs():
    out = subprocess.run([sys.executable, "-m", "datapipe", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("directory", "export", "import", "bench", "proxy"):
        assert sub in out.stdout


def test_export_to_file(tmp_path, capsys):
    path = tmp_path / "out.csv"
    assert cli.main(["export", "--target", str(path), "--n", "50", "--seed", "3"]) == 0
    assert path.read_text() == format_rows(dataset_rows(50, 3), BENCH_SCHEMA.types)
    assert json.loads(capsys.readouterr().out)["rows"] == 50


def test_file_round_trip_through_import(tmp_path, capsys):
    src = tmp_path / "in.csv"
    dst = tmp_path / "copy.csv"
    cli.main(["export", "--target", str(src), "--n", "40"])
    assert cli.main(["import", "--source", str(src), "--out", str(dst)]) == 0
    assert dst.read_bytes() == src.read_bytes()


@pytest.mark.parametrize("fmt,codec", [("column", "rle"), ("row", "deflate"), ("text", "none")])
def test_pipe_export_import(directory, tmp_path, capsys, fmt, codec):
    out = tmp_path / "got.csv"
    common = ["--format", fmt, "--codec", codec, "--workers", "2", "--timeout", "10"]
    codes = {}
    t = threading.Thread(target=lambda: codes.setdefault("imp", cli.main(
        ["--directory", directory, "import", "--source", "db://B?workers=2", "--out", str(out)] + common)))
    t.start()
    # the directory flag is also accepted after the subcommand
    codes["exp"] = cli.main(["export", "--directory", directory, "--target", "db://B?workers=2",
                             "--n", "300", "--seed", "4"] + common)
    t.join(20)
    assert codes == {"imp": 0, "exp": 0}
    rows = dataset_rows(300, 4)
    expected = format_rows(rows[0::2], BENCH_SCHEMA.types) + format_rows(rows[1::2], BENCH_SCHEMA.types)
    assert out.read_text() == expected


def test_env_supplies_directory(directory, monkeypatch, tmp_path):
    monkeypatch.setenv("PIPEGEN_DIRECTORY", directory)
    out = tmp_path / "got.csv"
    t = threading.Thread(target=cli.main, args=(["import", "--source", "db://E", "--out", str(out)],))
    t.start()
    assert cli.main(["export", "--target", "db://E", "--n", "20"]) == 0
    t.join(10)
    assert len(out.read_text().splitlines()) == 20


def test_config_file_sets_flags(directory, tmp_path):
    conf = tmp_path / "pipe.conf"
    conf.write_text(f"# defaults\ndirectory={directory}\nn=25\nseed=8\nformat=row\n")
    out = tmp_path / "got.csv"
    t = threading.Thread(target=cli.main, args=(["--config", str(conf), "import", "--source", "db://C",
                                                 "--out", str(out)],))
    t.start()
    assert cli.main(["--config", str(conf), "export", "--target", "db://C"]) == 0
    t.join(10)
    assert out.read_text() == format_rows(dataset_rows(25, 8), BENCH_SCHEMA.types)


def test_bench_command(tmp_path, capsys):
    spec = tmp_path / "b.spec"
    spec.write_text("n=200\nmodes=FILE_CSV,PIPE_ROW\ncodecs=none\n")
    out = tmp_path / "r.jsonl"
    assert cli.main(["bench", "--spec", str(spec), "--out", str(out)]) == 0
    assert "PIPE_ROW" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 2


def test_debug_flags(directory, tmp_path):
    mirror = tmp_path / "mirror.csv"
    common = ["--format", "row", "--timeout", "10", "--debug-n", "10", "--debug-file", str(mirror)]
    codes = {}
    t = threading.Thread(target=lambda: codes.setdefault("imp", cli.main(
        ["--directory", directory, "import", "--source", "db://G"] + common)))
    t.start()
    codes["exp"] = cli.main(["--directory", directory, "export", "--target", "db://G", "--n", "30"] + common)
    t.join(10)
    assert codes == {"imp": 0, "exp": 0}
    assert len((tmp_path / "mirror.csv.0").read_text().splitlines()) == 10


def test_proxy_command(directory, tmp_path, capsys):
    src = tmp_path / "in.csv"
    src.write_text(format_rows(dataset_rows(30, 1), BENCH_SCHEMA.types))
    out = tmp_path / "out.csv"
    common = ["--directory", directory]
    codes = {}
    t = threading.Thread(target=lambda: codes.setdefault("imp", cli.main(
        common + ["import", "--source", "db://P", "--out", str(out)])))
    t.start()
    codes["proxy"] = cli.main(common + ["proxy", "--in", str(src), "--send", "db://P"])
    t.join(10)
    assert codes == {"imp": 0, "proxy": 0}
    assert out.read_text() == src.read_text()


def test_errors_exit_nonzero(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("PIPEGEN_DIRECTORY", raising=False)
    assert cli.main(["export", "--target", "db://X", "--n", "1"]) == 1
    assert "error" in capsys.readouterr().err
    assert cli.main(["import", "--source", str(tmp_path / "missing.csv")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["proxy", "--in", "x.csv"])
