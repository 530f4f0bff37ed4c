import json
import os
import subprocess
import sys

import pytest

from seelamp import cli
from seelamp.metrics import COMPARED

SMALL = """\
[general]
name = cli-small
seed = 2
node_count = 10
width = 500
height = 500
end_time_ms = 8000
[mobility]
kind = random_waypoint
[app]
members = 4
join_start = 300
send_start = 3000
send_interval = 500
"""

STATIC = SMALL.replace("kind = random_waypoint", "kind = static")


@pytest.fixture
def scn(tmp_path):
    def write(text, name="s.scn"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return write


def test_validate_ok_is_silent(scn, capsys):
    assert cli.main(["validate", scn(SMALL)]) == 0
    out = capsys.readouterr()
    assert out.out == "" and out.err == ""


def test_validate_reports_line_and_key(scn, capsys):
    assert cli.main(["validate", scn(SMALL + "[protocol]\nk = 0\n")]) == 1
    err = capsys.readouterr().err
    assert "line 16" in err and "'k'" in err


def test_missing_file_is_config_error(tmp_path, capsys):
    assert cli.main(["validate", str(tmp_path / "nope.scn")]) == 1


def test_run_twice_gives_identical_traces(scn, tmp_path):
    path = scn(SMALL)
    for name in ("a", "b"):
        assert cli.main(["run", path, "--trace", str(tmp_path / f"{name}.trace"),
                         "--summary", str(tmp_path / f"{name}.json")]) == 0
    a = (tmp_path / "a.trace").read_bytes()
    assert a == (tmp_path / "b.trace").read_bytes()
    assert a.startswith(b"# seelamp-trace format=1 ")
    summary = json.loads((tmp_path / "a.json").read_text())
    assert 0 <= summary["pdr"] <= 1 and summary["protocol"] == "seelamp"
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".tmp-")] == []


def test_run_overrides_seed_and_protocol(scn, capsys):
    assert cli.main(["run", scn(SMALL), "--seed", "7", "--protocol", "mesh"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["seed"] == 7 and summary["protocol"] == "mesh"


def test_undefined_overhead_in_json(scn, capsys):
    text = SMALL.replace("members = 4", "members = 0")
    assert cli.main(["run", scn(text)]) == 0
    assert json.loads(capsys.readouterr().out)["control_overhead"] == "undefined"


def test_run_exits_2_on_invariant_violation(scn, monkeypatch, capsys):
    monkeypatch.setattr(cli, "tree_violations", lambda sim: ["group 1: forged"])
    assert cli.main(["run", scn(SMALL)]) == 2
    assert "invariant violation" in capsys.readouterr().err


def test_sweep_table_has_three_rows_per_metric(scn, tmp_path, capsys):
    out_dir = tmp_path / "out"
    code = cli.main(["sweep", scn(SMALL), "--seeds", "2", "--protocols",
                     "seelamp,shared_tree,mesh", "--jobs", "1", "--out", str(out_dir)])
    assert code == 0
    table = capsys.readouterr().out
    rows = [l.split()[0:2] for l in table.splitlines()[2:]]
    for m in COMPARED:
        assert [p for metric, p in rows if metric == m] == ["seelamp", "shared_tree", "mesh"]
    files = sorted(os.listdir(out_dir))
    assert "comparison.txt" in files and "comparison.json" in files
    assert "mesh-2.trace" in files and "seelamp-1.json" in files
    data = json.loads((out_dir / "comparison.json").read_text())
    assert len(data) == 3 * len(COMPARED)


def test_sweep_rejects_unknown_protocol(scn):
    assert cli.main(["sweep", scn(SMALL), "--protocols", "seelamp,bogus"]) == 1


def test_oracle_on_static_run(scn, capsys):
    assert cli.main(["oracle", scn(STATIC)]) == 0
    assert capsys.readouterr().out.strip().endswith("10 nodes checked, 0 mismatches")


def test_oracle_needs_static(scn):
    assert cli.main(["oracle", scn(SMALL)]) == 1


def test_version_names_formats():
    res = subprocess.run([sys.executable, "-m", "seelamp", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "trace format 1" in res.stdout and "wire format 1" in res.stdout


def test_write_atomic_replaces(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("old")
    cli.write_atomic(str(p), "new")
    assert p.read_text() == "new"
    assert os.listdir(tmp_path) == ["f.txt"]
