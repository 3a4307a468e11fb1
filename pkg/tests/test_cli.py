import hashlib
import json
import pickle
import subprocess
import sys

import numpy as np
import pytest

from conftest import TABLE1, match_rows
from rpr3 import cli
from rpr3 import manipulator as mk
from rpr3 import octree as ot
from rpr3 import paths as pt
from test_manipulator import concurrent_pose


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def analyze4(tmp_path_factory):
    out = tmp_path_factory.mktemp("a4")
    assert cli.main(["analyze", "--depth", "4", "--out", str(out)]) == 0
    return out


# --------------------------------------------------------------- ik / fk --

def test_fk_reference(capsys):
    code, out, _ = run(capsys, "fk", "--rho", "14.98", "15.38", "12.0")
    assert code == 0
    rows = json.loads(out)
    assert len(rows) == 6
    X = np.array([[r["x"], r["y"], r["phi"]] for r in rows])
    assert [tuple(x) for x in X] == sorted(tuple(x) for x in X)
    assert all(r["residual"] <= 1e-9 for r in rows)
    dev, _ = match_rows(X, TABLE1)
    assert np.all(dev <= 1e-2), dev


def test_fk_signs(capsys):
    _, out, _ = run(capsys, "fk", "--rho", "14.98", "15.38", "12.0")
    rows = json.loads(out)
    X = np.array([[r["x"], r["y"], r["phi"]] for r in rows])
    _, idx = match_rows(X, TABLE1)
    signs = [rows[i]["sign_det_a"] for i in idx]
    assert signs[1] == signs[2] == signs[5]
    assert sorted(signs) == [-1, -1, -1, 1, 1, 1]


def test_fk_infeasible_is_empty(capsys):
    code, out, _ = run(capsys, "fk", "--rho", "1000", "10", "10")
    assert code == 0
    assert json.loads(out) == []


def test_ik_origin(capsys):
    code, out, _ = run(capsys, "ik", "--pose", "0", "0", "0")
    assert code == 0
    doc = json.loads(out)
    assert doc["rho"][0] == pytest.approx(0.0, abs=1e-12)
    assert doc["within_limits"] is False


@pytest.mark.parametrize("argv", [
    ["fk", "--rho", "1", "2"], ["fk", "--rho", "a", "b", "c"], ["fk", "--rho", "0", "10", "10"],
    ["ik"], ["bogus"], ["analyze", "--depth", "12", "--out", "x"],
    ["fk", "--geometry", "/nonexistent.json", "--rho", "15", "15", "15"]])
def test_usage_errors(capsys, argv):
    with pytest.raises(SystemExit) as exc:
        sys.exit(cli.main(argv))
    assert exc.value.code == cli.EXIT_USAGE


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "rpr3.cli", "fk", "--rho", "14.98", "15.38",
                          "12.0"], capture_output=True, text=True)
    assert res.returncode == 0
    assert len(json.loads(res.stdout)) == 6
    res = subprocess.run([sys.executable, "-m", "rpr3.cli", "fk", "--rho", "x"],
                         capture_output=True, text=True)
    assert res.returncode == 1
    assert "error" in res.stderr


# --------------------------------------------------------------- analyze --

def test_analyze_outputs(analyze4):
    names = {p.name for p in analyze4.iterdir()}
    for base in ("W.oct", "Q.oct", "S.rgn", "aspects.rgn", "basic_regions.rgn",
                 "uniqueness_domains.rgn", "multiplicity.rgn", "Sc_0.rgn",
                 "summary.json", "manifest.json", cli.BUNDLE_FILE):
        assert base in names
    man = json.loads((analyze4 / "manifest.json").read_text())
    assert man["command"] == "analyze"
    assert man["config"]["max_depth"] == 4
    for name in man["sets"]:
        assert f"{name}.csv" in names
    summary = json.loads((analyze4 / "summary.json").read_text())
    for key in ("aspects", "basic_regions", "coincidence_class_sizes", "uniqueness_domains",
                "faults"):
        assert key in summary
    rs = ot.load(analyze4 / "aspects.rgn")
    assert rs.region_count == summary["aspects"]
    head = (analyze4 / "W.csv").read_text().splitlines()
    assert head[0] == "c0,c1,c2,label"
    assert len(head) - 1 == len(ot.load(analyze4 / "W.oct").full_leaves())


def test_analyze_rerun_is_byte_identical(analyze4):
    before = digest(analyze4)
    assert cli.main(["analyze", "--depth", "4", "--out", str(analyze4)]) == 0
    assert digest(analyze4) == before


def test_analyze_depth6_aspects(capsys, tmp_path):
    code, out, _ = run(capsys, "analyze", "--depth", "6", "--out", str(tmp_path))
    assert code == 0
    assert json.loads(out)["aspects"] == 2
    assert json.loads((tmp_path / "summary.json").read_text())["aspects"] == 2


def test_summary_class_sizes_at_reference_depth(bundle7):
    sizes = bundle7.summary()["coincidence_class_sizes"]
    assert sizes == [2, 2, 4, 4, 4, 4, 6, 6], sizes


# ------------------------------------------------------------------ path --

def write_csv(path, rows):
    pt.write_path_csv(path, pt.JointPath(tuple(map(tuple, rows))))
    return str(path)


def test_path_fixture(capsys):
    code, out, _ = run(capsys, "path", str(pt.fixture_path()), "--start-index", "0")
    assert code == 0
    doc = json.loads(out)
    assert doc["mode_changed"] is True
    assert doc["sign_change_count"] == 0
    assert "trace" not in doc
    meta = pt.fixture_meta()
    assert np.allclose(doc["end_pose"], meta["end_pose"], atol=1e-9)


def test_path_constant(capsys, tmp_path):
    f = write_csv(tmp_path / "c.csv", [[14.98, 15.38, 12.0]] * 2)
    code, out, _ = run(capsys, "path", f, "--start-index", "3", "--trace")
    assert code == 0
    doc = json.loads(out)
    assert doc["mode_changed"] is False
    assert len(doc["trace"]) == 1


def test_path_crossing_singularity(capsys, tmp_path):
    Xs = concurrent_pose(mk.ManipulatorGeometry.reference(), np.array([5.0, 5.0]), (-2.6, -2.4))
    X = Xs + np.linspace(-1, 1, 41)[:, None] * np.array([0.0, 0.0, 0.05])
    f = write_csv(tmp_path / "s.csv", mk.ik_array(mk.ManipulatorGeometry.reference(), X))
    rep = tmp_path / "r.json"
    code, _, _ = run(capsys, "path", f, "--start", *map(str, X[0]), "--out", str(rep))
    assert code == 0
    assert json.loads(rep.read_text())["sign_change_count"] >= 1


def test_path_errors(capsys, tmp_path):
    f = write_csv(tmp_path / "c.csv", [[14.98, 15.38, 12.0], [15.0, 15.0, 12.0]])
    code, _, err = run(capsys, "path", f, "--start", "0", "0", "0")
    assert code == cli.EXIT_USAGE and "FK solution" in err
    code, _, _ = run(capsys, "path", f, "--start-index", "9")
    assert code == cli.EXIT_USAGE
    code, _, _ = run(capsys, "path", str(tmp_path / "missing.csv"))
    assert code == cli.EXIT_USAGE
    code, _, _ = run(capsys, "path", f, "--bundle", str(tmp_path))
    assert code == cli.EXIT_USAGE


def test_path_failure_exit_code(capsys, tmp_path):
    Xs = concurrent_pose(mk.ManipulatorGeometry.reference(), np.array([5.0, 5.0]), (-2.6, -2.4))
    X = Xs + np.linspace(-1, 1, 41)[:, None] * np.array([0.0, 1.0, 0.0])
    f = write_csv(tmp_path / "y.csv", mk.ik_array(mk.ManipulatorGeometry.reference(), X))
    code, out, err = run(capsys, "path", f, "--start", *map(str, X[0]))
    assert code == cli.EXIT_FAULT
    assert json.loads(out)["failed_at"] > 0
    assert "failed at" in err


def test_path_with_bundle(capsys, tmp_path, bundle6):
    with open(tmp_path / cli.BUNDLE_FILE, "wb") as fh:
        pickle.dump(bundle6, fh, protocol=4)
    code, out, _ = run(capsys, "path", str(pt.fixture_path()), "--start-index", "0",
                       "--bundle", str(tmp_path))
    assert code == 0
    doc = json.loads(out)
    assert doc["classification"]["enters_size_two_class"] is True
    assert doc["classification"]["nonsingular_mode_change"] is True
    assert doc["start_region"] != doc["end_region"]
