import json
import subprocess
import sys

import pytest

from responsible_ml import cli
from responsible_ml import dataset as ds

THRESHOLD_GOLDEN = """\
accurate classifier, clean data: threshold X > 4.5  accuracy 1.0  DP 0.5
fair classifier, clean data: threshold X > 2.5  accuracy 0.8  DP 1.0
fair classifier from poisoned data, poisoned data: threshold X > 8.5  accuracy 0.8  DP 1.0
fair classifier from poisoned data, clean data: threshold X > 8.5  accuracy 0.6  DP 1.0
"""

CLEANING_GOLDEN = """\
clusters: {e1, e2, e3} {e4, e5}
dropped e6: Age=300 outside [0, 130]
merged e2 + e3 -> e2+e3 (weight 2)
not merged e1 / e2: conflicting labels
reweigh M,y=0: x0.5
weighted positive rates: M=0.5, F=0.5
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_demo_threshold_golden(tmp_path, capsys):
    code, out, _ = run(capsys, "demo-fig2", "--out", tmp_path)
    assert code == 0 and out == THRESHOLD_GOLDEN
    assert (tmp_path / "fig2.txt").read_text() == THRESHOLD_GOLDEN


def test_demo_cleaning_golden(tmp_path, capsys):
    code, out, _ = run(capsys, "demo-table1", "--out", tmp_path)
    assert code == 0 and out == CLEANING_GOLDEN
    doc = json.loads((tmp_path / "cleaning_report.json").read_text())
    assert doc["rates_after"] == {"F": 0.5, "M": 0.5}


def test_metrics_command(tmp_path, capsys):
    d = ds.make_fig2_fixture()
    ds.write_csv(d, tmp_path / "d.csv")
    (tmp_path / "s.json").write_text(json.dumps(ds.schema_to_config(d, "id")))
    (tmp_path / "p.csv").write_text("prediction\n" + "".join(f"{int(i >= 4)}\n" for i in range(10)))
    code, out, _ = run(capsys, "metrics", "--data", tmp_path / "d.csv", "--schema", tmp_path / "s.json",
                       "--predictions", tmp_path / "p.csv", "--out", tmp_path / "o")
    doc = json.loads(out)
    assert code == 0 and doc["dp"] == 0.5 and doc["accuracy"] == 1.0
    assert json.loads((tmp_path / "o" / "report.json").read_text()) == doc


@pytest.mark.parametrize("argv", [["bogus"], ["demo-fig2", "--nope"], [], ["train", "--seed", "1"],
                                  ["poison", "--data", "x.csv", "--schema", "s.json", "--rate", "abc"]])
def test_usage_errors_exit_1(tmp_path, capsys, argv):
    code, _, err = run(capsys, *argv, *(["--out", tmp_path] if argv and argv[0] == "demo-fig2" else []))
    assert code == 1 and "usage" in err


def test_randomized_command_requires_seed(tmp_path, capsys):
    d = ds.make_fig2_fixture()
    ds.write_csv(d, tmp_path / "d.csv")
    (tmp_path / "s.json").write_text(json.dumps(ds.schema_to_config(d, "id")))
    code, _, err = run(capsys, "train", "--data", tmp_path / "d.csv", "--schema", tmp_path / "s.json",
                       "--out", tmp_path / "o")
    assert code == 1 and "--seed" in err
    (tmp_path / "c.json").write_text('{"seed": 3, "train": {"epochs": 2}}')
    code, _, _ = run(capsys, "train", "--data", tmp_path / "d.csv", "--schema", tmp_path / "s.json",
                     "--config", tmp_path / "c.json", "--out", tmp_path / "o")
    assert code == 0


def test_data_errors_exit_2(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"features": [{"name": "x"}], "sensitive": "z", "label": "y"}))
    (tmp_path / "bad.csv").write_text("x,z,y\n1,a,7\n")
    (tmp_path / "p.csv").write_text("prediction\n1\n")
    code, _, err = run(capsys, "metrics", "--data", tmp_path / "bad.csv", "--schema", tmp_path / "s.json",
                       "--predictions", tmp_path / "p.csv", "--out", tmp_path / "o")
    assert code == 2 and "row 1" in err
    code, _, _ = run(capsys, "metrics", "--data", tmp_path / "missing.csv", "--schema", tmp_path / "s.json",
                     "--predictions", tmp_path / "p.csv", "--out", tmp_path / "o")
    assert code == 2
    (tmp_path / "c.json").write_text('{"train": {"learning_rate": 1}}')
    (tmp_path / "ok.csv").write_text("x,z,y\n1,a,1\n2,b,0\n")
    code, _, err = run(capsys, "train", "--data", tmp_path / "ok.csv", "--schema", tmp_path / "s.json",
                       "--seed", 1, "--config", tmp_path / "c.json", "--out", tmp_path / "o")
    assert code == 2 and "learning_rate" in err


def test_flags_override_config(tmp_path, capsys):
    d = ds.make_fig2_fixture()
    ds.write_csv(d, tmp_path / "d.csv")
    (tmp_path / "s.json").write_text(json.dumps(ds.schema_to_config(d, "id")))
    (tmp_path / "c.json").write_text('{"seed": 1, "train": {"epochs": 0}}')
    run(capsys, "train", "--data", tmp_path / "d.csv", "--schema", tmp_path / "s.json",
        "--config", tmp_path / "c.json", "--out", tmp_path / "a")
    run(capsys, "train", "--data", tmp_path / "d.csv", "--schema", tmp_path / "s.json",
        "--config", tmp_path / "c.json", "--epochs", 20, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "model.json").read_bytes() != (tmp_path / "b" / "model.json").read_bytes()


def test_module_entry_point_and_help(tmp_path):
    res = subprocess.run([sys.executable, "-m", "responsible_ml", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "demo-table1" in res.stdout
    res = subprocess.run([sys.executable, "-m", "responsible_ml", "demo-fig2", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout == THRESHOLD_GOLDEN
