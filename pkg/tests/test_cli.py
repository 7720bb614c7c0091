import csv
import json

import pytest

from catapult import cli
from catapult.trace import SCHEMA_VERSION


def run(tmp_path, name, *argv):
    prefix = str(tmp_path / name)
    code = cli.main(list(argv) + ["--out", prefix])
    return code, prefix


def read_csv(path):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    rows = list(csv.DictReader(ln for ln in lines if not ln.startswith("#")))
    return header, rows


def test_warmup_catapult(tmp_path, capsys):
    code, prefix = run(tmp_path, "w", "warmup", "--n", "1000", "--eta", "1.5")
    assert code == cli.EXIT_OK
    report = json.load(open(prefix + ".json"))["report"]
    assert report["phase"] == "catapult" and report["peak_loss_ratio"] > 1
    header, rows = read_csv(prefix + ".csv")
    assert list(rows[0]) == list(cli.WARMUP_COLUMNS)
    assert header[0] == f"# schema: {SCHEMA_VERSION}"
    config = json.loads(header[1][len("# config: "):])
    assert config["subcommand"] == "warmup" and config["params"]["eta"] == 1.5
    assert config["params"]["out"] == prefix
    summary = json.loads(capsys.readouterr().out.strip())
    assert summary["status"] == "ok" and summary["phase"] == "catapult"


def test_warmup_zero_rate_constant(tmp_path):
    code, prefix = run(tmp_path, "z", "warmup", "--eta", "0", "--steps", "50")
    assert code == cli.EXIT_OK
    _, rows = read_csv(prefix + ".csv")
    assert len(rows) == 51
    assert len({(r["loss"], r["lambda"], r["f"]) for r in rows}) == 1


def test_warmup_divergent_exit_code(tmp_path):
    code, prefix = run(tmp_path, "d", "warmup", "--eta-lambda0", "5", "--steps", "2000")
    assert code == cli.EXIT_DIVERGED
    assert json.load(open(prefix + ".json"))["report"]["phase"] == "divergent"


@pytest.mark.parametrize("argv", [
    ["warmup", "--eta", "1", "--eta-lambda0", "1"],
    ["warmup"],
    ["warmup", "--eta", "-1"],
    ["warmup", "--eta", "1", "--n", "0"],
    ["sweep", "--grid", "1,1"],
    ["sweep", "--grid", "x"],
    ["surface", "--n", "1"],
    ["critexp", "--eps", "0"],
    ["nonsense"],
])
def test_config_errors(tmp_path, argv):
    code, _ = run(tmp_path, "e", *argv)
    assert code == cli.EXIT_CONFIG


def test_jobs_must_be_positive(tmp_path):
    code, _ = run(tmp_path, "j", "sweep", "--grid", "1", "--jobs", "0")
    assert code == cli.EXIT_CONFIG


def test_io_error(tmp_path):
    code = cli.main(["warmup", "--eta", "1", "--out", str(tmp_path / "missing" / "x")])
    assert code == cli.EXIT_IO


def test_missing_mnist_is_io_error(tmp_path, monkeypatch):
    monkeypatch.setenv("CATAPULT_DATA_DIR", str(tmp_path))
    code, _ = run(tmp_path, "m", "mlp", "--dataset", "mnist", "--hidden", "8",
                  "--eta-lambda0", "1", "--steps", "2")
    assert code == cli.EXIT_IO


def test_rerun_is_byte_identical(tmp_path):
    argv = ["sweep", "--model", "linear", "--n", "64", "--m", "4", "--d", "8",
            "--grid", "0.5,2.5,4.5", "--seeds", "0,1", "--stop-value", "300", "--reduce-at", "25"]
    outputs = []
    for _ in range(2):
        code = cli.main(argv + ["--out", str(tmp_path / "same")])
        assert code == cli.EXIT_OK
        outputs.append(((tmp_path / "same.csv").read_bytes(), (tmp_path / "same.json").read_bytes()))
    assert outputs[0] == outputs[1]
    # the parallel path writes the same rows; only the recorded config differs
    assert cli.main(argv + ["--jobs", "2", "--out", str(tmp_path / "par")]) == cli.EXIT_OK
    par = (tmp_path / "par.csv").read_bytes().split(b"\n")
    ser = outputs[0][0].split(b"\n")
    assert par[2:] == ser[2:] and b'"jobs": 2' in par[1]


def test_sweep_columns_and_phases(tmp_path):
    code, prefix = run(tmp_path, "s", "sweep", "--grid", "1,3,4.5", "--stop-value", "5000")
    assert code == cli.EXIT_OK
    _, rows = read_csv(prefix + ".csv")
    assert list(rows[0]) == list(cli.SWEEP_COLUMNS)
    assert [r["phase"] for r in rows] == ["lazy", "catapult", "divergent"]
    assert [r["diverged"] for r in rows] == ["false", "false", "true"]


def test_surface_grid_rows(tmp_path):
    code, prefix = run(tmp_path, "g", "surface", "--n", "50")
    assert code == cli.EXIT_OK
    _, rows = read_csv(prefix + ".csv")
    assert len(rows) == 101 * 101
    assert list(rows[0]) == list(cli.SURFACE_COLUMNS)


def test_critexp_reports_slope(tmp_path):
    code, prefix = run(tmp_path, "c", "critexp", "--n", "2000", "--eps", "0.08,0.16,0.32")
    assert code == cli.EXIT_OK
    doc = json.load(open(prefix + ".json"))
    assert set(doc["slope"]) == {"below", "above"}
    assert all(-1.3 < s < -0.7 for s in doc["slope"].values())


def test_maxlr_and_mlp(tmp_path):
    common = ["--hidden", "32", "--dataset", "gaussian", "--n-train", "16", "--classes", "0,1"]
    code, prefix = run(tmp_path, "x", "maxlr", *common, "--probe-steps", "50",
                       "--bracket", "0.5", "60")
    assert code == cli.EXIT_OK
    assert 0.5 <= json.load(open(prefix + ".json"))["result"]["c_act"] <= 60
    code, prefix = run(tmp_path, "y", "mlp", *common, "--eta-lambda0", "0.5", "--steps", "20")
    assert code == cli.EXIT_OK
    _, rows = read_csv(prefix + ".csv")
    assert len(rows) == 21 and rows[0]["lambda"] != "" and rows[1]["lambda"] == ""


def test_linearize_kernel_mode(tmp_path):
    code, prefix = run(tmp_path, "k", "linearize", "--mode", "kernel", "--widths", "16,32",
                       "--seeds", "0", "--t-lin", "1", "--t-end", "3", "--n-train", "10",
                       "--dataset", "digits")
    assert code == cli.EXIT_OK
    _, rows = read_csv(prefix + ".csv")
    assert [r["width"] for r in rows] == ["16", "32"]


def test_linearize_kernel_default_fits_digits(tmp_path, monkeypatch):
    monkeypatch.delenv("CATAPULT_DATA_DIR", raising=False)
    code, prefix = run(tmp_path, "kd", "linearize", "--mode", "kernel", "--widths", "16",
                       "--seeds", "0", "--t-lin", "1", "--t-end", "2")
    assert code == cli.EXIT_OK
