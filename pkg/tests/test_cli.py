import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from offset_inekf.cli import EXIT_CODES, TRIAL_COLUMNS, main
from offset_inekf.simulator import read_sensor_csv
from offset_inekf.validation import SENSOR_COLUMNS


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def sensor_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "3", "--duration", "3", "--out-dir", str(out)]) == 0
    return out / "sensors_3.csv"


class TestSimulate:
    def test_row_count_and_header(self, tmp_path):
        assert main(["simulate", "--duration", "1", "--rate", "100", "--out-dir", str(tmp_path)]) == 0
        table = rows(tmp_path / "sensors_0.csv")
        assert table[0] == list(SENSOR_COLUMNS)
        assert len(table) == 1 + 100

    def test_idempotent(self, tmp_path):
        for d in ("a", "b"):
            assert main(["simulate", "--seed", "7", "--duration", "2", "--out-dir", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "sensors_7.csv").read_bytes() == (tmp_path / "b" / "sensors_7.csv").read_bytes()

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('seed = 4\n[profile]\nsample_rate = 50.0\n[offsets]\nangle_deg = 10.0\n')
        assert main(["simulate", "--config", str(cfg), "--duration", "2", "--out-dir", str(tmp_path / "o")]) == 0
        assert len(rows(tmp_path / "o" / "sensors_4.csv")) == 1 + 100
        assert main(["simulate", "--config", str(cfg), "--seed", "5", "--duration", "1",
                     "--out-dir", str(tmp_path / "o")]) == 0  # fmt: skip
        assert (tmp_path / "o" / "sensors_5.csv").exists()


class TestErrors:
    @pytest.mark.parametrize(
        "text",
        ["seed = [\n", "bogus = 1\n", "[profile]\nsample_rate = -1.0\n", "[trial]\nhold = 'x'\n",
         "[sensor_noise]\nsd_nothing = 1.0\n", "seed = -3\n"],  # fmt: skip
        ids=["syntax", "unknown-key", "bad-profile", "bad-type", "unknown-noise", "negative-seed"],
    )
    def test_malformed_config(self, tmp_path, capsys, text):
        cfg = tmp_path / "bad.toml"
        cfg.write_text(text)
        out = tmp_path / "out"
        code = main(["simulate", "--config", str(cfg), "--out-dir", str(out)])
        assert code == EXIT_CODES["config"] != 0
        assert error_of(capsys)["error"] == "config"
        assert not out.exists()

    def test_missing_config(self, tmp_path, capsys):
        code = main(["simulate", "--config", str(tmp_path / "nope.toml"), "--out-dir", str(tmp_path / "o")])
        assert code == 3 and error_of(capsys)["error"] == "missing_file"

    def test_missing_input(self, tmp_path, capsys):
        code = main(["filter", "--input", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path / "o")])
        assert code == 3 and not (tmp_path / "o").exists()

    @pytest.mark.parametrize("argv", [[], ["fly"], ["simulate", "--seed", "x"], ["experiment", "--filter", "kalman"]])
    def test_usage(self, capsys, argv):
        assert main(argv) == EXIT_CODES["usage"]
        assert error_of(capsys)["error"] == "usage"

    def test_non_finite_input(self, tmp_path, sensor_file, capsys):
        lines = sensor_file.read_text().splitlines()
        cells = lines[50].split(",")
        cells[2] = "1e300"
        lines[50] = ",".join(cells)
        for k in range(51, len(lines)):
            cells = lines[k].split(",")
            cells[1] = cells[2] = cells[3] = "1e300"
            lines[k] = ",".join(cells)
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(lines) + "\n")
        out = tmp_path / "o"
        code = main(["filter", "--input", str(bad), "--filter", "proposed", "--out-dir", str(out)])
        assert code == EXIT_CODES["non_finite"]
        err = error_of(capsys)
        assert err["error"] == "non_finite" and "step" in err["message"]
        assert not out.exists()

    def test_malformed_input(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("x,y\n1,2\n")
        assert main(["filter", "--input", str(bad), "--out-dir", str(tmp_path / "o")]) == EXIT_CODES["input"]


class TestFilter:
    def test_replay_writes_estimates(self, tmp_path, sensor_file):
        assert main(["filter", "--input", str(sensor_file), "--out-dir", str(tmp_path)]) == 0
        n = len(read_sensor_csv(sensor_file))
        prop, base = rows(tmp_path / "estimates_proposed.csv"), rows(tmp_path / "estimates_baseline.csv")
        assert len(prop) == len(base) == n + 1
        assert len(prop[0]) == 16 and len(base[0]) == 13
        assert np.all(np.isfinite(np.array(prop[1:], dtype=float)))

    def test_single_filter(self, tmp_path, sensor_file):
        assert main(["filter", "--input", str(sensor_file), "--filter", "baseline", "--out-dir", str(tmp_path)]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["estimates_baseline.csv"]


@pytest.fixture(scope="module")
def outputs(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    argv = ["experiment", "--trials", "2", "--seed", "5", "--duration", "4", "--out-dir", str(out)]
    assert main(argv) == 0
    return out


class TestExperiment:
    def test_summary(self, outputs):
        summary = json.loads((outputs / "summary.json").read_text())
        assert set(summary["filters"]) == {"proposed", "baseline"}
        assert summary["seeds"] == [5, 6]
        assert "speedup" in summary and "config_hash" in summary

    def test_trial_tables(self, outputs):
        for seed in (5, 6):
            for name in ("proposed", "baseline"):
                table = rows(outputs / f"trial_{seed}_{name}.csv")
                assert table[0] == list(TRIAL_COLUMNS)
                assert len(table) == 1 + 400

    def test_compare(self, tmp_path, capsys):
        argv = ["compare", "--trials", "1", "--duration", "3", "--offset-deg", "20", "--offset-m", "0.05",
                "--out-dir", str(tmp_path)]  # fmt: skip
        assert main(argv) == 0
        assert "speedup" in capsys.readouterr().out
        assert (tmp_path / "compare.csv").exists() and (tmp_path / "summary.json").exists()
        config = json.loads((tmp_path / "summary.json").read_text())["config"]
        assert np.linalg.norm(config["offsets"]["dp"]) == pytest.approx(0.05)


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "offset_inekf.cli", "simulate", "--duration", "0.5", "--out-dir", str(tmp_path)],
        capture_output=True, text=True,
    )  # fmt: skip
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "sensors_0.csv").exists()
