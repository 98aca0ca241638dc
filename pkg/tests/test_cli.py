import csv
import json

import pytest

from metaguide.cli import main

SMALL = """
name: small
initial: {R: 600.0}
fault: {t_start: 0.2}
mppi: {n_samples: 16}
training: {hidden: [16], epochs: 2, batch_size: 64}
collection: {n_trajectories: 2, t_max: 1.0}
"""


@pytest.fixture()
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("initial: {R_typo: 3}\n")
    assert main(["collect", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "R_typo" in capsys.readouterr().err


def test_missing_weights_exit_code(tmp_path, small_cfg):
    (tmp_path / "w.mgw").write_bytes(b"garbage")
    assert main(["run", "--config", str(small_cfg), "--weights", str(tmp_path / "w.mgw"),
                 "--out", str(tmp_path)]) == 3


def test_end_to_end(tmp_path, small_cfg):
    out = tmp_path / "o"
    assert main(["collect", "--config", str(small_cfg), "--out", str(out), "--csv"]) == 0
    assert main(["train", "--config", str(small_cfg), "--dataset", str(out / "dataset.mgd"),
                 "--out", str(out)]) == 0
    with open(out / "training_log.csv") as fh:
        assert len(list(csv.reader(fh))) == 3
    w = str(out / "weights.mgw")
    assert main(["run", "--config", str(small_cfg), "--weights", w, "--out", str(out / "run")]) == 0
    assert (out / "run" / "summary.csv").exists()
    assert main(["montecarlo", "--config", str(small_cfg), "--weights", w, "--runs", "2",
                 "--out", str(out / "mc")]) == 0
    stats = json.loads((out / "mc" / "stats.json").read_text())
    assert stats["n_runs"] == 2
    assert main(["emit", "--reports", str(out / "mc" / "reports"), "--out", str(out / "emit")]) == 0
    assert (out / "emit" / "data_dictionary.csv").exists()
