import csv

import pytest
import yaml

from fsrf import checks
from fsrf.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main, run_gradcheck
from fsrf.evaluation import GRID_CONDITIONS

SMALL = [
    "--set", "data.synthetic.n_samples=40",
    "--set", "data.synthetic.seq_len={L: 4, A: 4, V: 4}",
    "--set", "data.synthetic.feat_dim={L: 6, A: 4, V: 4}",
]
TINY_TRAIN = [
    "--set", "train.d_u=8", "--set", "train.n_layers=1", "--set", "train.n_heads=2",
    "--set", "train.batch_size=8", "--set", "train.epochs=1",
]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--force", *SMALL]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--out", str(out), "--data", str(dataset_dir), "--seed", "2", *TINY_TRAIN])
    assert code == EXIT_OK
    return out


def test_synth_refuses_non_empty_dir(dataset_dir, capsys):
    assert main(["synth", "--out", str(dataset_dir), *SMALL]) == EXIT_USAGE
    assert "--force" in capsys.readouterr().err
    assert (dataset_dir / "manifest.json").exists() and (dataset_dir / "config.yaml").exists()


def test_usage_errors(tmp_path):
    assert main(["train", "--out", str(tmp_path / "o"), "--data", str(tmp_path / "missing")]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "train.nope=1"]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "noequals"]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "none.yaml")]) == EXIT_USAGE
    assert main(["eval", "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["eval", "--out", str(tmp_path / "o"), "--checkpoint", str(tmp_path / "x.ckpt")]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE


def test_train_outputs_and_config_echo(trained):
    for name in ("config.yaml", "best.ckpt", "last.ckpt", "trace.csv"):
        assert (trained / name).exists()
    cfg = yaml.safe_load((trained / "config.yaml").read_text())
    assert cfg["train"]["seed"] == 2 and cfg["train"]["d_u"] == 8
    assert set(cfg) == {"data", "train", "seeds", "eval"}
    header = next(csv.reader(open(trained / "trace.csv")))
    assert header[:3] == ["epoch", "batch", "task"]


def test_config_file_and_override_precedence(tmp_path, dataset_dir):
    conf = tmp_path / "c.yaml"
    conf.write_text(yaml.safe_dump({"train": {"d_u": 8, "n_layers": 1, "n_heads": 2, "epochs": 1,
                                              "batch_size": 8, "learning_rate": 0.5}}))
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--data", str(dataset_dir), "--config", str(conf),
                 "--set", "train.learning_rate=0.001"]) == EXIT_OK
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    assert cfg["train"]["learning_rate"] == 0.001 and cfg["train"]["n_layers"] == 1


def test_eval_grid_and_curve(tmp_path, trained, dataset_dir):
    out = tmp_path / "grid"
    args = ["eval", "--out", str(out), "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset_dir)]
    assert main(args + ["--grid"]) == EXIT_OK
    rows = list(csv.reader(open(out / "report_grid.csv")))
    assert [r[0] for r in rows[1:8]] == list(GRID_CONDITIONS)
    assert not (out / "report_curve.csv").exists()
    out2 = tmp_path / "curve"
    assert main(args[:2] + [str(out2)] + args[3:] + ["--curve"]) == EXIT_OK
    rows = list(csv.reader(open(out2 / "report_curve.csv")))
    assert len(rows) == 11 and rows[-1][0] == "1.0"


def test_eval_dims_mismatch(tmp_path, trained):
    other = tmp_path / "other"
    assert main(["synth", "--out", str(other), "--set", "data.synthetic.n_samples=10"]) == EXIT_OK
    code = main(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(trained / "best.ckpt"),
                 "--data", str(other)])
    assert code == EXIT_USAGE


def test_resume_cli(tmp_path, dataset_dir):
    out = tmp_path / "r"
    base = ["train", "--out", str(out), "--data", str(dataset_dir), *TINY_TRAIN]
    assert main(base) == EXIT_OK
    assert main(base + ["--set", "train.epochs=2", "--resume"]) == EXIT_OK
    rows = list(csv.reader(open(out / "trace.csv")))
    assert {r[0] for r in rows[1:]} == {"0", "1"}


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()[1:]
    assert len(lines) >= 8 and all(line.endswith("pass") for line in lines)
    rows = list(csv.reader(open(tmp_path / "gradcheck.csv")))
    assert len(rows) - 1 == len(lines)


def test_gradcheck_catches_sign_flip(capsys):
    assert run_gradcheck(js=checks.sign_flipped_js) == EXIT_FAILURE
    out = capsys.readouterr().out
    assert any("js" in line and line.endswith("FAIL") for line in out.splitlines())
