import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ddrid.cli import main
from ddrid.config import RunConfig, load_config, parse_config
from ddrid.errors import ConfigError
from ddrid.evaluate import read_report
from ddrid.train import load_model

TINY = "pretrain_epochs = 1\nfinetune_epochs = 1\nbatch_size = 8\n"


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _diagnostics(err):
    return [json.loads(line[len("ddrid: "):]) for line in err.splitlines() if line.startswith("ddrid: ")]


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def trained(mini_mnist_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    cfg = root / "run.cfg"
    cfg.write_text(f"# tiny run\ndataset = mnist\nnormal_class = 0\nseed = 2\n{TINY}")
    out = root / "run"
    assert main(["-q", "train", "--config", str(cfg), "--data-dir", str(mini_mnist_dir), "--output-dir", str(out)]) == 0
    return cfg, out


# --- configuration -----------------------------------------------------------------


def test_parse_config_typed_fields():
    cfg = parse_config("dataset = mnist\nnormal_class = 4  # inline\nlr_initial = 0.001\ntest_subset_size = 50\n")
    assert cfg.normal_class == 4 and cfg.train.lr_initial == 0.001 and cfg.test_subset_size == 50
    assert parse_config("").to_dict() == RunConfig().to_dict()


@pytest.mark.parametrize("text, field", [
    ("normal_class = 11", "normal_class"),
    ("rounds = 0", "rounds"),
    ("colour = blue", "colour"),
    ("batch_size = many", "batch_size"),
    ("seed = 1\nseed = 2", "seed"),
    ("dataset = svhn", "dataset"),
    ("kind_policy = median", "kind_policy"),
])
def test_config_errors_name_field(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field


def test_config_file_roundtrip(tmp_path):
    cfg = parse_config("normal_class = 3\nrounds = 2\nsigma = 0.5\n")
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    assert load_config(tmp_path / "c.cfg").to_dict() == cfg.to_dict()


def test_cli_config_error_single_line(tmp_path, mini_mnist_dir, capsys):
    code, _, err = _run(["train", "--data-dir", mini_mnist_dir, "--output-dir", tmp_path / "o",
                         "--normal-class", "11"], capsys)
    assert code == 2
    assert len(err.strip().splitlines()) == 1
    assert _diagnostics(err)[0]["field"] == "normal_class"


def test_usage_error_single_line(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 2
    err = capsys.readouterr().err
    assert len(err.strip().splitlines()) == 1 and _diagnostics(err)[0]["error"] == "UsageError"


def test_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "ddrid.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("ddrid ")


# --- train ------------------------------------------------------------------------


def test_train_writes_artifacts(trained):
    _, out = trained
    assert (out / "model.ckpt").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert all((out / p).exists() or __import__("pathlib").Path(p).exists() for p in manifest["files"].values())
    assert manifest["dataset_digests"] and manifest["seeds"]["split"] == 2
    rows = _rows(out / "loss_log.csv")
    assert [(r["epoch"], r["stage"]) for r in rows] == [("0", "pretrain"), ("0", "finetune")]
    model = load_model(out / "model.ckpt")
    assert model.score_kind in ("latent", "reconstruction")
    assert model.meta["normal_class"] == 0 and "latent_spread_after" in model.meta


def test_train_rerun_is_byte_identical(trained, mini_mnist_dir, tmp_path):
    cfg, out = trained
    assert main(["-q", "train", "--config", str(cfg), "--data-dir", str(mini_mnist_dir),
                 "--output-dir", str(tmp_path)]) == 0
    assert (tmp_path / "loss_log.csv").read_bytes() == (out / "loss_log.csv").read_bytes()
    assert (tmp_path / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()


def test_flags_override_config_in_manifest(mini_mnist_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"normal_class = 0\nseed = 2\n{TINY}")
    out = tmp_path / "o"
    assert main(["-q", "train", "--config", str(cfg), "--data-dir", str(mini_mnist_dir), "--output-dir", str(out),
                 "--seed", "5", "--normal-class", "1", "--set", "sigma=0.5"]) == 0
    recorded = json.loads((out / "manifest.json").read_text())["config"]
    assert (recorded["seed"], recorded["normal_class"], recorded["sigma"]) == (5, 1, 0.5)
    assert recorded["output_dir"] == str(out)


def test_train_missing_data_is_io_error(tmp_path, capsys):
    code, _, err = _run(["train", "--data-dir", tmp_path / "nowhere", "--output-dir", tmp_path / "o", "--set",
                         "pretrain_epochs=1"], capsys)
    assert code == 1
    assert len(err.strip().splitlines()) == 1 and _diagnostics(err)[0]["error"] == "DataIOError"


# --- score --------------------------------------------------------------------------


def _score(trained, mini_mnist_dir, tmp_path, capsys, *extra):
    _, out = trained
    dest = tmp_path / f"scores_{len(list(tmp_path.iterdir()))}.csv"
    code, _, err = _run(["-q", "score", "--checkpoint", out / "model.ckpt", "--data-dir", mini_mnist_dir,
                         "--output", dest, *extra], capsys)
    assert code == 0, err
    return _rows(dest)


def test_score_train_subset_nonnegative(trained, mini_mnist_dir, tmp_path, capsys):
    rows = _score(trained, mini_mnist_dir, tmp_path, capsys, "--subset", "train")
    s = np.array([float(r["score"]) for r in rows])
    assert len(s) > 0 and np.isfinite(s).all() and (s >= 0).all()
    assert {r["normal_flag"] for r in rows} == {"1"}
    assert rows[0]["score_kind"] == load_model(trained[1] / "model.ckpt").score_kind


def test_score_sum_equals_parts(trained, mini_mnist_dir, tmp_path, capsys):
    get = lambda kind: np.array([float(r["score"]) for r in _score(  # noqa: E731
        trained, mini_mnist_dir, tmp_path, capsys, "--subset", "test", "--score-kind", kind)])
    total, lat, rec = get("sum"), get("latent"), get("reconstruction")
    assert len(total) == 200
    np.testing.assert_allclose(total, lat + rec, rtol=1e-12, atol=1e-9)


def test_score_input_file(trained, mini_mnist_dir, tmp_path, capsys):
    rows = _score(trained, mini_mnist_dir, tmp_path, capsys, "--input", mini_mnist_dir / "t10k-images-idx3-ubyte",
                  "--labels", mini_mnist_dir / "t10k-labels-idx1-ubyte")
    assert len(rows) == 200
    assert all(r["normal_flag"] == str(int(r["class_id"] == "0")) for r in rows)


def test_score_corrupt_checkpoint(trained, tmp_path, mini_mnist_dir, capsys):
    blob = bytearray((trained[1] / "model.ckpt").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    code, _, err = _run(["score", "--checkpoint", bad, "--subset", "train", "--data-dir", mini_mnist_dir,
                         "--output", tmp_path / "s.csv"], capsys)
    assert code != 0
    assert len(err.strip().splitlines()) == 1
    assert _diagnostics(err)[0]["error"] == "CheckpointError"


# --- evaluate and plot ---------------------------------------------------------------------


def test_evaluate_single_round(mini_mnist_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    code, stdout, err = _run(["-q", "evaluate", "--data-dir", mini_mnist_dir, "--output-dir", out, "--rounds", "1",
                              "--set", "pretrain_epochs=1", "--set", "finetune_epochs=1", "--set", "batch_size=8"],
                             capsys)
    assert code == 0, err
    report = read_report(out / "report.json")
    assert len(report.per_round_auc) == 1 and 0 <= report.per_round_auc[0] <= 1
    assert report.score_kind_chosen[0] in ("latent", "reconstruction")
    assert json.loads(stdout)["per_round_auc"] == report.per_round_auc
    assert (out / "roc_round0.csv").exists() and (out / "roc.svg").exists()
    assert json.loads((out / "manifest.json").read_text())["status"] == "complete"

    code, _, _ = _run(["plot-roc", out / "roc_round0.csv", out / "roc_round0.csv", "--labels", "a", "b",
                       "--output", tmp_path / "two.svg"], capsys)
    assert code == 0 and (tmp_path / "two.svg").read_text().count("<polyline") == 2


def test_evaluate_unwritable_output(mini_mnist_dir, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = _run(["evaluate", "--data-dir", mini_mnist_dir, "--output-dir", blocker / "out"], capsys)
    assert code != 0
    assert len(err.strip().splitlines()) == 1


def test_plot_roc_missing_csv(tmp_path, capsys):
    code, _, err = _run(["plot-roc", tmp_path / "none.csv", "--output", tmp_path / "p.svg"], capsys)
    assert code == 1 and len(err.strip().splitlines()) == 1
