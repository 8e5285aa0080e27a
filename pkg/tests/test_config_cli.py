import csv

import numpy as np
import pytest

from streamsdf import cli
from streamsdf.config import ConfigError, build_trainer_config, format_trainer_config, parse_config_text


def test_config_roundtrip():
    cfg, extra = build_trainer_config(parse_config_text(
        "# comment\nseed = 3\nbound=ray\nloss.lambda_grad=0.1\nsampling.n_gaussian=4\ndataset=/x\ntotal_iters=none\n"))
    assert cfg.seed == 3 and cfg.loss.bound.kind.value == "ray" and cfg.loss.lambda_grad == 0.1
    assert cfg.sampling.n_gaussian == 4 and extra == {"dataset": "/x"} and cfg.total_iters is None
    again, _ = build_trainer_config(parse_config_text(format_trainer_config(cfg)))
    assert again == cfg


@pytest.mark.parametrize("text", ["bogus=1", "seed=abc", "loss.nope=1", "novalue", "kf_threshold=2"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        build_trainer_config(parse_config_text(text))


def test_unknown_flag_nonzero(capsys):
    assert cli.main(["run", "--no-such-flag"]) != 0
    assert cli.main(["eval", "--dataset", "/nonexistent", "--scene", "room1", "--out", "x.csv"]) != 0
    assert "usage" in capsys.readouterr().err


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "ds"
    assert cli.main(["make-dataset", "--frames", "3", "--no-noise", "--out", str(d)]) == 0
    return d


def test_eval_self_comparison(dataset_dir, tmp_path):
    gt = tmp_path / "gt.bin"
    assert cli.main(["make-gt", "--resolution", "0.1", "--out", str(gt)]) == 0
    out = tmp_path / "m.csv"
    assert cli.main(["eval", "--dataset", str(dataset_dir), "--grid", str(gt), "--gt-grid", str(gt),
                     "--n-points", "2000", "--out", str(out)]) == 0
    row = next(csv.DictReader(out.open()))
    assert float(row["sdf_mean"]) == 0 and float(row["collision_mean"]) == 0 and float(row["grad_mean"]) <= 1e-12


def test_run_twice_identical(dataset_dir, tmp_path):
    args = ["run", "--dataset", str(dataset_dir), "--seed", "1", "--pixels-per-frame", "10", "--iters", "12"]
    assert cli.main(args + ["--checkpoint-dir", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--checkpoint-dir", str(tmp_path / "b")]) == 0
    for name in ("run_log.csv", "final.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ablate_bounds_rows(dataset_dir, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"dataset={dataset_dir}\npixels_per_frame=10\niters_per_new_frame=2\neval_every=3\neval_points=500\n")
    assert cli.main(["ablate-bounds", "--config", str(cfg), "--checkpoint-dir", str(tmp_path / "ab")]) == 0
    rows = list(csv.DictReader((tmp_path / "ab" / "ablation.csv").open()))
    times = sorted({r["time_index"] for r in rows})
    for t in times:
        assert sorted(r["label"] for r in rows if r["time_index"] == t) == ["batch", "normal", "ray"]


def test_baseline_and_exports(dataset_dir, tmp_path):
    grid = tmp_path / "kf.bin"
    assert cli.main(["baseline", "--dataset", str(dataset_dir), "--voxel-size", "0.1", "--out", str(grid)]) == 0
    assert cli.main(["export-slice", "--grid", str(grid), "--dataset", str(dataset_dir), "--height", "1.0",
                     "--resolution", "0.1", "--out", str(tmp_path / "sl")]) == 0
    vals = np.loadtxt(tmp_path / "sl.csv", delimiter=",")
    assert vals.shape == (40, 60)
    assert cli.main(["export-mesh", "--scene", "room1", "--bounds", "-1,-1,0,1,1,1", "--resolution", "0.1",
                     "--out", str(tmp_path / "m.ply")]) == 0
    assert (tmp_path / "m.ply").read_text().startswith("ply")
