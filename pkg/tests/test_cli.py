import hashlib
import json

import numpy as np
import pytest
import yaml

from ch4plume import cli, io

SMALL = {
    "seed": 3,
    "sim": {"height": 96, "width": 96, "duration": 4200, "rates": [1000, 2000], "winds": [1, 2, 4, 9, 10],
            "snapshots_per_run": 3},
    "dataset": {"samples": {"train": 3, "val": 2, "test": 2}, "base_maps": 3},
}


def _tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


@pytest.fixture(scope="module")
def pipeline_run(config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    assert cli.main(["pipeline", "--config", str(config_file), "--out", str(out)]) == 0
    return out


def test_pipeline_is_byte_identical(pipeline_run, config_file, tmp_path):
    assert cli.main(["pipeline", "--config", str(config_file), "--out", str(tmp_path), "--threads", "2"]) == 0
    assert _tree(pipeline_run) == _tree(tmp_path)


def test_artifact_directories_carry_config_and_version(pipeline_run):
    for stage in ("simulate", "dataset", "invert", "segment", "estimate", "eval"):
        rec = json.loads((pipeline_run / stage / "run.json").read_text())
        assert rec["tool_version"] == io.tool_version()
        assert rec["config"]["seed"] == 3 and rec["config"]["sim"]["height"] == 96


def test_metrics_report_rows(pipeline_run):
    rep = json.loads((pipeline_run / "eval" / "metrics.json").read_text())
    assert set(rep["segmentation"]) == {"method", "ap50", "ap75", "ap95", "ap50_95"}
    assert set(rep["inversion"]) == {"method", "rmse_ppm", "mae_ppm"}


def test_invert_reproduces_end_to_end_check(pipeline_run):
    rs = [json.loads(p.read_text())["label_pearson"] for p in (pipeline_run / "invert").rglob("*_diag.json")
          if "label_pearson" in json.loads(p.read_text())]
    assert rs and float(np.median(rs)) >= 0.7


def test_eval_on_ground_truth_gives_ap_one(pipeline_run, tmp_path):
    labels = pipeline_run / "dataset" / "seg" / "test" / "labels.json"
    assert cli.main(["eval", "--truth", str(labels), "--pred", str(labels), "--out", str(tmp_path)]) == 0
    seg = json.loads((tmp_path / "metrics.json").read_text())["segmentation"]
    assert seg["ap50"] == seg["ap75"] == seg["ap95"] == seg["ap50_95"] == 1.0


def test_subcommands_do_not_mutate_inputs(pipeline_run, tmp_path):
    before = _tree(pipeline_run / "dataset")
    assert cli.main(["invert", "--cubes", str(pipeline_run / "dataset" / "inv"), "--out", str(tmp_path / "i")]) == 0
    assert cli.main(["segment", "--maps", str(pipeline_run / "dataset" / "seg"), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["inject", "--maps", str(pipeline_run / "dataset" / "rate" / "train"),
                     "--out", str(tmp_path / "c")]) == 0
    assert _tree(pipeline_run / "dataset") == before
    assert list((tmp_path / "c").rglob("*.f32"))


def test_losses_subcommand(pipeline_run, tmp_path):
    hist = tmp_path / "hist.json"
    hist.write_text(json.dumps({"unet": [1.0, 0.8], "maskrcnn": [2.0, 1.5]}))
    args = ["losses", "--pred", str(pipeline_run / "estimate"), "--truth", str(pipeline_run / "dataset" / "inv"),
            "--history", str(hist), "--out", str(tmp_path / "l")]
    assert cli.main(args) == 0
    rep = json.loads((tmp_path / "l" / "losses.json").read_text())
    assert {"maskrcnn", "er", "mtl01", "mtl02", "dwa_weights", "config"} <= set(rep)
    assert sum(rep["dwa_weights"]) == pytest.approx(2.0)


def test_bad_config_exits_2_naming_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"sim": {"heigth": 10}}))
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "sim.heigth" in capsys.readouterr().err
    bad.write_text(yaml.safe_dump({"inversion": {"k": "four"}}))
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "inversion.k" in capsys.readouterr().err


def test_io_error_exits_3(tmp_path):
    assert cli.main(["segment", "--maps", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 3
