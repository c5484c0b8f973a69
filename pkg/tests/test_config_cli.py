import json
import math
import shutil

import pytest
import yaml
from conftest import small_config

from crossview import cli
from crossview.config import ConfigError, PipelineConfig, dump_config, from_dict, load_config, to_dict


def test_defaults_roundtrip_through_yaml(tmp_path):
    cfg = PipelineConfig()
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.yaml") == cfg


def test_custom_roundtrip(tmp_path):
    cfg = small_config(tmp_path, seed=7, frames=(0, 2))
    back = from_dict(yaml.safe_load(dump_config(cfg)))
    assert back == cfg and to_dict(back) == to_dict(cfg)


def test_partial_file_keeps_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 3\nfit:\n  iterations: 5\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.seed == 3 and cfg.fit.iterations == 5
    assert cfg.fit.batch_size == PipelineConfig().fit.batch_size


def test_infinite_min_points():
    assert from_dict({"min_points": ".inf"}).min_points == math.inf
    assert from_dict(yaml.safe_load("min_points: .inf")).min_points == math.inf


@pytest.mark.parametrize("data", [
    {"nonsense": 1},
    {"fit": {"iterations": 5, "bogus": 2}},
    {"sensors": [{"name": "a", "zoom": 2}]},
    {"occupancy_voxel": 0},
    {"dilation_radius": -1},
    {"fit": {"final_lr_ratio": 0}},
    {"sensors": [{"name": "a"}, {"name": "a"}]},
    {"sensors": [{"channels": 0}]},
    {"sensors": []},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_unparseable_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")


def test_with_seed_reaches_the_fit():
    cfg = PipelineConfig().with_seed(11)
    assert cfg.seed == 11 and cfg.fit.seed == 11


def test_cli_dump_defaults(capsys):
    assert cli.main(["config", "--dump-defaults"]) == 0
    assert from_dict(yaml.safe_load(capsys.readouterr().out)) == PipelineConfig()


def test_cli_lists_every_stage():
    parser = cli.build_parser()
    for cmd in ("decompose", "fit-background", "fit-vehicles", "occupancy", "render", "eval", "pipeline"):
        args = parser.parse_args([cmd, "--seed", "2"])
        assert args.command == cmd and args.seed == 2


def test_cli_bad_config_exit_2(tmp_path):
    (tmp_path / "c.yaml").write_text("bogus: 1\n")
    rep = tmp_path / "r.json"
    assert cli.main(["pipeline", "--config", str(tmp_path / "c.yaml"), "--report", str(rep)]) == cli.EXIT_CONFIG
    assert json.loads(rep.read_text())["exit_code"] == 2


def test_cli_missing_dataset_exit_2(tmp_path):
    (tmp_path / "c.yaml").write_text(f"dataset_root: {tmp_path / 'none'}\n")
    assert cli.main(["decompose", "--config", str(tmp_path / "c.yaml"),
                     "--stage-dir", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_cli_stage_failure_exit_3(tmp_path, small_dataset):
    cfg = small_config(small_dataset, output_root=str(tmp_path / "o"))
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    # render needs upstream stages that have not run
    rep = tmp_path / "r.json"
    assert cli.main(["render", "--config", str(tmp_path / "c.yaml"), "--report", str(rep)]) == cli.EXIT_STAGE
    assert json.loads(rep.read_text())["stage"] == "render"


def test_cli_locked_exit_4(tmp_path, small_dataset):
    import os
    import subprocess
    import sys

    cfg = small_config(small_dataset, output_root=str(tmp_path / "o"))
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    (tmp_path / "o").mkdir()
    holder = subprocess.Popen([sys.executable, "-c", "import time; time.sleep(30)"])
    try:
        (tmp_path / "o" / ".lock").write_text(str(holder.pid))
        assert cli.main(["decompose", "--config", str(tmp_path / "c.yaml")]) == cli.EXIT_LOCKED
    finally:
        holder.kill()
        holder.wait()
    assert os.path.exists(tmp_path / "o" / ".lock")


def test_cli_runs_a_stage(tmp_path, small_dataset):
    cfg = small_config(small_dataset, output_root=str(tmp_path / "unused"))
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    rep = tmp_path / "r.json"
    out = tmp_path / "stages"
    assert cli.main(["decompose", "--config", str(tmp_path / "c.yaml"), "--stage-dir", str(out),
                     "--seed", "4", "--report", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert report["seed"] == 4 and report["stages"]["decompose"]["status"] == "ran"
    assert (out / "decompose" / "DONE").exists()
    shutil.rmtree(out)
