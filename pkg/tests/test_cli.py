import json

import pytest
import yaml
from click.testing import CliRunner

from cli.main import cli
from cli.utils import echo_styled, prepare_output_dir
from utils import DynreachError

TINY_MAP = {
    "name": "tiny_map",
    "seeds": [0, 1],
    "duration": 0.3,
    "map": {"lengths": [1.0, 1.0, 1.0], "origin": [0.0, 0.0, 0.0], "voxel_size": 0.1, "max_particles": 10000},
    "cameras": [{"position": [0.5, 0.5, 2.5], "look_at": [0.5, 0.5, 0.0], "up": [0.0, 1.0, 0.0],
                 "resolution_deg": 4.0, "rows": 30, "cols": 40}],
    "scene": {"bodies": [{"name": "crate", "shapes": [{"type": "box", "center": [0.5, 0.5, 0.3],
                                                       "half_extents": [0.1, 0.1, 0.1]}]}]},
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_map(tmp_path):
    path = tmp_path / "tiny_map.yaml"
    path.write_text(yaml.safe_dump(TINY_MAP), encoding="utf-8")
    return str(path)


def test_help_lists_commands(runner):
    result = runner.invoke(cli, ["--help"])
    assert result.exit_code == 0
    for command in ("map-bench", "plan-bench", "run", "oracle-check"):
        assert command in result.output


def test_oracle_check(runner):
    result = runner.invoke(cli, ["oracle-check", "--instances", "3"])
    assert result.exit_code == 0, result.output
    assert "All oracle checks passed." in result.output


def test_map_bench_writes_reports(runner, tiny_map, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(cli, ["map-bench", tiny_map, "--output-dir", str(out), "--seed", "1"])
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["seeds"] == [1]
    assert summary["mode"] == "map"
    assert (out / "episodes.csv").exists()
    assert (out / "timing.json").exists()


def test_output_root_from_environment(runner, tiny_map, tmp_path, monkeypatch):
    monkeypatch.setenv("DYNREACH_OUTPUT_ROOT", str(tmp_path / "root"))
    result = runner.invoke(cli, ["map-bench", tiny_map, "--seed", "0"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "root" / "tiny_map" / "map" / "summary.json").exists()


def test_invalid_config_aborts(runner, tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(dict(TINY_MAP, colour="red")), encoding="utf-8")
    result = runner.invoke(cli, ["map-bench", str(path)])
    assert result.exit_code != 0
    assert "colour" in result.output


def test_plan_bench_requires_robot(runner, tiny_map, tmp_path):
    result = runner.invoke(cli, ["plan-bench", tiny_map, "--seed", "0", "--output-dir", str(tmp_path / "plan")])
    assert result.exit_code != 0
    assert "no robot" in result.output


def test_echo_styled_routes_errors_to_stderr(capsys):
    echo_styled("all good", "success")
    echo_styled("boom", "fail")
    captured = capsys.readouterr()
    assert captured.out.strip() == "all good"
    assert captured.err.strip() == "boom"


def test_prepare_output_dir(tmp_path):
    nested = tmp_path / "runs" / "scenario" / "baseline"
    assert prepare_output_dir(str(nested)) == str(nested)
    assert nested.is_dir()
    assert prepare_output_dir(str(nested)) == str(nested)
    blocker = tmp_path / "taken"
    blocker.write_text("x", encoding="utf-8")
    with pytest.raises(DynreachError, match="taken"):
        prepare_output_dir(str(blocker))
