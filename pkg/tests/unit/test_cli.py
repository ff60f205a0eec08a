"""Tests for the Typer CLI: argument handling, exit codes and artifact evaluation."""

import pytest
from typer.testing import CliRunner

from scanloop.cli import EXIT_REGISTRATION, EXIT_USAGE, EXIT_VALIDATION, app, main
from scanloop.common.exceptions import NoMatchesError, OracleError
from scanloop.common.jsonl import read_jsonl, write_jsonl
from scanloop.geometry import RigidTransform
from scanloop.harness import selftest
from scanloop.slam.trajectory import StampedPose, write_tum

runner = CliRunner()

TINY = """\
backbone:
  cells: [0.5, 1.0, 2.0]
  widths: [4, 6, 8]
  kernel_points: 5
  dense_dim: 4
roformer:
  blocks: 1
votes:
  descriptor_dim: 4
retrieval:
  clusters: 2
  descriptor_dim: 4
harness:
  scan_range: 15.0
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


class TestUsage:
    def test_help_lists_commands(self):
        result = runner.invoke(app, ["--help"])
        assert result.exit_code == 0
        for command in ("register", "retrieve", "slam-run", "train-toy", "eval", "selftest"):
            assert command in result.stdout

    def test_unknown_flag(self):
        assert main(["selftest", "--bogus"]) == EXIT_USAGE

    def test_unknown_command(self):
        assert main(["calibrate"]) == EXIT_USAGE

    def test_bad_choice(self):
        assert main(["register", "--solver", "icp"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["--config", str(tmp_path / "none.yaml"), "selftest"]) == EXIT_USAGE

    def test_kitti_needs_network_registrar(self):
        assert main(["slam-run", "--kitti-sequence", "00"]) == EXIT_USAGE

    def test_stage_two_needs_checkpoint(self):
        assert main(["train-toy", "--stage", "2"]) == EXIT_USAGE

    def test_eval_needs_inputs(self):
        assert main(["eval"]) == EXIT_USAGE


class TestExitCodes:
    def test_invalid_config_values(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("registration:\n  rte_threshold: -1.0\n")
        assert main(["--config", str(path), "selftest", "--only", "se3"]) == EXIT_VALIDATION

    def test_invalid_config_values_with_runner(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("slam:\n  keyframe_distance: 0\n")
        result = runner.invoke(app, ["--config", str(path), "selftest"])
        assert result.exit_code == EXIT_VALIDATION
        assert "INVALID_CONFIG" in result.stdout

    def test_registration_failure(self, tiny_config, monkeypatch):
        def no_matches(*args, **kwargs):
            raise NoMatchesError("no dense matches")

        monkeypatch.setattr("scanloop.harness.experiments.evaluate_pair", no_matches)
        code = main(["--config", str(tiny_config), "register", "--scene", "urban", "--seed", "7"])
        assert code == EXIT_REGISTRATION

    def test_unknown_selftest_check(self):
        assert main(["selftest", "--only", "nope"]) == EXIT_VALIDATION


class TestSelftest:
    def test_quick_checks(self):
        assert main(["selftest", "--only", "se3", "--only", "kitti"]) == 0

    def test_failed_check_exits_nonzero(self, monkeypatch):
        def broken() -> str:
            raise OracleError("mismatch")

        monkeypatch.setitem(selftest.CHECKS, "broken", broken)
        result = runner.invoke(app, ["selftest", "--only", "broken"])
        assert result.exit_code == EXIT_VALIDATION
        assert "FAIL" in result.stdout


class TestEval:
    def test_registration_summary(self, tmp_path):
        results = write_jsonl(
            tmp_path / "pairs.jsonl",
            [
                {"metrics": {"success": True, "rte": 0.2, "rre": 1.0, "rye": 0.5}},
                {"metrics": {"success": False, "rte": 4.0, "rre": 9.0, "rye": 9.0}},
            ],
        )
        out = tmp_path / "eval.jsonl"
        assert main(["eval", "--results", str(results), "--output", str(out)]) == 0
        (record,) = read_jsonl(out)
        assert record["registration"]["registration_recall"] == 0.5
        assert record["registration"]["mean_rte"] == pytest.approx(0.2)
        assert record["config"]["task"] == "eval"

    def test_trajectory_ape(self, tmp_path):
        poses = [
            StampedPose(0.1 * k, RigidTransform.from_yaw(0.1 * k, (float(k), 0.0, 0.0)))
            for k in range(6)
        ]
        estimate = write_tum(tmp_path / "est.txt", poses)
        reference = write_tum(tmp_path / "ref.txt", poses)
        out = tmp_path / "eval.jsonl"
        args = ["eval", "--estimate", str(estimate), "--reference", str(reference)]
        assert main([*args, "--output", str(out)]) == 0
        (record,) = read_jsonl(out)
        assert record["ape"]["poses"] == 6
        assert record["ape"]["max"] == pytest.approx(0.0, abs=1e-6)

    def test_malformed_trajectory(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("0.0 1.0 2.0\n")
        args = ["eval", "--estimate", str(bad), "--reference", str(bad)]
        assert main(args) == EXIT_VALIDATION
