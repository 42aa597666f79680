import json
import os
import sys

import pytest
from click.testing import CliRunner

from causal_probe.cli import main

STUB = os.path.join(os.path.dirname(__file__), "stub_server.py")


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def store(tmp_path, runner):
    out = tmp_path / "store"
    result = runner.invoke(main, ["synth", "--out", str(out), "--episodes", "1",
                                  "--eta", "0.5"])
    assert result.exit_code == 0, result.output
    manifest = out / "manifest.json"
    obj = json.loads(manifest.read_text())
    obj["iss"] = {"n_masks": 8, "keep_prob": 0.3, "stride": 1,
                  "blur_sigma": 2.0, "grid": [4, 4]}
    manifest.write_text(json.dumps(obj))
    return manifest


class TestSynthCommand:
    def test_writes_store(self, runner, tmp_path):
        result = runner.invoke(main, ["synth", "--out", str(tmp_path / "s"),
                                      "--episodes", "2"])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "s" / "episode_001" / "episode.json").exists()

    def test_rerun_identical(self, runner, tmp_path):
        runner.invoke(main, ["synth", "--out", str(tmp_path / "a"), "--episodes", "1"])
        runner.invoke(main, ["synth", "--out", str(tmp_path / "b"), "--episodes", "1"])
        a = (tmp_path / "a" / "episode_000" / "frame_0001_wrist.png").read_bytes()
        b = (tmp_path / "b" / "episode_000" / "frame_0001_wrist.png").read_bytes()
        assert a == b


class TestIssCommand:
    def test_runs_and_echoes_config(self, runner, store, tmp_path):
        out = tmp_path / "out"
        result = runner.invoke(main, ["iss", "-m", str(store), "--out", str(out)])
        assert result.exit_code == 0, result.output
        run = json.loads((out / "run.json").read_text())
        assert run["manifest"]["iss"]["n_masks"] == 8
        assert run["manifest"]["iss"]["keep_prob"] == 0.3

    def test_seed_override_changes_outputs(self, runner, store, tmp_path):
        r1 = runner.invoke(main, ["iss", "-m", str(store), "--out",
                                  str(tmp_path / "o1"), "--seed", "1"])
        r2 = runner.invoke(main, ["iss", "-m", str(store), "--out",
                                  str(tmp_path / "o2"), "--seed", "2"])
        assert r1.exit_code == 0 and r2.exit_code == 0
        a = (tmp_path / "o1" / "episode_000" / "front_t0001.pfm").read_bytes()
        b = (tmp_path / "o2" / "episode_000" / "front_t0001.pfm").read_bytes()
        assert a != b

    def test_missing_manifest_is_usage_error(self, runner):
        result = runner.invoke(main, ["iss", "-m", "no-such-file.json"])
        assert result.exit_code != 0


class TestValidationExitCodes:
    def test_validation_error_exits_2(self, runner, store, tmp_path):
        obj = json.loads(store.read_text())
        obj["episodes"] = ["missing_episode"]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(obj))
        result = runner.invoke(main, ["iss", "-m", str(bad)])
        assert result.exit_code == 2
        assert "error:" in result.output

    def test_transport_error_exits_3(self, runner, store, tmp_path):
        result = runner.invoke(main, [
            "iss", "-m", str(store), "--out", str(tmp_path / "o"),
            "--policy", "tcp:localhost:1",
        ])
        assert result.exit_code == 3


class TestSweepCommand:
    def test_small_grid(self, runner, store, tmp_path):
        out = tmp_path / "out"
        result = runner.invoke(main, ["sweep", "-m", str(store), "--out", str(out),
                                      "--n-list", "4", "--p-list", "0.3"])
        assert result.exit_code == 0, result.output
        assert (out / "sweep.csv").exists()


class TestConformanceCommand:
    def test_stub_server_passes(self, runner):
        endpoint = f"stdio:{sys.executable} {STUB}"
        result = runner.invoke(main, ["serve-conformance", "--policy", endpoint,
                                      "--requests", "40"])
        assert result.exit_code == 0, result.output
        assert result.output.count("[PASS]") == 4

    def test_bad_version_fails(self, runner):
        endpoint = f"stdio:{sys.executable} {STUB} --bad-version"
        result = runner.invoke(main, ["serve-conformance", "--policy", endpoint,
                                      "--requests", "4"])
        assert result.exit_code == 3
