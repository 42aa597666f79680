import csv
import json

import numpy as np
import pytest

from causal_probe.errors import DegenerateMapError, ParameterError
from causal_probe.harness import (
    correlate_tables,
    load_manifest,
    run_bench,
    run_fidelity,
    run_iss,
    run_robustness,
    run_sweep,
    run_synth,
)
from causal_probe.synth import SceneSpec, write_synthetic_store


def small_scene(seed=0, task="t"):
    return SceneSpec(width=32, height=32, n_frames=3, act_size=(8, 8),
                     sup_size=(8, 6), seed=seed, task=task, views=("front",),
                     action_dim=4)


@pytest.fixture
def store(tmp_path):
    scene = small_scene()
    write_synthetic_store(scene, tmp_path, n_episodes=2, eta=0.5)
    # shrink the masking config so driver tests stay fast
    manifest_path = tmp_path / "manifest.json"
    obj = json.loads(manifest_path.read_text())
    obj["iss"] = {"n_masks": 12, "keep_prob": 0.3, "stride": 1,
                  "blur_sigma": 2.0, "grid": [4, 4]}
    manifest_path.write_text(json.dumps(obj))
    return manifest_path


class TestManifest:
    def test_load_and_overrides(self, store, tmp_path):
        m = load_manifest(store, seed=42, out="elsewhere")
        assert m.master_seed == 42
        assert m.out_dir == "elsewhere"
        assert len(m.episode_dirs) == 2
        assert m.iss.n_masks == 12

    def test_missing_episode_rejected(self, store, tmp_path):
        obj = json.loads(store.read_text())
        obj["episodes"].append("nope")
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(obj))
        with pytest.raises(ParameterError, match="episode"):
            load_manifest(bad)

    def test_bad_k_rejected(self, store, tmp_path):
        obj = json.loads(store.read_text())
        obj["k"] = [0.0]
        bad = tmp_path / "badk.json"
        bad.write_text(json.dumps(obj))
        with pytest.raises(ParameterError, match="k value"):
            load_manifest(bad)


class TestRunIss:
    def test_output_tree_and_determinism(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out1"))
        report = run_iss(m)
        out = tmp_path / "out1"
        assert (out / "run.json").exists()
        assert (out / "metrics.csv").exists()
        ep_dir = out / report["episodes"][0]["dir"]
        assert (ep_dir / "front_t0001.pfm").exists()
        assert (ep_dir / "front_t0001_overlay.png").exists()
        assert (ep_dir / "stream.json").exists()

        m2 = load_manifest(store, out=str(tmp_path / "out2"))
        run_iss(m2)
        a = (out / report["episodes"][0]["dir"] / "front_t0002.pfm").read_bytes()
        b = (tmp_path / "out2" / report["episodes"][0]["dir"] / "front_t0002.pfm").read_bytes()
        assert a == b
        csv_a = (out / "metrics.csv").read_bytes()
        csv_b = (tmp_path / "out2" / "metrics.csv").read_bytes()
        assert csv_a == csv_b

    def test_metrics_rows_have_fixed_header(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out"))
        run_iss(m)
        with open(tmp_path / "out" / "metrics.csv") as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = list(reader)
        assert header == ["run_id", "view", "t", "k", "nmr", "rho_act", "rho_sup",
                          "rho_nuis", "delta_s", "delta_a"]
        # 2 episodes x 1 view x 3 frames x 5 k values
        assert len(rows) == 2 * 3 * 5
        for row in rows:
            if row[4]:
                assert 0.0 <= float(row[4]) <= 1.0

    def test_stride_marks_interpolated_frames(self, store, tmp_path):
        obj = json.loads(store.read_text())
        obj["iss"]["stride"] = 2
        (store).write_text(json.dumps(obj))
        m = load_manifest(store, out=str(tmp_path / "out"))
        report = run_iss(m)
        assert report["episodes"][0]["computed_frames"] == [1, 3]


class TestRunSweep:
    def test_single_cell(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out"))
        path = run_sweep(m, [8], [0.3])
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0][:2] == ["n_masks", "keep_prob"]
        assert len(rows) == 2
        assert rows[1][0] == "8"
        avg_mean = float(rows[1][6])
        assert np.isfinite(avg_mean)

    def test_grid_order_n_major(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out"))
        path = run_sweep(m, [4, 8], [0.2, 0.4])
        with open(path) as f:
            rows = list(csv.reader(f))[1:]
        assert [(r[0], r[1]) for r in rows] == [
            ("4", "0.2"), ("4", "0.4"), ("8", "0.2"), ("8", "0.4")
        ]

    def test_empty_lists_rejected(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out"))
        with pytest.raises(ParameterError):
            run_sweep(m, [], [0.3])


class TestRunRobustness:
    def test_eta_zero_policy_is_immune(self, tmp_path):
        # static scene: the bound partition matches every frame, so noise in
        # the nuisance region cannot move an eta=0 policy's action at all
        scene = small_scene(seed=3)
        scene.static_blocks = True
        write_synthetic_store(scene, tmp_path, n_episodes=1, eta=0.0)
        manifest_path = tmp_path / "manifest.json"
        obj = json.loads(manifest_path.read_text())
        obj["iss"] = {"n_masks": 10, "keep_prob": 0.3, "stride": 1,
                      "blur_sigma": 2.0, "grid": [4, 4]}
        manifest_path.write_text(json.dumps(obj))
        m = load_manifest(manifest_path, out=str(tmp_path / "out"))
        report = run_robustness(m)
        assert report["mean_selected"]["delta_a"] == 0.0
        assert report["mean_selected"]["delta_s"] > 0.99
        assert (tmp_path / "out" / "robustness.csv").exists()
        assert (tmp_path / "out" / "robustness.png").exists()

    def test_eta_one_policy_moves(self, tmp_path):
        scene = small_scene(seed=4)
        write_synthetic_store(scene, tmp_path, n_episodes=1, eta=1.0)
        manifest_path = tmp_path / "manifest.json"
        obj = json.loads(manifest_path.read_text())
        obj["iss"] = {"n_masks": 6, "keep_prob": 0.3, "stride": 1,
                      "blur_sigma": 2.0, "grid": [4, 4]}
        manifest_path.write_text(json.dumps(obj))
        m = load_manifest(manifest_path, out=str(tmp_path / "out"))
        report = run_robustness(m)
        assert report["mean_selected"]["delta_a"] > 0.0

    def test_quantile_selects_low_mse_episodes(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out"))
        report = run_robustness(m, select_quantile=0.5)
        deltas = [e["delta_a"] for e in report["episodes"]]
        assert report["mean_selected"]["delta_a"] == pytest.approx(min(deltas))


class TestRunFidelity:
    def test_reports_all_methods_and_kinds(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out"))
        report = run_fidelity(m, lam=1.0)
        assert set(report["correlations"]) == {"texture", "geometric", "patch"}
        for per in report["correlations"].values():
            assert set(per) == {"iss", "att", "norm"}
        assert (tmp_path / "out" / "fidelity.csv").exists()
        assert (tmp_path / "out" / "fidelity_summary.png").exists()

    def test_zero_strength_reports_degeneracy(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out"))
        report = run_fidelity(m, lam=0.0)
        # patch ignores lam; texture and geometric become identities
        assert report["correlations"]["texture"]["iss"] == "n/a (zero variance)"
        assert report["correlations"]["geometric"]["iss"] == "n/a (zero variance)"


class TestCorrelateTables:
    def test_perfect_anticorrelation(self):
        ks = [1.0, 5.0, 10.0]
        nmr_table = {}
        success = {}
        for i in range(6):
            nmr_val = i / 5.0
            nmr_table[(f"task{i}", 0)] = {k: nmr_val for k in ks}
            success[(f"task{i}", 0)] = 1.0 - nmr_val
        per_k = correlate_tables(nmr_table, success, ks)
        for k in ks:
            assert per_k[str(k)]["r"] == pytest.approx(-1.0)
            assert per_k[str(k)]["per_seed"]["0"] == pytest.approx(-1.0)

    def test_constant_success_degenerate(self):
        ks = [10.0]
        nmr_table = {(f"t{i}", 0): {10.0: i / 3} for i in range(4)}
        success = {(f"t{i}", 0): 0.5 for i in range(4)}
        with pytest.raises(DegenerateMapError):
            correlate_tables(nmr_table, success, ks)


class TestRunBench:
    def test_rows_and_finite_values(self, store, tmp_path):
        m = load_manifest(store, out=str(tmp_path / "out"))
        path = run_bench(m, [4, 8], [0.3], repeats=1)
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["n_masks", "keep_prob", "latency_s", "hz", "slowdown"]
        assert len(rows) == 3
        for row in rows[1:]:
            assert float(row[2]) > 0
            assert float(row[3]) > 0
            assert float(row[4]) > 0


class TestRunSynth:
    def test_default_scene(self, tmp_path):
        manifest = run_synth(None, tmp_path / "s", n_episodes=1)
        assert (tmp_path / "s" / "manifest.json").exists()
        assert manifest["scene"]["width"] == 64
