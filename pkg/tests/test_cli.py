import json

import numpy as np
import pytest

from conftest import fibonacci_sphere
from ssmseg import dataio
from ssmseg.cli import load_config, main
from ssmseg.errors import InvalidArgumentError
from ssmseg.geometry import PointCloud, VolumeKind, make_grid, voxelize, triangulate_reference
from scipy.ndimage import gaussian_filter


def write_sphere_clouds(directory, n_clouds=6, n_points=80, seed=0):
    rng = np.random.default_rng(seed)
    dirs = fibonacci_sphere(n_points)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_clouds):
        radius = rng.uniform(16.0, 24.0)
        path = directory / f"case{i:02d}.csv"
        dataio.write_cloud(PointCloud(radius * dirs), path)
        paths.append(path)
    return paths


FAST_FIT_CFG = {
    "fit": {"norm_kind": "l2", "swarm_size": 24, "max_iters": 50, "stall_iters": 20, "seed": 0},
    "phantom": {"noise": 0.0, "blur_sigma": 1.0, "dropout": 0.0, "seed": 3, "spacing": 1.5},
}


class TestConfig:
    def test_sections_and_aliases(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({
            "cpd": {"lambda": 2.5, "beta": 1.5},
            "fit": {"alpha": 0.2, "bounds": [[0, 1], [2, 3]]},
            "metrics": {"axis": "y", "apex_low": False},
        }))
        cfg = load_config(p)
        assert cfg["cpd"].lam == 2.5
        assert cfg["fit"].alpha == 0.2
        assert cfg["fit"].bounds.shape == (2, 2)
        assert cfg["axis"] == 1 and cfg["apex_low"] is False

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text('{"nope": {}}')
        with pytest.raises(InvalidArgumentError):
            load_config(p)

    def test_default_config(self):
        cfg = load_config(None)
        assert cfg["variance_target"] == 0.90
        assert cfg["axis"] == 2


class TestBuildSsm:
    def test_end_to_end_dominant_mode(self, tmp_path, capsys):
        clouds = write_sphere_clouds(tmp_path / "clouds", n_clouds=8)
        out = tmp_path / "model.ssm"
        rc = main([
            "build-ssm", "--clouds", str(tmp_path / "clouds"),
            "--reference", str(clouds[0]), "--variance", "0.90", "--out", str(out),
        ])
        assert rc == 0
        model = dataio.read_model(out)
        assert model.population == 8
        assert model.eigenvalues[0] / model.total_variance >= 0.99
        assert (tmp_path / "model.correspondence.json").exists()
        assert (tmp_path / "manifest.json").exists()

    def test_rerun_identical_bytes(self, tmp_path):
        clouds = write_sphere_clouds(tmp_path / "clouds", n_clouds=5, n_points=60)
        out1, out2 = tmp_path / "a.ssm", tmp_path / "b.ssm"
        for out in (out1, out2):
            rc = main([
                "build-ssm", "--clouds", str(tmp_path / "clouds"),
                "--reference", str(clouds[1]), "--out", str(out),
            ])
            assert rc == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_too_few_clouds(self, tmp_path, capsys):
        clouds = write_sphere_clouds(tmp_path / "clouds", n_clouds=2)
        rc = main([
            "build-ssm", "--clouds", str(tmp_path / "clouds"),
            "--reference", str(clouds[0]), "--out", str(tmp_path / "m.ssm"),
        ])
        assert rc == 2
        assert "at least 3" in capsys.readouterr().err


class TestSynthAndFit:
    def test_synth_reproducible(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"phantom": FAST_FIT_CFG["phantom"]}))
        rc = main(["synth", "--spec", str(spec), "--n", "2", "--seed", "1",
                   "--out", str(tmp_path / "s1")])
        assert rc == 0
        rc = main(["synth", "--spec", str(spec), "--n", "2", "--seed", "1",
                   "--out", str(tmp_path / "s2")])
        assert rc == 0
        for name in ("maps/p000.sfv", "maps/p001.sfv", "truth/p000.sfv"):
            assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()

    def test_fit_missing_model_exit_2(self, tmp_path, capsys):
        rc = main(["fit", "--model", str(tmp_path / "absent.ssm"),
                   "--map", str(tmp_path / "absent.sfv"), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "absent.ssm" in capsys.readouterr().err

    def test_fit_round_trip_and_seed_determinism(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(FAST_FIT_CFG))
        model = dataio.builtin_model()
        model_path = tmp_path / "model.ssm"
        dataio.write_model(model, model_path)
        rc = main(["synth", "--spec", str(cfg_path), "--n", "1", "--seed", "5",
                   "--out", str(tmp_path / "ph")])
        assert rc == 0

        args = ["fit", "--model", str(model_path), "--map", str(tmp_path / "ph/maps/p000.sfv"),
                "--config", str(cfg_path), "--seed", "7",
                "--truth", str(tmp_path / "ph/truth/p000.sfv")]
        rc = main(args + ["--out", str(tmp_path / "f1"), "--overlay"])
        assert rc == 0
        rc = main(args + ["--out", str(tmp_path / "f2")])
        assert rc == 0
        p1 = (tmp_path / "f1/params.json").read_bytes()
        p2 = (tmp_path / "f2/params.json").read_bytes()
        assert p1 == p2
        summary = json.loads((tmp_path / "f1/summary.json").read_text())
        assert summary["jsc"][0] >= 90.0
        assert (tmp_path / "f1/mask.sfv").exists()
        assert (tmp_path / "f1/trace.csv").read_text().splitlines()[0] == "iteration,best_utility"
        assert list((tmp_path / "f1/overlays").glob("slice_*.pgm"))

    def test_fit_degenerate_map_exit_1(self, tmp_path, capsys):
        model = dataio.builtin_model()
        model_path = tmp_path / "model.ssm"
        dataio.write_model(model, model_path)
        grid = make_grid(np.full(3, -5.0), np.full(3, 5.0), 1.0)
        zeros = grid.like(np.zeros(grid.dims, np.float32), VolumeKind.PROBABILITY)
        map_path = tmp_path / "zeros.sfv"
        dataio.write_volume(zeros, map_path)
        rc = main(["fit", "--model", str(model_path), "--map", str(map_path),
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "empty" in capsys.readouterr().err


class TestEval:
    def test_identical_dirs_all_100(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"phantom": FAST_FIT_CFG["phantom"]}))
        main(["synth", "--spec", str(spec), "--n", "2", "--seed", "2",
              "--out", str(tmp_path / "ph")])
        out = tmp_path / "table.csv"
        rc = main(["eval", "--pred", str(tmp_path / "ph/truth"),
                   "--truth", str(tmp_path / "ph/truth"), "--axis", "z", "--out", str(out)])
        assert rc == 0
        rows = out.read_text().strip().splitlines()
        assert rows[0] == "case_id,overall,apex,midgland,base"
        for line in rows[1:]:
            assert all(float(v) == 100.0 for v in line.split(",")[1:])
        summary = (tmp_path / "table_summary.csv").read_text()
        assert "total" in summary

    def test_missing_truth_exit_2(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"phantom": FAST_FIT_CFG["phantom"]}))
        main(["synth", "--spec", str(spec), "--n", "1", "--seed", "2",
              "--out", str(tmp_path / "ph")])
        rc = main(["eval", "--pred", str(tmp_path / "ph/truth"),
                   "--truth", str(tmp_path / "ph/maps_nope"), "--axis", "z",
                   "--out", str(tmp_path / "t.csv")])
        assert rc == 2


class TestRecon:
    def test_constant_frames(self, tmp_path):
        frames_dir = tmp_path / "frames"
        frames_dir.mkdir()
        for i in range(6):
            np.save(frames_dir / f"f{i:02d}.npy", np.full((12, 10), 3.5))
        angles = tmp_path / "angles.csv"
        angles.write_text("angle_deg\n" + "\n".join(str(10.0 * i) for i in range(6)) + "\n")
        out = tmp_path / "vol.sfv"
        rc = main(["recon", "--frames", str(frames_dir), "--angles", str(angles),
                   "--spacing", "1.0", "--pixel-spacing", "1.0,1.0",
                   "--radial-offset", "2.0", "--out", str(out),
                   "--valid-out", str(tmp_path / "valid.sfv")])
        assert rc == 0
        vol = dataio.read_volume(out)
        valid = dataio.read_volume(tmp_path / "valid.sfv").as_bool()
        assert valid.any()
        assert np.allclose(vol.data[valid], 3.5, atol=1e-6)
        assert np.all(vol.data[~valid] == 0.0)

    def test_angle_count_mismatch_exit_2(self, tmp_path, capsys):
        frames_dir = tmp_path / "frames"
        frames_dir.mkdir()
        np.save(frames_dir / "f0.npy", np.zeros((4, 4)))
        angles = tmp_path / "angles.csv"
        angles.write_text("angle_deg\n0\n10\n")
        rc = main(["recon", "--frames", str(frames_dir), "--angles", str(angles),
                   "--spacing", "1.0", "--out", str(tmp_path / "v.sfv")])
        assert rc == 2


def build_loo_cases(root, n_cases=4, seed=0):
    """Per-case surface cloud plus one blurred-mask probability map and truth."""
    rng = np.random.default_rng(seed)
    dirs = fibonacci_sphere(80)
    for i in range(n_cases):
        case = root / f"case{i}"
        (case / "maps").mkdir(parents=True)
        (case / "truth").mkdir()
        radius = rng.uniform(17.0, 23.0)
        cloud = PointCloud(radius * dirs)
        dataio.write_cloud(cloud, case / "cloud.csv")
        grid = make_grid(np.full(3, -30.0), np.full(3, 30.0), 1.5)
        truth = voxelize(triangulate_reference(cloud), grid)
        prob = gaussian_filter(truth.data.astype(np.float64), 1.0 / np.asarray(grid.spacing))
        pm = grid.like(np.clip(prob, 0, 1).astype(np.float32), VolumeKind.PROBABILITY)
        dataio.write_volume(pm, case / "maps" / "v0.sfv")
        dataio.write_volume(truth, case / "truth" / "v0.sfv")


class TestLoo:
    @pytest.mark.parametrize("jobs", [1, 2])
    def test_leave_one_out_report(self, tmp_path, capsys, jobs):
        build_loo_cases(tmp_path / "cases", n_cases=5)
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "fit": {"norm_kind": "l2", "swarm_size": 20, "max_iters": 40,
                    "stall_iters": 15, "seed": 0},
            "ssm": {"variance_target": 0.95},
        }))
        out = tmp_path / "report"
        rc = main(["loo", "--cases", str(tmp_path / "cases"), "--config", str(cfg),
                   "--jobs", str(jobs), "--out", str(out)])
        assert rc == 0
        scores = (out / "scores.csv").read_text().strip().splitlines()
        assert len(scores) == 1 + 5  # header + one volume per case
        report = (out / "report.csv").read_text().strip().splitlines()
        assert len(report) == 1 + 5 + 1  # header + case rows + total
        assert report[-1].startswith("total,")
        for i in range(5):
            case_info = json.loads((out / f"case{i}" / "case.json").read_text())
            assert case_info["model_population"] == 4  # excluded its own cloud
            model = dataio.read_model(out / f"case{i}" / "model.ssm")
            assert model.population == 4

    def test_single_case_rejected(self, tmp_path, capsys):
        build_loo_cases(tmp_path / "cases", n_cases=1)
        rc = main(["loo", "--cases", str(tmp_path / "cases"),
                   "--out", str(tmp_path / "r")])
        assert rc == 2
        assert "at least 2" in capsys.readouterr().err

    def test_case_failure_isolated(self, tmp_path, capsys):
        build_loo_cases(tmp_path / "cases", n_cases=4)
        # corrupt one case's map so only that case fails
        bad = tmp_path / "cases" / "case1" / "maps" / "v0.sfv"
        bad.write_bytes(b"SFV1\n{broken")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "fit": {"norm_kind": "l2", "swarm_size": 16, "max_iters": 30,
                    "stall_iters": 10, "seed": 0}}))
        out = tmp_path / "report"
        rc = main(["loo", "--cases", str(tmp_path / "cases"), "--config", str(cfg),
                   "--out", str(out)])
        assert rc == 1
        errors = json.loads((out / "errors.json").read_text())
        assert set(errors) == {"case1"}
        scores = (out / "scores.csv").read_text().strip().splitlines()
        assert len(scores) == 1 + 3  # the healthy cases got through
