import json

import numpy as np
import pytest

from aberforge import cli, optics, simulate
from aberforge.raytrace import load_psf_grid

from conftest import make_singlet


@pytest.fixture(scope="module")
def lens_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("lens") / "singlet.json"
    optics.save_lens(make_singlet(), path)
    return str(path)


@pytest.fixture(scope="module")
def psf_file(tmp_path_factory, lens_file):
    path = tmp_path_factory.mktemp("psf") / "grid.psfg"
    rc = cli.main(
        [
            "psf", "--lens", lens_file, "--out", str(path),
            "--n-fov", "8", "--n-wave", "5", "--rays", "2000",
        ]
    )
    assert rc == 0
    return str(path)


class TestTrace:
    def test_writes_spots(self, tmp_path, lens_file):
        out = tmp_path / "spots.csv"
        rc = cli.main(
            ["trace", "--lens", lens_file, "--field", "2.0", "--out", str(out)]
        )
        assert rc == 0
        data = np.loadtxt(out, delimiter=",", skiprows=1)
        assert data.shape[1] == 2

    def test_missing_lens_is_exit_1(self, tmp_path):
        rc = cli.main(
            ["trace", "--lens", str(tmp_path / "nope.json"), "--out", "x.csv"]
        )
        assert rc == 1

    def test_bad_usage_is_exit_2(self):
        assert cli.main(["trace"]) == 2
        assert cli.main(["frobnicate"]) == 2


class TestPSF:
    def test_grid_contract(self, psf_file):
        g = load_psf_grid(psf_file)
        assert g.n_fov == 8 and g.n_wave == 5

    def test_run_summary_written(self, psf_file):
        summary = json.loads(open(psf_file + ".run.json").read())
        assert summary["subcommand"] == "psf"
        assert summary["outputs"]


class TestSimulate:
    def test_degrades_image(self, tmp_path, psf_file):
        board = tmp_path / "board.png"
        simulate.save_image(board, simulate.checkerboard(256))
        out = tmp_path / "degraded.png"
        rc = cli.main(
            [
                "simulate", "--image", str(board), "--psf", psf_file,
                "--out", str(out), "--seed", "3",
            ]
        )
        assert rc == 0
        degraded = simulate.load_image(out)
        assert degraded.shape == (256, 256, 3)


class TestQuantifyClassify:
    def test_report(self, tmp_path, lens_file, psf_file):
        out = tmp_path / "report.json"
        rc = cli.main(
            ["quantify", "--lens", lens_file, "--psf", psf_file, "--out", str(out)]
        )
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["severity"] in ("Strong", "Medium", "Mild")
        assert doc["od_class"] in range(6)

        assert cli.main(["classify", "--report", str(out)]) == 0

    def test_classify_from_values(self, capsys):
        rc = cli.main(["classify", "--oiq", "0.8", "0.7", "0.6", "0.5", "0.4"])
        assert rc == 0
        assert "OD-Class 1" in capsys.readouterr().out


class TestGenSourceAndSample:
    def test_pipeline(self, tmp_path):
        lens_dir = tmp_path / "lenses"
        rc = cli.main(
            [
                "gen-source", "--count", "4", "--out-dir", str(lens_dir),
                "--seed", "1", "--population", "12", "--generations", "4",
            ]
        )
        assert rc == 0
        lens_paths = sorted(lens_dir.glob("lens_*.json"))
        assert len(lens_paths) >= 4
        for p in lens_paths:
            optics.load_lens(p)

    def test_sample_deficit_is_exit_1(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        rc = cli.main(
            [
                "sample", "--source-dir", str(src), "--out-dir",
                str(tmp_path / "out"), "--m1", "1", "--m2", "1",
            ]
        )
        assert rc == 1


class TestVQCommands:
    def test_fit_and_quantize(self, tmp_path, psf_file):
        pm_path = tmp_path / "map.psfm"
        rc = cli.main(
            [
                "psfmap", "--psf", psf_file, "--height", "32", "--width", "32",
                "--np", "8", "--out", str(pm_path),
            ]
        )
        assert rc == 0

        from aberforge import psf_repr

        pm = psf_repr.load_psf_map(pm_path)
        feats = tmp_path / "feats.npy"
        np.save(feats, pm.features.astype(np.float32))

        cb_path = tmp_path / "book.vqcb"
        rc = cli.main(
            [
                "fit-codebook", "--features", str(feats), "--k", "4",
                "--seed", "0", "--out", str(cb_path),
            ]
        )
        assert rc == 0

        q_path = tmp_path / "quantized.npz"
        rc = cli.main(
            [
                "quantize", "--codebook", str(cb_path), "--features",
                str(feats), "--out", str(q_path),
            ]
        )
        assert rc == 0
        data = np.load(q_path)
        assert len(data["indices"]) == len(pm.features)


class TestPlot:
    def test_oiq_curve(self, tmp_path, lens_file, psf_file):
        report = tmp_path / "report.json"
        assert (
            cli.main(
                [
                    "quantify", "--lens", lens_file, "--psf", psf_file,
                    "--out", str(report),
                ]
            )
            == 0
        )
        out_dir = tmp_path / "plots"
        rc = cli.main(["plot", "--report", str(report), "--out-dir", str(out_dir)])
        assert rc == 0
        assert (out_dir / "oiq_vs_fov.png").exists()


class TestSeedEnv:
    def test_env_seed_fallback(self, tmp_path, monkeypatch, psf_file):
        board = tmp_path / "board.png"
        simulate.save_image(board, simulate.checkerboard(128))
        monkeypatch.setenv("ABERFORGE_SEED", "17")
        out1 = tmp_path / "a.pfm"
        out2 = tmp_path / "b.pfm"
        args = ["simulate", "--image", str(board), "--psf", psf_file,
                "--read-sigma", "0.02"]
        assert cli.main(args + ["--out", str(out1)]) == 0
        assert cli.main(args + ["--out", str(out2)]) == 0
        np.testing.assert_array_equal(
            simulate.load_image(out1), simulate.load_image(out2)
        )
