import os

import numpy as np
import pytest

import unisal.data as D
from unisal.cli import main
from unisal.model import load_checkpoint

RES = "24x32"


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """Three synthetic domains with roots, a config file, and one short
    training run producing a checkpoint."""
    base = tmp_path_factory.mktemp("cliworld")
    roots = {"pics": base / "pics", "glare": base / "glare",
             "vids": base / "vids"}
    assert main(["gen-data", "--out", str(roots["pics"]),
                 "--modality", "static", "--resolution", RES,
                 "--n", "3", "--seed", "0", "--center-bias", "0.8"]) == 0
    assert main(["gen-data", "--out", str(roots["glare"]),
                 "--modality", "static", "--resolution", RES,
                 "--n", "3", "--seed", "1", "--center-bias", "0.1"]) == 0
    assert main(["gen-data", "--out", str(roots["vids"]),
                 "--modality", "dynamic", "--resolution", RES,
                 "--n", "2", "--seed", "2", "--fps", "6",
                 "--frames", "6"]) == 0
    cfg = base / "run.cfg"
    cfg.write_text(
        "data.domains = "
        f"pics:static:24x32:0:{roots['pics']},"
        f"glare:static:24x32:0:{roots['glare']},"
        f"vids:dynamic:24x32:6:{roots['vids']}\n"
        "train.epochs = 1\n"
        "train.steps_per_epoch = 3\n"
        "train.clip_length = 4\n"
        "train.static_batch = 3\n"
        "train.dynamic_batch = 2\n")
    out = base / "run"
    assert main(["train", "--config", str(cfg), "--seed", "5",
                 "--out", str(out)]) == 0
    return {"base": base, "cfg": cfg, "out": out, "roots": roots,
            "ckpt": out / "model.ckpt"}


class TestTrainCommand:
    def test_artifacts_written(self, world):
        assert (world["out"] / "config.txt").exists()
        assert (world["out"] / "train_report.txt").exists()
        model = load_checkpoint(str(world["ckpt"]))
        assert model.registry.names == ["pics", "glare", "vids"]

    def test_effective_config_echo(self, world):
        text = (world["out"] / "config.txt").read_text()
        assert "train.epochs = 1" in text
        assert "train.seed = 5" in text

    def test_epochs_flag_override_echoed(self, world, tmp_path, capsys):
        out = tmp_path / "run2"
        code, *_ = run(capsys, "train", "--config", str(world["cfg"]),
                       "--seed", "5", "--out", str(out), "--epochs", "1")
        assert code == 0
        assert "train.epochs = 1" in (out / "config.txt").read_text()

    def test_missing_dataset_root_exits_2(self, world, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("data.domains = pics:static:24x32:0:/nowhere/at/all\n")
        code, _, err = run(capsys, "train", "--config", str(cfg),
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "/nowhere/at/all" in err

    def test_report_lines_structured(self, world):
        lines = (world["out"] / "train_report.txt").read_text().splitlines()
        assert any(l.startswith("epoch=0 domain=pics") for l in lines)
        assert all("loss=" in l for l in lines if l.startswith("epoch="))


class TestEvalCommand:
    def test_scores_deterministic(self, world, capsys):
        argv = ("eval", str(world["ckpt"]), "--config", str(world["cfg"]),
                "--domain", "pics", "--metrics", "kld,cc,auc_judd",
                "--seed", "3")
        code1, out1, _ = run(capsys, *argv)
        code2, out2, _ = run(capsys, *argv)
        assert code1 == code2 == 0
        assert out1 == out2
        assert "kld=" in out1 and "auc_judd=" in out1

    def test_unknown_metric_exits_2(self, world, capsys):
        code, _, err = run(capsys, "eval", str(world["ckpt"]),
                           "--config", str(world["cfg"]),
                           "--domain", "pics", "--metrics", "vibes")
        assert code == 2
        assert "auc_judd" in err and "kld" in err

    def test_unknown_domain_exits_2(self, world, capsys):
        code, _, err = run(capsys, "eval", str(world["ckpt"]),
                           "--config", str(world["cfg"]),
                           "--domain", "sports")
        assert code == 2
        assert "pics" in err

    def test_broken_checkpoint_exits_1(self, world, tmp_path, capsys):
        bad = tmp_path / "junk.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        code, _, err = run(capsys, "eval", str(bad),
                           "--config", str(world["cfg"]),
                           "--domain", "pics")
        assert code == 1

    def test_metrics_file_written(self, world, tmp_path, capsys):
        out = tmp_path / "scores"
        code, *_ = run(capsys, "eval", str(world["ckpt"]),
                       "--config", str(world["cfg"]), "--domain", "pics",
                       "--out", str(out))
        assert code == 0
        assert (out / "metrics.txt").exists()


class TestPredictCommand:
    def test_single_image_normalized_round_trip(self, world, tmp_path,
                                                capsys):
        frame = next(world["roots"]["pics"].glob("*/frames/00000.png"))
        out = tmp_path / "pred"
        code, *_ = run(capsys, "predict", str(world["ckpt"]), str(frame),
                       "--domain", "pics", "--out", str(out))
        assert code == 0
        files = sorted(out.glob("*.png"))
        assert [f.name for f in files] == ["00000.png"]
        scales = dict(
            line.split() for line in
            (out / "scales.txt").read_text().splitlines())
        m = D.read_map16(str(files[0])) * float(scales["00000.png"])
        assert abs(m.sum() - 1.0) < 1e-4

    def test_clip_ordered_heatmaps(self, world, tmp_path, capsys):
        sample = sorted(p for p in world["roots"]["vids"].iterdir()
                        if p.is_dir())[0]
        out = tmp_path / "clip"
        code, *_ = run(capsys, "predict", str(world["ckpt"]), str(sample),
                       "--domain", "vids", "--out", str(out))
        assert code == 0
        names = sorted(f.name for f in out.glob("*.png"))
        assert names == [f"{i:05d}.png" for i in range(6)]

    def test_resolution_mismatch_exits_2(self, world, tmp_path, capsys):
        wrong = tmp_path / "wrong.png"
        D.write_frame(str(wrong), np.random.default_rng(0).random((3, 16, 16)))
        code, _, err = run(capsys, "predict", str(world["ckpt"]),
                           str(wrong), "--domain", "pics",
                           "--out", str(tmp_path / "o"))
        assert code == 2
        assert "16x16" in err


class TestInspectBias:
    def test_bias_maps_written_finite(self, world, tmp_path, capsys):
        out = tmp_path / "bias"
        code, text, _ = run(capsys, "inspect-bias", str(world["ckpt"]),
                            "--out", str(out))
        assert code == 0
        for name in ("pics", "glare", "vids"):
            assert (out / f"bias_{name}.png").exists()
            assert f"domain={name}" in text
        m = D.read_map16(str(out / "bias_pics.png"))
        assert np.isfinite(m).all()

    def test_trained_domains_distinguishable(self, world, tmp_path, capsys):
        out = tmp_path / "bias2"
        run(capsys, "inspect-bias", str(world["ckpt"]), "--out", str(out))
        scales = dict(
            line.split() for line in
            (out / "scales.txt").read_text().splitlines())
        a = D.read_map16(str(out / "bias_pics.png")) \
            * float(scales["bias_pics.png"])
        b = D.read_map16(str(out / "bias_glare.png")) \
            * float(scales["bias_glare.png"])
        assert np.linalg.norm(a - b) > 0


class TestCrossDomain:
    def test_per_domain_outputs(self, world, tmp_path, capsys):
        frame = next(world["roots"]["pics"].glob("*/frames/00000.png"))
        out = tmp_path / "cross"
        code, *_ = run(capsys, "cross-domain", str(world["ckpt"]),
                       str(frame), "--domain", "pics", "--domain", "glare",
                       "--out", str(out))
        assert code == 0
        a = out / "00000_pics.png"
        b = out / "00000_glare.png"
        assert a.exists() and b.exists()
        assert a.read_bytes() != b.read_bytes()

    def test_force_shared_makes_maps_identical(self, world, tmp_path,
                                               capsys):
        frame = next(world["roots"]["pics"].glob("*/frames/00000.png"))
        out = tmp_path / "crosseq"
        code, *_ = run(capsys, "cross-domain", str(world["ckpt"]),
                       str(frame), "--domain", "pics", "--domain", "glare",
                       "--force-shared", "--out", str(out))
        assert code == 0
        assert (out / "00000_pics.png").read_bytes() == \
            (out / "00000_glare.png").read_bytes()


class TestVerifyCommand:
    def test_metrics_oracle_suite_passes(self, capsys):
        code, text, _ = run(capsys, "verify", "--suite", "metrics-oracle")
        assert code == 0
        assert "PASS metrics-oracle/auc-rank-oracle" in text
        assert "FAIL" not in text

    def test_unknown_suite_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--suite", "vibes"])
        assert exc.value.code == 2
        capsys.readouterr()


class TestReportCommand:
    def test_report_deterministic(self, capsys):
        code1, out1, _ = run(capsys, "report")
        code2, out2, _ = run(capsys, "report")
        assert code1 == code2 == 0
        assert out1 == out2
        assert "parameters:" in out1

    def test_full_profile_report(self, world, tmp_path, capsys):
        cfg = tmp_path / "full.cfg"
        cfg.write_text("model.profile = full\n")
        out = tmp_path / "rep"
        code, text, _ = run(capsys, "report", "--config", str(cfg),
                            "--out", str(out))
        assert code == 0
        assert (out / "build_report.txt").exists()
        assert "1280" in text


class TestGenData:
    def test_bad_resolution_exits_2(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out",
                           str(tmp_path / "x"), "--modality", "static",
                           "--resolution", "tiny")
        assert code == 2
        assert "HxW" in err

    def test_regeneration_identical(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for dest in (a, b):
            code, *_ = run(capsys, "gen-data", "--out", str(dest),
                           "--modality", "static", "--resolution", RES,
                           "--n", "2", "--seed", "9")
            assert code == 0
        fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert fa == fb
        for rel in fa:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
