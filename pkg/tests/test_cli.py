import numpy as np
import pytest

from nconv import gridio
from nconv.cli import main
from nconv.networks import PipelineConfig, build_pipeline


def run(*argv):
    return main(list(argv))


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "ds"
    rc = run("synth", "--out", str(out), "--n-images", "4", "--size", "16,16",
             "--density", "0.2", "--seed", "5")
    assert rc == 0
    return out


def identity_checkpoint(path):
    """ncnn-binary with effectively-delta kernels: prediction equals input."""
    cfg = PipelineConfig(variant="ncnn-binary", eps=1e-300, a_min=1e-300,
                         ncnn_layers=((3, ""), (3, "")))
    p = build_pipeline(cfg, seed=0)
    raw = np.full((3, 3), -760.0)
    raw[1, 1] = np.log(np.expm1(1.0))
    for name in p.param_names():
        p.params[name] = raw.copy()
    gridio.save_checkpoint(p, path)
    return path


class TestSynth:
    def test_writes_expected_layout(self, dataset_dir):
        assert sorted(p.name for p in dataset_dir.iterdir()) == [
            "gt", "mask", "meta.cfg", "sparse"]
        assert len(list((dataset_dir / "sparse").glob("*.png"))) == 4

    def test_deterministic_bytes(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run("synth", "--out", str(out), "--n-images", "2",
                       "--size", "16,16", "--seed", "3") == 0
            outs.append(b"".join(sorted(p.read_bytes()
                                        for p in out.rglob("*") if p.is_file())))
        assert outs[0] == outs[1]


class TestTrainEvalPredict:
    def test_train_writes_loadable_checkpoint(self, dataset_dir, tmp_path):
        ckpt = tmp_path / "m.nck"
        rc = run("train", "--data", str(dataset_dir), "--out", str(ckpt),
                 "--variant", "pncnn", "--epochs", "1", "--batch", "2",
                 "--unet-channels", "2,3,4", "--ncnn-layers", "3,3",
                 "--seed", "0", "--quiet")
        assert rc == 0
        p = gridio.load_checkpoint(ckpt)
        assert p.cfg.variant == "pncnn"

    def test_train_determinism_across_runs(self, dataset_dir, tmp_path):
        blobs = []
        for name in ("a.nck", "b.nck"):
            ckpt = tmp_path / name
            rc = run("train", "--data", str(dataset_dir), "--out", str(ckpt),
                     "--variant", "ncnn-conf", "--epochs", "1", "--batch", "2",
                     "--unet-channels", "2,3,4", "--ncnn-layers", "3,3",
                     "--seed", "7", "--quiet")
            assert rc == 0
            blobs.append(ckpt.read_bytes())
        assert blobs[0] == blobs[1]

    def test_eval_identity_prediction_gives_zero_errors(self, tmp_path):
        # dense noiseless dataset + identity pipeline: rmse and ause are zero
        ds = tmp_path / "dense"
        assert run("synth", "--out", str(ds), "--n-images", "2", "--size", "16,16",
                   "--density", "1.0", "--outlier-frac", "0", "--noise-sigma", "0",
                   "--seed", "2") == 0
        ckpt = identity_checkpoint(tmp_path / "id.nck")
        rep = tmp_path / "report"
        assert run("eval", "--checkpoint", str(ckpt), "--data", str(ds),
                   "--out", str(rep)) == 0
        items = gridio.read_config(rep / "report.txt")
        assert float(items["rmse"]) == 0.0
        assert float(items["ause"]) == 0.0
        assert (rep / "sparsification.csv").exists()
        assert (rep / "oracle.csv").exists()

    def test_predict_writes_three_artifacts(self, dataset_dir, tmp_path):
        ckpt = identity_checkpoint(tmp_path / "id.nck")
        png = next((dataset_dir / "sparse").glob("*.png"))
        out = tmp_path / "pred"
        assert run("predict", "--checkpoint", str(ckpt), "--input", str(png),
                   "--out-dir", str(out)) == 0
        stem = png.stem
        assert (out / f"{stem}_pred.png").exists()
        assert (out / f"{stem}_conf.cgrd").exists()
        assert (out / f"{stem}_unc.cgrd").exists()


class TestFuse:
    def test_wmean_of_identical_prediction_dirs_is_identity(self, dataset_dir, tmp_path):
        ckpt = identity_checkpoint(tmp_path / "id.nck")
        png = next((dataset_dir / "sparse").glob("*.png"))
        d1, d2 = tmp_path / "m1", tmp_path / "m2"
        for d in (d1, d2):
            assert run("predict", "--checkpoint", str(ckpt), "--input", str(png),
                       "--out-dir", str(d)) == 0
        fused = tmp_path / "fused"
        assert run("fuse", "--pred-dirs", str(d1), str(d2), "--out", str(fused),
                   "--scheme", "wmean") == 0
        got = (fused / f"{png.stem}_pred.png").read_bytes()
        assert got == (d1 / f"{png.stem}_pred.png").read_bytes()

    def test_fuse_from_checkpoints_writes_report(self, tmp_path):
        ds = tmp_path / "dense"
        assert run("synth", "--out", str(ds), "--n-images", "2", "--size", "16,16",
                   "--density", "1.0", "--outlier-frac", "0", "--noise-sigma", "0",
                   "--seed", "2") == 0
        ckpt = identity_checkpoint(tmp_path / "id.nck")
        fused = tmp_path / "fused"
        assert run("fuse", "--checkpoints", str(ckpt), str(ckpt), "--data", str(ds),
                   "--out", str(fused), "--scheme", "mean") == 0
        items = gridio.read_config(fused / "report.txt")
        assert float(items["rmse"]) == 0.0

    def test_fuse_requires_inputs(self, tmp_path):
        assert run("fuse", "--out", str(tmp_path / "x")) == 2


class TestDiagnostics:
    def test_unknown_flag_exits_nonzero(self):
        assert run("synth", "--no-such-flag") != 0

    def test_missing_dataset(self, tmp_path, capsys):
        rc = run("eval", "--checkpoint", str(tmp_path / "no.nck"),
                 "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r"))
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1

    def test_corrupt_checkpoint(self, dataset_dir, tmp_path, capsys):
        bad = tmp_path / "bad.nck"
        bad.write_bytes(b"garbage")
        rc = run("eval", "--checkpoint", str(bad), "--data", str(dataset_dir),
                 "--out", str(tmp_path / "r"))
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("n-images=2\nsize=16,16\ndensity=0.5\nseed=9\n")
        out = tmp_path / "ds"
        assert run("synth", "--config", str(cfg), "--out", str(out),
                   "--n-images", "3") == 0
        assert len(list((out / "sparse").glob("*.png"))) == 3
