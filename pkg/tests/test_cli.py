import os

import numpy as np
import pytest

from nae import analysis as an
from nae import cli
from nae import config as cf
from nae import data as nd
from nae import model as nm
from nae import noise as nz
from nae import training as tr
from nae.numeric import Rng


@pytest.fixture
def idx_dir(tmp_path):
    """Forty 6x6 three-class training digits and twenty test digits in IDX files."""
    rng = Rng(0)
    d = tmp_path / "idx"
    d.mkdir()
    for split, n in (("train", 40), ("test", 20)):
        labels = (np.arange(n) % 3).astype(np.uint8)
        imgs = rng.integers(0, 60, size=(n, 6, 6)).astype(np.uint8)
        for i, lab in enumerate(labels):
            imgs[i, 2 * lab: 2 * lab + 2] = 255
        nd.write_idx(d / f"{split}-images", images=imgs)
        nd.write_idx(d / f"{split}-labels", labels=labels)
    return d


def idx_sets(d):
    return [f"--set=data.{s}_{k}={d}/{s}-{k}" for s in ("train", "test") for k in ("images", "labels")]


SMALL_PATCHES = ["--set=data.synthetic_images=2", "--set=data.image_size=32", "--set=data.patch_edge=4",
                 "--set=data.n_patches=200", "--set=train.hidden=5", "--set=train.epochs=2",
                 "--set=noise.input=gaussian:0.1"]


def train_model(out, seed=7, extra=()):
    return cli.main(["train", "--seed", str(seed), "--out", str(out), *SMALL_PATCHES, *extra])


class TestTrain:
    def test_artifacts(self, tmp_path, capsys):
        assert train_model(tmp_path / "run") == 0
        files = sorted(os.listdir(tmp_path / "run"))
        assert files == ["config.txt", "filters.pgm", "model.ckpt", "trainlog.csv"]
        params, extra = nm.load_checkpoint(tmp_path / "run" / "model.ckpt")
        assert params.W.shape == (5, 16)
        assert nz.NoiseSpec.from_dict(extra["noise"]).input == nz.gaussian(0.1)
        assert len((tmp_path / "run" / "trainlog.csv").read_text().splitlines()) == 3
        assert nd.read_pgm(tmp_path / "run" / "filters.pgm").ndim == 2

    def test_seed_reproducible(self, tmp_path):
        assert train_model(tmp_path / "a") == 0
        assert train_model(tmp_path / "b") == 0
        a = (tmp_path / "a" / "model.ckpt").read_bytes()
        assert a == (tmp_path / "b" / "model.ckpt").read_bytes()
        assert train_model(tmp_path / "c", seed=8) == 0
        assert a != (tmp_path / "c" / "model.ckpt").read_bytes()

    def test_effective_config_reloads(self, tmp_path):
        assert train_model(tmp_path / "a") == 0
        cfg = cf.load_config(tmp_path / "a" / "config.txt")
        assert cfg["train.seed"] == 7 and cfg["train.hidden"] == 5
        assert cli.main(["train", "--config", str(tmp_path / "a" / "config.txt"), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()

    def test_refuses_overwrite(self, tmp_path, capsys):
        assert train_model(tmp_path / "a") == 0
        before = (tmp_path / "a" / "model.ckpt").read_bytes()
        assert train_model(tmp_path / "a", seed=9) == 2
        assert "--force" in capsys.readouterr().err
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == before
        assert train_model(tmp_path / "a", seed=9, extra=["--force"]) == 0
        assert (tmp_path / "a" / "model.ckpt").read_bytes() != before

    def test_missing_data_writes_nothing(self, tmp_path, capsys):
        rc = cli.main(["train", "--seed", "1", "--out", str(tmp_path / "x"),
                       "--set", f"data.train_images={tmp_path}/nope"])
        assert rc == 2
        assert "no such file" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_missing_seed(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path / "x"), *SMALL_PATCHES]) == 2
        assert not (tmp_path / "x").exists()

    def test_unknown_key(self, tmp_path, capsys):
        assert cli.main(["train", "--seed", "1", "--set", "train.speed=3", "--out", str(tmp_path)]) == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_bad_config_file(self, tmp_path, capsys):
        path = tmp_path / "c.txt"
        path.write_text("[train]\nepochs = many\n")
        assert cli.main(["train", "--config", str(path), "--seed", "1", "--out", str(tmp_path / "o")]) == 2
        assert "c.txt:2" in capsys.readouterr().err

    def test_divergence_exit_one(self, tmp_path, capsys):
        rc = train_model(tmp_path / "d", extra=["--set=train.learning_rate=1e4", "--set=train.epochs=5"])
        assert rc == 1
        assert not (tmp_path / "d").exists()


class TestOtherCommands:
    def test_patches_export_and_denoise(self, tmp_path, capsys):
        pfile = tmp_path / "p.bin"
        assert cli.main(["make-patches", "-o", str(pfile), "--seed", "3", "--n", "50", "--edge", "4",
                         "--synthetic", "2", "--size", "16"]) == 0
        ps = nd.read_patches(pfile)
        assert ps.patch_edge == 4 and ps.patches.shape == (50, 16)
        assert cli.main(["make-patches", "-o", str(pfile), "--seed", "3"]) == 2
        assert train_model(tmp_path / "m") == 0
        model = str(tmp_path / "m" / "model.ckpt")
        assert cli.main(["export-filters", "--model", model, "-o", str(tmp_path / "f.pgm"), "--decoder"]) == 0
        assert nd.read_pgm(tmp_path / "f.pgm").ndim == 2
        capsys.readouterr()
        assert cli.main(["denoise-eval", "--model", model, "--patches", str(pfile), "--seed", "1",
                         "--noise-var", "0.1", "--out", str(tmp_path / "e")]) == 0
        value = float(capsys.readouterr().out.split()[1])
        assert value > 0 and np.isfinite(value)
        assert (tmp_path / "e" / "denoise.csv").exists()

    def test_make_patches_from_pgm(self, tmp_path):
        nd.write_pgm(tmp_path / "im.pgm", Rng(0).integers(0, 256, size=(20, 20)).astype(np.uint8))
        out = tmp_path / "p.bin"
        assert cli.main(["make-patches", "-o", str(out), "--seed", "1", "--n", "10", "--edge", "5",
                         "--images", str(tmp_path / "im.pgm")]) == 0
        assert nd.read_patches(out).patches.max() <= 1.0
        assert cli.main(["make-patches", "-o", str(tmp_path / "q"), "--seed", "1", "--edge", "50",
                         "--images", str(tmp_path / "im.pgm")]) == 2

    def test_export_nonsquare_needs_edge(self, tmp_path):
        p = nm.NaeParams.init(6, 3, Rng(0))
        nm.save_params(p, tmp_path / "m.ckpt")
        assert cli.main(["export-filters", "--model", str(tmp_path / "m.ckpt"), "-o", str(tmp_path / "f.pgm")]) == 2
        assert cli.main(["export-filters", "--model", str(tmp_path / "m.ckpt"), "-o", str(tmp_path / "f.pgm"),
                         "--tile-edge", "3"]) == 2

    def test_fine_tune_and_analyze(self, tmp_path, idx_dir, capsys):
        base = ["--seed", "2", *idx_sets(idx_dir), "--set=train.hidden=8", "--set=train.epochs=2",
                "--set=finetune.classes=3", "--set=finetune.epochs=3", "--set=finetune.batch_size=10"]
        assert cli.main(["train", "--out", str(tmp_path / "m"), *base]) == 0
        assert cli.main(["fine-tune", "--model", str(tmp_path / "m" / "model.ckpt"), "--out", str(tmp_path / "c"),
                         "--set=finetune.val_size=10", *base]) == 0
        out = capsys.readouterr().out
        assert "test_errors" in out
        mlp, extra = tr.loads_mlp((tmp_path / "c" / "classifier.ckpt").read_bytes())
        assert [l.W.shape for l in mlp.layers] == [(8, 36), (3, 8)]
        assert sorted(os.listdir(tmp_path / "c")) == ["classifier.ckpt", "config.txt", "finetune_log.csv",
                                                     "metrics.csv"]
        assert cli.main(["analyze", "--model", str(tmp_path / "c" / "classifier.ckpt"),
                         "--out", str(tmp_path / "a"), *base]) == 0
        corr = an.read_matrix(tmp_path / "a" / "correlation_layer0.mat")
        assert corr.shape == (8, 8)
        assert "layer" in (tmp_path / "a" / "summary.csv").read_text().splitlines()[0]

    def test_fine_tune_dimension_mismatch(self, tmp_path, idx_dir):
        nm.save_params(nm.NaeParams.init(10, 3, Rng(0)), tmp_path / "m.ckpt")
        rc = cli.main(["fine-tune", "--model", str(tmp_path / "m.ckpt"), "--seed", "1", *idx_sets(idx_dir),
                       "--out", str(tmp_path / "c")])
        assert rc == 2 and not (tmp_path / "c").exists()

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NAECKPT1garbage")
        assert cli.main(["export-filters", "--model", str(tmp_path / "bad.ckpt"), "-o", str(tmp_path / "f")]) == 2

    def test_pipeline(self, tmp_path, idx_dir, capsys):
        rc = cli.main(["pipeline-mnist", "--seed", "4", "--out", str(tmp_path / "g"), *idx_sets(idx_dir),
                       "--set=pipeline.subset=30", "--set=pipeline.input_vars=[0, 0.1]",
                       "--set=pipeline.dropout_ps=1, 0.5", "--set=train.hidden=6", "--set=train.epochs=1",
                       "--set=finetune.epochs=1", "--set=finetune.classes=3"])
        assert rc == 0
        rows = (tmp_path / "g" / "grid.csv").read_text().splitlines()
        assert rows[0] == "input_var,dropout_p,pretrain_loss,test_errors" and len(rows) == 5
        assert (tmp_path / "g" / "filters_v0.1_p0.5.pgm").exists()
        assert cli.main(["pipeline-mnist", "--seed", "4", "--out", str(tmp_path / "h"), *idx_sets(idx_dir),
                         "--set=pipeline.subset=100"]) == 2


class TestVerify:
    def test_suite_passes(self):
        assert cli.main(["verify", "noise"]) == 0

    def test_unknown_suite(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["verify", "everything"])
        assert exc.value.code == 2

    def test_no_command(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2
