"""End-to-end acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line and then asserts the same condition.
The lines are repeated in an "acceptance criteria" section of the pytest summary.
The MNIST experiments need the IDX files (see ``conftest.mnist_dir``).
"""

import time

import numpy as np
import pytest

from nae import analysis as an
from nae import cli
from nae import data as nd
from nae import model as nm
from nae import noise as nz
from nae import training as tr
from nae import verify as vf
from nae.numeric import Rng

from conftest import ACCEPTANCE_LINES

SEEDS = range(5)


def report(name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}: {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def wins(a, b):
    """Number of seeds where ``a`` is strictly below ``b``."""
    return sum(int(x < y) for x, y in zip(a, b))


def check_lines(checks):
    return "; ".join(c.line() for c in checks)


class TestOracles:
    def test_exact_marginalization(self):
        t0 = time.perf_counter()
        c = vf.check_exact_marginalization(tol=1e-12)
        dt = time.perf_counter() - t0
        ok = c.passed and dt < 10
        assert report("exact marginalization", ok, f"{c.line()} in {dt:.1f}s (limit 10s)")

    def test_small_variance_penalties(self):
        t0 = time.perf_counter()
        checks = [vf.check_prenoise_penalty(draws=10**6), vf.check_input_penalty(draws=10**6)]
        dt = time.perf_counter() - t0
        ok = all(c.passed for c in checks) and dt < 120
        assert report("small-variance penalties", ok, f"{check_lines(checks)} in {dt:.1f}s (limit 120s)")

    def test_gradients(self):
        t0 = time.perf_counter()
        checks = vf.suite_gradients(seeds=20)
        dt = time.perf_counter() - t0
        ok = all(c.passed for c in checks) and dt < 60
        assert report("gradient correctness", ok, f"{check_lines(checks)} in {dt:.1f}s (limit 60s)")

    def test_correspondences(self):
        checks = vf.check_correspondences()
        assert report("contractive and substitution correspondences", all(c.passed for c in checks),
                      check_lines(checks))

    def test_taylor(self):
        c = vf.check_taylor_hidden(draws=10**6, tol=0.02)
        assert report("Taylor hidden-noise equivalence", c.passed, c.line())


# --- denoising ------------------------------------------------------------------

DENOISE = dict(n_train=10000, n_test=1000, epochs=30, lr=0.01, hidden=100, var=0.1, scale=0.2, images=20, size=128)


def pink_patches(seed, n, child):
    r = Rng(seed).child(child)
    imgs = nd.synthetic_pink_images(DENOISE["images"], DENOISE["size"], r.child(0))
    return DENOISE["scale"] * nd.extract_patches(imgs, 12, n, r.child(1)).patches


class TestDenoising:
    def test_nae_beats_dae(self):
        t0 = time.perf_counter()
        dae_errs, nae_errs = [], []
        for seed in SEEDS:
            train = pink_patches(seed, DENOISE["n_train"], 10)
            test = pink_patches(seed, DENOISE["n_test"], 11)
            for act, out in ((nz.none(), dae_errs), (nz.dropout(0.5), nae_errs)):
                spec = nz.NoiseSpec(input=nz.gaussian(DENOISE["var"]), activation=act)
                cfg = tr.TrainConfig(learning_rate=DENOISE["lr"], momentum=0.9, batch_size=100,
                                     epochs=DENOISE["epochs"], seed=seed, noise=spec, hidden=DENOISE["hidden"])
                params, _ = tr.train_nae(train, cfg)
                out.append(an.denoise_eval(params, test, DENOISE["var"], 1, Rng(seed).child(12), spec))
        dt = time.perf_counter() - t0
        n = wins(nae_errs, dae_errs)
        ok = n >= 4 and dt < 900
        detail = (f"NAE wins {n}/5; DAE {[round(e, 3) for e in dae_errs]} NAE {[round(e, 3) for e in nae_errs]} "
                  f"in {dt:.0f}s (limit 900s)")
        assert report("denoising ordering", ok, detail)


# --- MNIST classification -------------------------------------------------------

CLASSIFY = dict(subset=10000, hidden=250, pre_epochs=30, pre_lr=0.01, input_var=0.1, pre_p=0.5,
                fine_epochs=100, fine_lr=0.1, fine_p=0.75)


class TestClassification:
    def test_pretraining_and_dropout_fine_tuning(self, mnist_dir):
        c = CLASSIFY
        train = nd.load_mnist_dir(mnist_dir, "train", c["subset"])
        test = nd.load_mnist_dir(mnist_dir, "test")
        t0 = time.perf_counter()
        rand, plain, drop = [], [], []
        for seed in SEEDS:
            spec = nz.NoiseSpec(input=nz.gaussian(c["input_var"]), activation=nz.dropout(c["pre_p"]))
            cfg = tr.TrainConfig(learning_rate=c["pre_lr"], momentum=0.9, batch_size=100, epochs=c["pre_epochs"],
                                 seed=seed, noise=spec, hidden=c["hidden"])
            params, _ = tr.train_nae(train, cfg)
            fine = tr.TrainConfig(learning_rate=c["fine_lr"], momentum=0.9, batch_size=100,
                                  epochs=c["fine_epochs"], seed=seed)
            random_init = nm.NaeParams.init(train.dim, c["hidden"], Rng(seed).child(0))
            fine_drop = nz.NoiseSpec(activation=nz.dropout(c["fine_p"]))
            for init, fspec, out in ((random_init, nz.NoiseSpec(), rand), (params, nz.NoiseSpec(), plain),
                                     (params, fine_drop, drop)):
                mlp, _ = tr.fine_tune_classifier(init, train, fine.replace(noise=fspec), n_classes=10)
                out.append(an.classification_error(mlp, test, fspec))
            print(f"seed {seed}: random {rand[-1]} nae {plain[-1]} nae+dropout {drop[-1]}", flush=True)
        dt = time.perf_counter() - t0
        a, b = wins(plain, rand), wins(drop, plain)
        ok = a >= 4 and b >= 4 and dt < 3600
        detail = (f"pretraining wins {a}/5, dropout fine-tuning wins {b}/5; test errors random {rand} "
                  f"nae {plain} nae+dropout {drop} in {dt:.0f}s (limit 3600s)")
        assert report("classification ordering", ok, detail)


SUPERVISED = dict(subset=10000, n_val=1000, widths=[256, 256], epochs=50, lr=0.05, input_keep=0.8,
                  dropout_grid=(0.75, 0.5), gauss_grid=(0.01, 0.025, 0.05), input_var=0.1)


def supervised_specs():
    s = SUPERVISED
    return {
        "dropout": [nz.NoiseSpec(input=nz.dropout(s["input_keep"]), activation=nz.dropout(p))
                    for p in s["dropout_grid"]],
        "gaussian": [nz.NoiseSpec(input=nz.gaussian(s["input_var"]), activation=nz.gaussian(v))
                     for v in s["gauss_grid"]],
        "poisson": [nz.NoiseSpec(input=nz.gaussian(s["input_var"]), activation=nz.poisson())],
    }


def representation_stats(mlp, X, spec):
    acts = an.hidden_activations(mlp, X, spec)
    life = np.mean([np.mean(an.sparsity_metrics(A)[0]) for A in acts])
    pop = np.mean([np.mean(an.sparsity_metrics(A)[1]) for A in acts])
    corr = np.mean([an.mean_abs_offdiag(an.correlation_and_spectrum(A)[0]) for A in acts])
    return life, pop, corr


class TestSupervisedNoise:
    def test_noise_beats_noiseless(self, mnist_dir):
        s = SUPERVISED
        full = nd.load_mnist_dir(mnist_dir, "train", s["subset"])
        train, val = full.split(s["subset"] - s["n_val"])
        test = nd.load_mnist_dir(mnist_dir, "test")
        t0 = time.perf_counter()
        errors = {name: [] for name in ("none", *supervised_specs())}
        stats = {name: [] for name in errors}
        for seed in SEEDS:
            cfg = tr.TrainConfig(learning_rate=s["lr"], momentum=0.9, batch_size=100, epochs=s["epochs"], seed=seed)
            candidates = {"none": [nz.NoiseSpec()], **supervised_specs()}
            for name, specs in candidates.items():
                spec, mlp, _ = tr.select_by_validation(
                    specs, lambda sp: tr.train_supervised_deep(train, s["widths"], sp, cfg, n_classes=10)[0],
                    lambda m: an.classification_error(m, val))
                errors[name].append(an.classification_error(mlp, test, spec))
                stats[name].append(representation_stats(mlp, test.samples, spec))
            print(f"seed {seed}: " + " ".join(f"{k} {v[-1]}" for k, v in errors.items()), flush=True)
        dt = time.perf_counter() - t0
        base = np.mean(stats["none"], axis=0)
        lines, ok = [], dt < 3600
        for name in supervised_specs():
            n = wins(errors[name], errors["none"])
            life, pop, corr = np.mean(stats[name], axis=0)
            good = n >= 4 and life > base[0] and pop > base[1] and corr < base[2]
            ok &= good
            lines.append(f"{name} wins {n}/5 errors {errors[name]} life {life:.3f} pop {pop:.3f} corr {corr:.3f}")
        detail = (f"noiseless errors {errors['none']} life {base[0]:.3f} pop {base[1]:.3f} corr {base[2]:.3f}; "
                  + "; ".join(lines) + f" in {dt:.0f}s (limit 3600s)")
        assert report("supervised noise ordering", ok, detail)


# --- infrastructure ---------------------------------------------------------------

class TestInfrastructure:
    def test_idx_fixture(self, tmp_path):
        header = bytes.fromhex("00000803 00000002 00000002 00000003")
        pixels = bytes([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255])
        (tmp_path / "img").write_bytes(header + pixels)
        (tmp_path / "lab").write_bytes(bytes.fromhex("00000801 00000002") + bytes([7, 3]))
        data = nd.load_mnist_idx(tmp_path / "img", tmp_path / "lab")
        expected = np.array([[0, 0.2, 0.4, 0.6, 0.8, 1.0], [1.0, 0, 0, 0, 0, 1.0]])
        ok = np.allclose(data.samples, expected, atol=1e-15) and list(data.labels) == [7, 3]
        trunc = tmp_path / "short"
        trunc.write_bytes(header + pixels[:-1])
        with pytest.raises(nd.IdxError):
            nd.load_mnist_idx(trunc)
        assert report("IDX loader fixture", ok, f"samples shape {data.samples.shape}, labels {[int(v) for v in data.labels]}")

    def test_checkpoint_byte_identity(self, tmp_path):
        p = nm.NaeParams.init(7, 4, Rng(0), enc="relu", dec="sigmoid")
        nm.save_params(p, tmp_path / "a.ckpt", extra={"seed": 0})
        q, extra = nm.load_checkpoint(tmp_path / "a.ckpt")
        nm.save_params(q, tmp_path / "b.ckpt", extra=extra)
        ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        mlp = tr.MlpParams.init([5, 4, 3], Rng(1))
        blob = tr.dumps_mlp(mlp)
        ok &= tr.dumps_mlp(tr.loads_mlp(blob)[0]) == blob
        assert report("checkpoint round trip", ok, "byte-identical after load and save")

    def test_pgm_round_trip(self, tmp_path):
        img = Rng(2).integers(0, 256, size=(13, 17)).astype(np.uint8)
        nd.write_pgm(tmp_path / "x.pgm", img)
        back = nd.read_pgm(tmp_path / "x.pgm")
        ok = back.dtype == np.uint8 and np.array_equal(back, img)
        ok &= (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n17 13\n255\n")
        assert report("PGM round trip", ok, f"shape {back.shape}")

    def test_deterministic_reruns(self, tmp_path):
        X = Rng(3).uniform(0, 1, size=(200, 9))
        spec = nz.NoiseSpec(input=nz.gaussian(0.1), activation=nz.dropout(0.5))
        cfg = tr.TrainConfig(learning_rate=0.05, epochs=3, batch_size=20, seed=11, noise=spec, hidden=6)
        a, la = tr.train_nae(X, cfg)
        b, lb = tr.train_nae(X, cfg)
        ok = nm.dumps_params(a) == nm.dumps_params(b) and la.metrics() == lb.metrics()
        args = ["train", "--seed", "5", "--set=data.synthetic_images=2", "--set=data.image_size=32",
                "--set=data.patch_edge=4", "--set=data.n_patches=100", "--set=train.hidden=3", "--set=train.epochs=2",
                "--set=noise.activation=dropout:0.5"]
        ok &= cli.main(args + ["--out", str(tmp_path / "r1")]) == 0
        ok &= cli.main(args + ["--out", str(tmp_path / "r2")]) == 0
        for name in ("model.ckpt", "filters.pgm", "config.txt"):
            ok &= (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
        assert report("deterministic reruns", ok, "library and CLI reruns with equal seeds are identical")
