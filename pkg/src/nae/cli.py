"""``nae`` command-line interface.

Exit codes: 0 success, 1 verification or metric failure (including a diverged
training run), 2 usage, config or data error.
"""

import argparse
import contextlib
import csv
import logging
import math
import os
import shutil
import sys
import tempfile

import numpy as np

from . import analysis as an
from . import config as cf
from . import data as nd
from . import model as nm
from . import noise as nz
from . import training as tr
from . import verify as vf
from .numeric import Rng

log = logging.getLogger("nae")

EFFECTIVE_CONFIG = "config.txt"


class UsageError(Exception):
    """Bad arguments, config or input data; exit status 2."""


class MetricFailure(Exception):
    """A verification or training failure; exit status 1."""


# --- artifact writing ------------------------------------------------------------

class Artifacts:
    """Stages outputs in a scratch directory and moves them into place at commit.

    Nothing appears in the output directory unless every step succeeded.
    """

    def __init__(self, out_dir, force):
        self.out_dir = out_dir or "."
        self.force = force
        self.staging = tempfile.mkdtemp(prefix="nae-")
        self.names = []

    def _final(self, name):
        return os.path.join(self.out_dir, name)

    def check(self, *names):
        """Fail early, before any work, if outputs would be overwritten."""
        for name in names:
            if os.path.exists(self._final(name)) and not self.force:
                raise UsageError(f"{self._final(name)} exists; pass --force to overwrite")

    def path(self, name):
        self.check(name)
        self.names.append(name)
        return os.path.join(self.staging, name)

    def commit(self):
        os.makedirs(self.out_dir, exist_ok=True)
        for name in self.names:
            shutil.move(os.path.join(self.staging, name), self._final(name))
        self.names = []

    def discard(self):
        shutil.rmtree(self.staging, ignore_errors=True)


@contextlib.contextmanager
def artifacts(out_dir, force):
    if out_dir and os.path.exists(out_dir) and not os.path.isdir(out_dir):
        raise UsageError(f"output path {out_dir} is not a directory")
    arts = Artifacts(out_dir, force)
    try:
        yield arts
        arts.commit()
    finally:
        arts.discard()


# --- config and data -------------------------------------------------------------

def _load_config(args):
    cfg = cf.load_config(args.config) if args.config else cf.RunConfig.defaults()
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise cf.ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg["train.seed"] = args.seed
    cfg.check_paths()
    return cfg


def _patch_data(cfg, rng, n=None, test=False):
    """Patch samples from ``data.patches`` or from synthetic 1/f images."""
    n = cfg["data.n_patches"] if n is None else n
    if cfg["data.patches"]:
        ps = nd.read_patches(cfg["data.patches"])
        return ps.as_dataset().head(n)
    if cfg["data.synthetic_images"] > 0:
        k = cfg["data.synthetic_images"]
        imgs = nd.synthetic_pink_images(k, cfg["data.image_size"], rng.child(1 if not test else 2))
        ps = nd.extract_patches(imgs, cfg["data.patch_edge"], n, rng.child(3 if not test else 4))
        return ps.as_dataset()
    raise UsageError("no patch data: set data.patches or data.synthetic_images")


def _train_data(cfg, rng):
    if cfg["data.train_images"]:
        return nd.load_mnist_idx(cfg["data.train_images"], cfg["data.train_labels"], cfg["data.limit"])
    return _patch_data(cfg, rng)


def _labeled(cfg, split):
    img, lab = cfg[f"data.{split}_images"], cfg[f"data.{split}_labels"]
    if not img or not lab:
        raise UsageError(f"data.{split}_images and data.{split}_labels are required")
    limit = cfg["data.limit"] if split == "train" else cfg["data.test_limit"]
    return nd.load_mnist_idx(img, lab, limit)


def _split_val(data, n_val):
    if n_val <= 0:
        return data, None
    if n_val >= len(data):
        raise UsageError(f"finetune.val_size {n_val} leaves no training samples")
    return data.split(len(data) - n_val)


def _square_edge(dim):
    e = math.isqrt(dim)
    return e if e * e == dim else None


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --- commands --------------------------------------------------------------------

def cmd_train(args):
    cfg = _load_config(args)
    tc = cfg.train_config()
    with artifacts(args.out, args.force) as art:
        art.check("model.ckpt", "trainlog.csv", "filters.pgm", EFFECTIVE_CONFIG)
        data = _train_data(cfg, Rng(tc.seed).child(9))
        params, trainlog = _train(lambda: tr.train_nae(data, tc))
        nm.save_params(params, art.path("model.ckpt"), extra={"noise": tc.noise.to_dict(), "seed": tc.seed})
        trainlog.to_csv(art.path("trainlog.csv"))
        edge = _square_edge(params.input_dim)
        if edge:
            nd.export_filter_grid(params.W, edge, art.path("filters.pgm"))
        cfg.dump(art.path(EFFECTIVE_CONFIG))
    last = trainlog[-1].loss if trainlog else float("nan")
    print(f"trained {params.input_dim}->{params.hidden_dim} for {len(trainlog)} epochs, final loss {last:.6g}")
    return 0


def _train(fn):
    try:
        return fn()
    except tr.TrainingDiverged as exc:
        raise MetricFailure(str(exc)) from exc


def _load_nae(path):
    try:
        params, extra = nm.load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc.strerror}") from exc
    spec = nz.NoiseSpec.from_dict(extra["noise"]) if "noise" in extra else nz.NoiseSpec()
    return params, spec


def _load_mlp(path):
    try:
        with open(path, "rb") as fh:
            mlp, extra = tr.loads_mlp(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc.strerror}") from exc
    spec = nz.NoiseSpec.from_dict(extra["noise"]) if "noise" in extra else nz.NoiseSpec()
    return mlp, spec


def cmd_fine_tune(args):
    cfg = _load_config(args)
    fc = cfg.finetune_config()
    params, _ = _load_nae(args.model)
    with artifacts(args.out, args.force) as art:
        art.check("classifier.ckpt", "finetune_log.csv", "metrics.csv", EFFECTIVE_CONFIG)
        train, val = _split_val(_labeled(cfg, "train"), cfg["finetune.val_size"])
        if train.dim != params.input_dim:
            raise UsageError(f"model expects {params.input_dim}-dim inputs, data has {train.dim}")
        mlp, trainlog = _train(lambda: tr.fine_tune_classifier(
            params, train, fc, n_classes=cfg["finetune.classes"], val=val, head_epochs=cfg["finetune.head_epochs"]))
        rows = [("train_errors", an.classification_error(mlp, train, fc.noise))]
        if cfg["data.test_images"]:
            rows.append(("test_errors", an.classification_error(mlp, _labeled(cfg, "test"), fc.noise)))
        fh_path = art.path("classifier.ckpt")
        with open(fh_path, "wb") as fh:
            fh.write(tr.dumps_mlp(mlp, extra={"noise": fc.noise.to_dict(), "seed": fc.seed}))
        trainlog.to_csv(art.path("finetune_log.csv"))
        _write_csv(art.path("metrics.csv"), ["metric", "value"], rows)
        cfg.dump(art.path(EFFECTIVE_CONFIG))
    for name, value in rows:
        print(f"{name} {value}")
    return 0


def cmd_denoise_eval(args):
    cfg = _load_config(args)
    seed = cfg.require_seed()
    params, spec = _load_nae(args.model)
    if args.patches:
        clean = nd.read_patches(args.patches).as_dataset()
    else:
        clean = _patch_data(cfg, Rng(seed).child(9), n=cfg["eval.n_patches"], test=True)
    if clean.dim != params.input_dim:
        raise UsageError(f"model expects {params.input_dim}-dim inputs, patches have {clean.dim}")
    var = cfg["eval.noise_var"] if args.noise_var is None else args.noise_var
    draws = cfg["eval.draws"] if args.draws is None else args.draws
    try:
        err = an.denoise_eval(params, clean, var, draws, Rng(seed).child(10), spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"denoise_error {err:.6g}")
    if args.out:
        with artifacts(args.out, args.force) as art:
            art.check("denoise.csv")
            _write_csv(art.path("denoise.csv"), ["metric", "value"],
                       [("denoise_error", repr(err)), ("noise_var", var), ("draws", draws), ("samples", len(clean))])
    return 0


def cmd_export_filters(args):
    params, _ = _load_nae(args.model)
    W = params.Wdec.T if args.decoder else params.W
    edge = args.tile_edge or _square_edge(W.shape[1])
    if not edge:
        raise UsageError(f"filter length {W.shape[1]} is not square; pass --tile-edge")
    target_dir, name = os.path.split(args.output)
    with artifacts(target_dir, args.force) as art:
        try:
            img = nd.export_filter_grid(W, edge, art.path(name))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    print(f"wrote {args.output} ({img.shape[1]}x{img.shape[0]})")
    return 0


def cmd_analyze(args):
    cfg = _load_config(args)
    mlp, spec = _load_mlp(args.model)
    test = _labeled(cfg, "test" if cfg["data.test_images"] else "train")
    acts = an.hidden_activations(mlp, test.samples, spec)
    rep = an.MetricsReport.from_activations(acts, test_errors=an.classification_error(mlp, test, spec))
    with artifacts(args.out, args.force) as art:
        names = ["metrics.csv", "summary.csv"] + [f"correlation_layer{i}.mat" for i in range(len(acts))]
        art.check(*names)
        rep.to_csv(art.path("metrics.csv"))
        summary = rep.summary()
        _write_csv(art.path("summary.csv"), list(summary[0]) if summary else ["layer"],
                   [list(r.values()) for r in summary])
        for i, corr in enumerate(rep.correlation):
            an.write_matrix(art.path(f"correlation_layer{i}.mat"), corr)
    print(f"test_errors {rep.test_errors}")
    for r in rep.summary():
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_verify(args):
    checks = vf.run_suite(args.suite)
    failed = [c.name for c in checks if not c.passed]
    if failed:
        for name in failed:
            print(f"FAILED: {name}", file=sys.stderr)
        return 1
    return 0


def pipeline_grid(cfg):
    return [(v, p) for v in cfg["pipeline.input_vars"] for p in cfg["pipeline.dropout_ps"]]


def _grid_spec(var, p):
    return nz.NoiseSpec(nz.gaussian(var) if var > 0 else nz.none(),
                        nz.none(), nz.dropout(p) if p < 1 else nz.none())


def cmd_pipeline_mnist(args):
    cfg = _load_config(args)
    cfg.require_seed()
    subset = cfg["pipeline.subset"]
    if cfg["finetune.epochs"] == 0 and cfg["finetune.head_epochs"] == 0:
        raise UsageError("set finetune.head_epochs > 0 to evaluate features without fine-tuning")
    grid = pipeline_grid(cfg)
    names = ["grid.csv", EFFECTIVE_CONFIG] + [f"filters_v{v:g}_p{p:g}.pgm" for v, p in grid]
    with artifacts(args.out, args.force) as art:
        art.check(*names)
        full = _labeled(cfg, "train")
        if len(full) < subset:
            raise UsageError(f"pipeline.subset {subset} exceeds the {len(full)} available training digits")
        train = full.head(subset)
        test = _labeled(cfg, "test")
        edge = _square_edge(train.dim)
        rows = []
        for v, p in grid:
            spec = _grid_spec(v, p)
            tc = cfg.train_config().replace(noise=spec)
            params, plog = _train(lambda: tr.train_nae(train, tc))
            fc = cfg.finetune_config()
            if p < 1 and fc.noise.is_none:
                fc = fc.replace(noise=nz.NoiseSpec(activation=nz.dropout(p)))
            mlp, _ = _train(lambda: tr.fine_tune_classifier(params, train, fc, n_classes=cfg["finetune.classes"],
                                                               head_epochs=cfg["finetune.head_epochs"]))
            errs = an.classification_error(mlp, test, fc.noise)
            rows.append((v, p, plog[-1].loss if plog else float("nan"), errs))
            if edge:
                nd.export_filter_grid(params.W, edge, art.path(f"filters_v{v:g}_p{p:g}.pgm"))
            print(f"input_var={v:g} dropout_p={p:g} test_errors={errs}", flush=True)
        _write_csv(art.path("grid.csv"), ["input_var", "dropout_p", "pretrain_loss", "test_errors"], rows)
        cfg.dump(art.path(EFFECTIVE_CONFIG))
    return 0


def cmd_make_patches(args):
    if args.n < 1 or args.edge < 1:
        raise UsageError("--n and --edge must be positive")
    rng = Rng(args.seed)
    if args.images:
        try:
            stack = [nd.read_pgm(p).astype(np.float64) / 255.0 for p in args.images]
        except (OSError, nd.PgmError) as exc:
            raise UsageError(str(exc)) from exc
        sources = stack
    else:
        sources = list(nd.synthetic_pink_images(args.synthetic, args.size, rng.child(1)))
    which = rng.child(2).integers(0, len(sources), size=args.n)
    parts = []
    for i, img in enumerate(sources):
        k = int(np.sum(which == i))
        if k:
            try:
                parts.append(nd.extract_patches(img, args.edge, k, rng.child(3, i)).patches)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
    ps = nd.PatchSet(args.edge, np.vstack(parts) * args.scale)
    target_dir, name = os.path.split(args.output)
    with artifacts(target_dir, args.force) as art:
        nd.write_patches(art.path(name), ps)
    print(f"wrote {len(ps.patches)} {args.edge}x{args.edge} patches to {args.output}")
    return 0


# --- argument parsing ------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="nae", description="Noisy autoencoders: training, evaluation and oracle checks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, out=True):
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="RNG seed (overrides train.seed)")
        if out:
            p.add_argument("--out", help="output directory (default: current directory)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("train", help="train a noisy autoencoder")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fine-tune", help="fine-tune a pretrained encoder with a softmax head")
    common(p)
    p.add_argument("--model", required=True, help="autoencoder checkpoint")
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("denoise-eval", help="mean squared denoising error on clean patches")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--patches", help="patch file of clean samples")
    p.add_argument("--noise-var", type=float)
    p.add_argument("--draws", type=int)
    p.set_defaults(func=cmd_denoise_eval)

    p = sub.add_parser("export-filters", help="write encoder filters as a PGM grid")
    p.add_argument("--model", required=True)
    p.add_argument("--output", "-o", required=True, help="PGM path")
    p.add_argument("--tile-edge", type=int)
    p.add_argument("--decoder", action="store_true", help="export decoder columns instead")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export_filters)

    p = sub.add_parser("analyze", help="sparsity, correlation and spectrum of a classifier's hidden layers")
    common(p)
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="run an oracle suite")
    p.add_argument("suite", choices=sorted(vf.SUITES))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline-mnist", help="pretrain and fine-tune over a noise grid on MNIST")
    common(p)
    p.set_defaults(func=cmd_pipeline_mnist)

    p = sub.add_parser("make-patches", help="sample patches from PGM images or synthetic 1/f images")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--edge", type=int, default=12)
    p.add_argument("--images", nargs="+", help="source PGM images (default: synthetic)")
    p.add_argument("--synthetic", type=int, default=20, help="number of synthetic images")
    p.add_argument("--size", type=int, default=128, help="synthetic image size")
    p.add_argument("--scale", type=float, default=1.0, help="multiply patches by this factor")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_patches)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cf.ConfigError, nd.IdxError, nm.CheckpointError, nz.NoiseError, OSError) as exc:
        print(f"nae: error: {exc}", file=sys.stderr)
        return 2
    except MetricFailure as exc:
        print(f"nae: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
