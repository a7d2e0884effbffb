"""Run configuration files.

Grammar (one setting per line)::

    # comment
    [section]              # optional; prefixes later keys with "section."
    key = value            # value may be "double-quoted"
    noise.input = gaussian:0.1
    pipeline.dropout_ps = 1, 0.75, 0.5, 0.25

The grammar is a subset of TOML, so ``name.toml`` files with quoted strings
and bracketed lists also load. Keys are dotted and must appear in :data:`SCHEMA`; unknown keys are errors.
The effective config (every key, defaults filled in) is written back in the
same grammar, sorted by key, so reloading it reproduces the run.
"""

import os

from . import noise as nz
from . import penalties as pn
from . import training as tr


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional(parse):
    def inner(s):
        return None if s.strip().lower() in ("", "none") else parse(s)
    return inner


def _floats(s):
    s = s.strip()
    if s.startswith("[") and s.endswith("]"):
        s = s[1:-1]
    return [float(t) for t in s.split(",") if t.strip()]


def _path(s):
    return s.strip()


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, nz.NoiseDist):
        return nz.format_dist(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


PATH_KEYS = {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels", "data.patches"}

SCHEMA = {
    # data
    "data.train_images": (_optional(_path), None),
    "data.train_labels": (_optional(_path), None),
    "data.test_images": (_optional(_path), None),
    "data.test_labels": (_optional(_path), None),
    "data.limit": (_optional(int), None),
    "data.test_limit": (_optional(int), None),
    "data.patches": (_optional(_path), None),
    "data.synthetic_images": (int, 0),
    "data.image_size": (int, 128),
    "data.patch_edge": (int, 12),
    "data.n_patches": (int, 10000),
    # noise used while training the autoencoder
    "noise.input": (nz.parse_dist, nz.none()),
    "noise.pre_activation": (nz.parse_dist, nz.none()),
    "noise.activation": (nz.parse_dist, nz.none()),
    # analytic penalties
    **{f"penalty.{name}": (float, 0.0) for name in pn.PENALTY_NAMES},
    "penalty.hidden_noise": (nz.parse_dist, nz.none()),
    "penalty.var_x": (float, 0.0),
    "penalty.var_z": (float, 0.0),
    "penalty.p": (float, 1.0),
    # autoencoder training
    "train.learning_rate": (float, 0.01),
    "train.momentum": (float, 0.9),
    "train.batch_size": (int, 100),
    "train.epochs": (int, 10),
    "train.seed": (_optional(int), None),
    "train.objective": (str, "stochastic"),
    "train.loss": (str, "squared"),
    "train.nesterov": (_bool, False),
    "train.lr_decay": (float, 1.0),
    "train.hidden": (int, 100),
    "train.enc": (str, "sigmoid"),
    "train.dec": (str, "linear"),
    "train.tied": (_bool, False),
    # supervised fine-tuning
    "finetune.learning_rate": (float, 0.1),
    "finetune.momentum": (float, 0.9),
    "finetune.batch_size": (int, 100),
    "finetune.epochs": (int, 10),
    "finetune.head_epochs": (int, 0),
    "finetune.classes": (int, 10),
    "finetune.val_size": (int, 0),
    "finetune.noise.input": (nz.parse_dist, nz.none()),
    "finetune.noise.pre_activation": (nz.parse_dist, nz.none()),
    "finetune.noise.activation": (nz.parse_dist, nz.none()),
    # MNIST pipeline noise grid
    "pipeline.input_vars": (_floats, [0.0, 0.1, 0.25, 0.5]),
    "pipeline.dropout_ps": (_floats, [1.0, 0.75, 0.5, 0.25]),
    "pipeline.subset": (int, 10000),
    # evaluation
    "eval.noise_var": (float, 0.1),
    "eval.draws": (int, 1),
    "eval.n_patches": (int, 1000),
}


class RunConfig(dict):
    """Flat mapping from dotted key to parsed value, with every schema key present."""

    @classmethod
    def defaults(cls):
        return cls({k: d for k, (_, d) in SCHEMA.items()})

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parse = SCHEMA[key][0]
        try:
            self[key] = parse(raw) if isinstance(raw, str) else raw
        except (ValueError, nz.NoiseError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    def noise_spec(self, prefix="noise"):
        try:
            return nz.NoiseSpec(self[f"{prefix}.input"], self[f"{prefix}.pre_activation"], self[f"{prefix}.activation"])
        except nz.NoiseError as exc:
            raise ConfigError(str(exc)) from exc

    def penalty_config(self):
        weights = {n: self[f"penalty.{n}"] for n in pn.PENALTY_NAMES if self[f"penalty.{n}"]}
        try:
            return pn.PenaltyConfig(weights, self["penalty.hidden_noise"], self["penalty.var_z"],
                                    self["penalty.var_x"], self["penalty.p"])
        except pn.PenaltyError as exc:
            raise ConfigError(str(exc)) from exc

    def require_seed(self):
        if self["train.seed"] is None:
            raise ConfigError("an explicit seed is required (set train.seed or pass --seed)")
        return self["train.seed"]

    def train_config(self):
        try:
            return tr.TrainConfig(
                learning_rate=self["train.learning_rate"],
                momentum=self["train.momentum"],
                batch_size=self["train.batch_size"],
                epochs=self["train.epochs"],
                seed=self.require_seed(),
                noise=self.noise_spec(),
                penalties=self.penalty_config(),
                objective=self["train.objective"],
                loss=self["train.loss"],
                nesterov=self["train.nesterov"],
                lr_decay=self["train.lr_decay"],
                hidden=self["train.hidden"],
                enc=self["train.enc"],
                dec=self["train.dec"],
                tied=self["train.tied"],
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def finetune_config(self):
        try:
            return tr.TrainConfig(
                learning_rate=self["finetune.learning_rate"],
                momentum=self["finetune.momentum"],
                batch_size=self["finetune.batch_size"],
                epochs=self["finetune.epochs"],
                seed=self.require_seed(),
                noise=self.noise_spec("finetune.noise"),
                nesterov=self["train.nesterov"],
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def check_paths(self):
        for key in sorted(PATH_KEYS):
            path = self[key]
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"{key}: no such file {path!r}")

    def dumps(self):
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in sorted(self))

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def parse_config(text, source="<string>"):
    cfg = RunConfig.defaults()
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        if section:
            key = f"{section}.{key}"
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] == '"':
            value = value[1:-1]
        try:
            cfg.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    return cfg


def load_config(path, check_paths=True):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from exc
    cfg = parse_config(text, path)
    if check_paths:
        cfg.check_paths()
    return cfg
