"""Minibatch SGD with momentum for noisy autoencoders and softmax MLPs.

Randomness is keyed: parameter initialization uses ``Rng(seed).child(0)``,
the shuffle of epoch ``e`` uses ``child(1, e)`` and the noise of minibatch
``k`` in epoch ``e`` uses ``child(2, e, k)``. A run is therefore a pure
function of its config and data.
"""

import csv
import io
import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import model as nm
from . import noise as nz
from . import penalties as pn
from .numeric import Rng, activate, derivative, softmax

log = logging.getLogger(__name__)

OBJECTIVES = ("stochastic", "analytic", "both")
KEY_INIT, KEY_SHUFFLE, KEY_NOISE, KEY_HEAD = 0, 1, 2, 3


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    """Raised when the loss blows up; ``last_good`` holds the parameters from before the bad epoch."""

    def __init__(self, msg, last_good=None, log=None):
        super().__init__(msg)
        self.last_good = last_good
        self.log = log


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 100
    epochs: int = 10
    seed: int = 0
    noise: nz.NoiseSpec = field(default_factory=nz.NoiseSpec)
    penalties: pn.PenaltyConfig = field(default_factory=pn.PenaltyConfig)
    objective: str = "stochastic"
    loss: str = "squared"
    nesterov: bool = False
    lr_decay: float = 1.0
    divergence_factor: float = 10.0
    hidden: int = 100
    enc: str = "sigmoid"
    dec: str = "linear"
    tied: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.loss not in nm.LOSSES:
            raise ValueError(f"loss must be one of {nm.LOSSES}, got {self.loss!r}")

    def replace(self, **changes):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return TrainConfig(**kw)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    penalty: float
    val_metric: float
    seconds: float


class TrainLog(list):
    """One :class:`EpochRecord` per completed epoch."""

    COLUMNS = ("epoch", "loss", "penalty", "val_metric", "seconds")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for rec in self:
                w.writerow([rec.epoch, repr(rec.loss), repr(rec.penalty), repr(rec.val_metric), f"{rec.seconds:.6f}"])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(EpochRecord(int(row["epoch"]), float(row["loss"]), float(row["penalty"]),
                                       float(row["val_metric"]), float(row["seconds"])))
        return out

    def metrics(self):
        """Everything except wall-clock time; equal across reruns with one seed."""
        def clean(v):
            return None if v != v else v  # NaN never compares equal

        return [(r.epoch, clean(r.loss), clean(r.penalty), clean(r.val_metric)) for r in self]


def sgd_momentum_step(params, grads, velocity, lr, mu, nesterov=False):
    """In-place classical (or Nesterov) momentum update of dicts of arrays.

    ``v <- mu v - lr g``; ``theta <- theta + v`` (Nesterov: ``theta + mu v - lr g``).
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {params[k].shape}")
        v = velocity.get(k)
        if v is None:
            v = velocity[k] = np.zeros_like(g)
        v *= mu
        v -= lr * g
        if nesterov:
            params[k] += mu * v - lr * g
        else:
            params[k] += v
    return params, velocity


def _samples(data):
    return np.asarray(getattr(data, "samples", data), dtype=np.float64)


def _labels(data):
    y = getattr(data, "labels", None)
    if y is None:
        raise ValueError("labeled data required")
    return np.asarray(y).astype(np.int64)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# --- autoencoders ----------------------------------------------------------------

def nae_step_gradients(params, X, config, rng):
    """Objective value, penalty value and gradients for one minibatch."""
    g = None
    value = 0.0
    penalty = 0.0
    if config.objective in ("stochastic", "both"):
        noise = nm.sample_noise(params, X, config.noise, rng)
        tr = nm.encode_noisy(params, X, noise)
        value += float(np.mean(nm.loss(X, tr.r, config.loss)))
        g = nm.gradients(params, tr, loss_kind=config.loss)
    if config.objective == "analytic":
        tr = pn.clean_trace(config.penalties, params, X)
        value += float(np.mean(nm.loss(X, tr.r, config.loss)))
        g = nm.gradients(params, tr, loss_kind=config.loss)
    if config.objective in ("analytic", "both") and config.penalties.active:
        penalty = pn.penalty_total(config.penalties, params, X)
        for k, v in pn.penalty_gradients(config.penalties, params, X).items():
            g[k] = g[k] + v
    return value + penalty, penalty, g


def train_nae(data, config, params=None, val=None):
    """Train a noisy autoencoder; returns ``(params, TrainLog)``.

    ``val`` (optional samples) is scored each epoch with the clean
    reconstruction loss.
    """
    X = _samples(data)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty (N, dim) matrix")
    root = Rng(config.seed)
    if params is None:
        params = nm.NaeParams.init(X.shape[1], config.hidden, root.child(KEY_INIT),
                                   enc=config.enc, dec=config.dec, tied=config.tied)
    elif params.input_dim != X.shape[1]:
        raise ValueError(f"model input dim {params.input_dim} does not match data dim {X.shape[1]}")
    if config.objective in ("analytic", "both"):
        config.penalties.check(params)
    Xval = None if val is None else _samples(val)

    trainlog = TrainLog()
    velocity = {}
    lr = config.learning_rate
    first_loss = None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        good = params.copy()
        total, total_pen, count = 0.0, 0.0, 0
        try:
            for k, idx in enumerate(_batches(X.shape[0], config.batch_size, root.child(KEY_SHUFFLE, epoch))):
                Xb = X[idx]
                value, pen, g = nae_step_gradients(params, Xb, config, root.child(KEY_NOISE, epoch, k))
                if first_loss is None:
                    first_loss = value
                if not np.isfinite(value) or value > config.divergence_factor * max(first_loss, 1e-12):
                    raise TrainingDiverged(f"loss {value:.6g} diverged at epoch {epoch} (initial {first_loss:.6g})",
                                           last_good=good, log=trainlog)
                sgd_momentum_step(params.arrays(), g, velocity, lr, config.momentum, config.nesterov)
                params.touch()
                total += value * len(idx)
                total_pen += pen * len(idx)
                count += len(idx)
        except NonFiniteGradient as exc:
            raise TrainingDiverged(f"epoch {epoch} aborted: {exc}", last_good=good, log=trainlog) from exc
        val_metric = float("nan") if Xval is None else nm.mean_loss(params, Xval, loss_kind=config.loss)
        trainlog.append(EpochRecord(epoch, total / count, total_pen / count, val_metric, time.perf_counter() - t0))
        log.debug("epoch %d loss %.6g penalty %.6g val %.6g", epoch, total / count, total_pen / count, val_metric)
        lr *= config.lr_decay
    return params, trainlog


# --- multilayer perceptrons -----------------------------------------------------

@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray
    act: str


class MlpParams:
    """Feed-forward classifier; the last layer is a softmax."""

    def __init__(self, layers):
        if not layers or layers[-1].act != "softmax":
            raise ValueError("an MLP needs at least one layer and must end in softmax")
        for a, b in zip(layers, layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ValueError(f"layer shapes do not chain: {a.W.shape} -> {b.W.shape}")
        for layer in layers:
            if layer.b.shape != (layer.W.shape[0],):
                raise ValueError(f"bias shape {layer.b.shape} does not match weights {layer.W.shape}")
            if layer.act not in ("sigmoid", "relu", "softmax"):
                raise ValueError(f"unknown layer nonlinearity {layer.act!r}")
        self.layers = layers

    @classmethod
    def init(cls, sizes, rng, hidden_act="relu"):
        rng = rng if isinstance(rng, Rng) else Rng(rng)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            a = 1.0 / np.sqrt(fan_in)
            act = "softmax" if i == len(sizes) - 2 else hidden_act
            layers.append(Layer(rng.uniform(-a, a, size=(fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers)

    @classmethod
    def from_nae(cls, params, n_classes, rng):
        rng = rng if isinstance(rng, Rng) else Rng(rng)
        a = 1.0 / np.sqrt(params.hidden_dim)
        head = Layer(rng.uniform(-a, a, size=(n_classes, params.hidden_dim)), np.zeros(n_classes), "softmax")
        return cls([Layer(params.W.copy(), params.b.copy(), params.enc), head])

    @property
    def n_classes(self):
        return self.layers[-1].W.shape[0]

    @property
    def input_dim(self):
        return self.layers[0].W.shape[1]

    def arrays(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"W{i}"] = layer.W
            out[f"b{i}"] = layer.b
        return out

    def copy(self):
        return MlpParams([Layer(l.W.copy(), l.b.copy(), l.act) for l in self.layers])


def dumps_mlp(mlp, extra=None):
    """Serialize an MLP into the checkpoint container (kind ``"mlp"``)."""
    buf = io.BytesIO()
    meta = {"kind": "mlp", "acts": [l.act for l in mlp.layers]}
    if extra:
        meta["extra"] = extra
    nm._write_container(buf, meta, list(mlp.arrays().items()))
    return buf.getvalue()


def loads_mlp(data):
    """``(mlp, extra)`` from checkpoint bytes."""
    meta, arrays = nm._read_container(data)
    if meta.get("kind") != "mlp":
        raise nm.CheckpointError(f"checkpoint holds a {meta.get('kind')!r}, not a classifier")
    try:
        layers = [Layer(arrays[f"W{i}"], arrays[f"b{i}"], act) for i, act in enumerate(meta["acts"])]
    except KeyError as exc:
        raise nm.CheckpointError(f"checkpoint is missing {exc}") from exc
    return MlpParams(layers), meta.get("extra", {})


@dataclass
class MlpCache:
    inputs: list  # corrupted input to each layer
    pre: list  # corrupted pre-activations (argument of the nonlinearity)
    eps_z: list
    eps_h: list
    probs: np.ndarray
    eps_in: np.ndarray = None


def mlp_forward(mlp, X, spec=None, rng=None, replay=None):
    """Noisy forward pass. Input noise hits ``X``; the activation sites hit every hidden layer.

    ``replay`` (an earlier :class:`MlpCache`) reuses its noise draws instead of
    sampling, which keeps the realized noise fixed as parameters move.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    spec = spec or nz.NoiseSpec()

    def draw(dist, shape, stored, clean=None):
        if dist.is_none:
            return None
        return stored if replay is not None else nz.sample_site(dist, rng, shape, clean=clean)

    e_in = draw(spec.input, X.shape, None if replay is None else replay.eps_in)
    a = X if e_in is None else nz.apply(X, e_in, spec.input.mode)
    inputs, pre, ez, eh = [], [], [], []
    for j, layer in enumerate(mlp.layers[:-1]):
        inputs.append(a)
        u = a @ layer.W.T + layer.b
        e_z = draw(spec.pre_activation, u.shape, None if replay is None else replay.eps_z[j])
        z = u if e_z is None else nz.apply(u, e_z, spec.pre_activation.mode)
        h = activate(layer.act, z)
        e_h = draw(spec.activation, h.shape, None if replay is None else replay.eps_h[j], clean=h)
        if e_h is not None:
            h = nz.apply(h, e_h, spec.activation.mode)
        pre.append(z)
        ez.append(e_z)
        eh.append(e_h)
        a = h
    inputs.append(a)
    last = mlp.layers[-1]
    probs = softmax(a @ last.W.T + last.b)
    return probs, MlpCache(inputs, pre, ez, eh, probs, e_in)


def mlp_predict_proba(mlp, X, spec=None):
    """Deterministic test-time pass with every corruption replaced by its expectation."""
    spec = spec or nz.NoiseSpec()
    a = np.atleast_2d(np.asarray(X, dtype=np.float64)) * spec.input.expectation_factor
    for layer in mlp.layers[:-1]:
        z = (a @ layer.W.T + layer.b) * spec.pre_activation.expectation_factor
        a = activate(layer.act, z) * spec.activation.expectation_factor
    last = mlp.layers[-1]
    return softmax(a @ last.W.T + last.b)


def mlp_predict(mlp, X, spec=None):
    # argmax breaks ties towards the lowest class index
    return np.argmax(mlp_predict_proba(mlp, X, spec), axis=1)


def cross_entropy(probs, y):
    p = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    return float(-np.mean(np.log(p)))


def mlp_gradients(mlp, cache, y, spec=None):
    """Gradients of mean cross-entropy with the realized noise held fixed."""
    spec = spec or nz.NoiseSpec()
    n = len(y)
    delta = cache.probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = {}
    L = len(mlp.layers)
    for i in range(L - 1, -1, -1):
        layer = mlp.layers[i]
        grads[f"W{i}"] = delta.T @ cache.inputs[i]
        grads[f"b{i}"] = delta.sum(axis=0)
        if i == 0:
            break
        d = delta @ layer.W
        j = i - 1
        if cache.eps_h[j] is not None and spec.activation.mode == nz.MULTIPLICATIVE:
            d = d * cache.eps_h[j]
        d = d * derivative(mlp.layers[j].act, cache.pre[j])
        if cache.eps_z[j] is not None and spec.pre_activation.mode == nz.MULTIPLICATIVE:
            d = d * cache.eps_z[j]
        delta = d
    return grads


def classification_errors(mlp, X, y, spec=None):
    return int(np.sum(mlp_predict(mlp, X, spec) != np.asarray(y)))


def train_mlp(mlp, data, config, val=None, trainable=None, key=KEY_NOISE):
    """Train ``mlp`` in place with noisy backprop under ``config.noise``.

    ``trainable`` restricts the update to a subset of array names. The
    validation metric is the error count on ``val`` under expectation scaling.
    """
    X = _samples(data)
    y = _labels(data)
    if y.min() < 0 or y.max() >= mlp.n_classes:
        raise ValueError(f"labels must lie in [0, {mlp.n_classes}), got range [{y.min()}, {y.max()}]")
    root = Rng(config.seed)
    spec = config.noise
    trainlog = TrainLog()
    velocity = {}
    lr = config.learning_rate
    first_loss = None
    names = set(mlp.arrays()) if trainable is None else set(trainable)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        good = mlp.copy()
        total, count = 0.0, 0
        for k, idx in enumerate(_batches(X.shape[0], config.batch_size, root.child(KEY_SHUFFLE, key, epoch))):
            probs, cache = mlp_forward(mlp, X[idx], spec, root.child(key, epoch, k))
            value = cross_entropy(probs, y[idx])
            if first_loss is None:
                first_loss = value
            if not np.isfinite(value) or value > config.divergence_factor * max(first_loss, 1e-12):
                raise TrainingDiverged(f"loss {value:.6g} diverged at epoch {epoch}", last_good=good, log=trainlog)
            g = {n: v for n, v in mlp_gradients(mlp, cache, y[idx], spec).items() if n in names}
            try:
                sgd_momentum_step(mlp.arrays(), g, velocity, lr, config.momentum, config.nesterov)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"epoch {epoch} aborted: {exc}", last_good=good, log=trainlog) from exc
            total += value * len(idx)
            count += len(idx)
        val_metric = float("nan")
        if val is not None:
            val_metric = float(classification_errors(mlp, _samples(val), _labels(val), spec))
        trainlog.append(EpochRecord(epoch, total / count, 0.0, val_metric, time.perf_counter() - t0))
        log.debug("epoch %d xent %.6g val %.6g", epoch, total / count, val_metric)
        lr *= config.lr_decay
    return mlp, trainlog


def fine_tune_classifier(features_init, data, config, n_classes=None, val=None, head_epochs=0):
    """Stack a softmax on a pretrained encoder and train the whole network.

    With ``head_epochs > 0`` the softmax layer is first trained alone on the
    frozen encoder (noiseless). ``config.noise`` drives noisy backprop.
    """
    y = _labels(data)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    root = Rng(config.seed)
    mlp = MlpParams.from_nae(features_init, n_classes, root.child(KEY_INIT))
    trainlog = TrainLog()
    if head_epochs:
        head_cfg = config.replace(epochs=head_epochs, noise=nz.NoiseSpec())
        _, head_log = train_mlp(mlp, data, head_cfg, val=val, trainable={"W1", "b1"}, key=KEY_HEAD)
        trainlog.extend(head_log)
    _, body_log = train_mlp(mlp, data, config, val=val)
    for rec in body_log:
        rec.epoch += head_epochs
    trainlog.extend(body_log)
    return mlp, trainlog


def train_supervised_deep(data, widths, noise, config, n_classes=None, val=None):
    """Relu network with hidden ``widths`` trained under ``noise``.

    ``widths=[]`` gives plain softmax regression.
    """
    X = _samples(data)
    y = _labels(data)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    mlp = MlpParams.init([X.shape[1], *widths, n_classes], Rng(config.seed).child(KEY_INIT), hidden_act="relu")
    return train_mlp(mlp, data, config.replace(noise=noise), val=val)


def select_by_validation(candidates, run, val_metric):
    """Run ``run(candidate)`` for each candidate and keep the one with the smallest ``val_metric(result)``.

    Returns ``(best_candidate, best_result, scores)``.
    """
    scores = []
    best = None
    for cand in candidates:
        result = run(cand)
        score = val_metric(result)
        scores.append((cand, score))
        if best is None or score < best[2]:
            best = (cand, result, score)
    return best[0], best[1], scores
