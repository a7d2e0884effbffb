"""Evaluation metrics and representation statistics."""

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as nm
from . import noise as nz
from . import training as tr

MATRIX_MAGIC = b"NAEMAT01"


def denoise_eval(params, clean, noise_var, draws, rng, spec=None):
    """Mean of ``||x - r(x + e)||**2`` over samples and ``draws`` noise draws per sample.

    ``params`` is a :class:`~nae.model.NaeParams` (reconstructing with the
    expectation-scaled encoder for ``spec``) or any callable mapping a batch of
    noisy inputs to reconstructions.
    """
    X = np.atleast_2d(np.asarray(getattr(clean, "samples", clean), dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("cannot evaluate denoising on an empty dataset")
    if noise_var < 0 or draws < 1:
        raise ValueError("noise_var must be >= 0 and draws >= 1")
    if callable(params):
        recon = params
    else:
        spec = spec or nz.NoiseSpec()

        def recon(Xn):
            return nm.reconstruct_deterministic(params, Xn, spec)

    total = 0.0
    sd = math.sqrt(noise_var)
    for k in range(draws):
        Xn = X + sd * rng.normal(X.shape) if noise_var > 0 else X
        total += float(np.sum((X - recon(Xn)) ** 2))
    return total / (draws * X.shape[0])


def hoyer_sparseness(v, axis=-1):
    """``(sqrt(n) - |v|_1 / |v|_2) / (sqrt(n) - 1)``; an all-zero vector counts as fully sparse."""
    v = np.abs(np.asarray(v, dtype=np.float64))
    n = v.shape[axis]
    if n < 2:
        raise ValueError("sparseness needs at least two entries")
    l1 = v.sum(axis=axis)
    l2 = np.sqrt((v**2).sum(axis=axis))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(l2 > 0, l1 / np.where(l2 > 0, l2, 1.0), 1.0)
    return (math.sqrt(n) - ratio) / (math.sqrt(n) - 1.0)


def sparsity_metrics(activations):
    """Lifetime (per unit, across samples) and population (per sample, across units) sparseness."""
    A = np.asarray(activations, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError("activations must be an (N, units) matrix")
    return hoyer_sparseness(A, axis=0), hoyer_sparseness(A, axis=1)


def correlation_and_spectrum(activations):
    """Pearson correlation of units and normalized cumulative eigen-spectrum of their covariance."""
    A = np.asarray(activations, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 2:
        raise ValueError("need at least two samples")
    cov = np.cov(A, rowvar=False)
    cov = np.atleast_2d(cov)
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    live = sd > 0
    corr = np.zeros_like(cov)
    corr[np.ix_(live, live)] = cov[np.ix_(live, live)] / np.outer(sd[live], sd[live])
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    eig = np.sort(np.clip(np.linalg.eigvalsh(cov), 0.0, None))[::-1]
    total = eig.sum()
    cum = np.cumsum(eig) / total if total > 0 else np.ones_like(eig)
    return corr, cum


def mean_abs_offdiag(corr):
    corr = np.asarray(corr)
    k = corr.shape[0]
    if k < 2:
        return 0.0
    return float((np.abs(corr).sum() - np.abs(np.diag(corr)).sum()) / (k * (k - 1)))


def classification_error(model, data, spec=None):
    """Number of misclassified samples under expectation scaling."""
    X = np.asarray(getattr(data, "samples", data), dtype=np.float64)
    y = np.asarray(data.labels)
    return tr.classification_errors(model, X, y, spec)


def hidden_activations(mlp, X, spec=None):
    """Test-time activations of every hidden layer of ``mlp``."""
    spec = spec or nz.NoiseSpec()
    a = np.atleast_2d(np.asarray(X, dtype=np.float64)) * spec.input.expectation_factor
    out = []
    for layer in mlp.layers[:-1]:
        z = (a @ layer.W.T + layer.b) * spec.pre_activation.expectation_factor
        a = nm.activate(layer.act, z) * spec.activation.expectation_factor
        out.append(a)
    return out


def sign_test(wins, n):
    """One-sided p-value of at least ``wins`` successes in ``n`` fair coin flips."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n


@dataclass
class MetricsReport:
    denoise_error: float = None
    test_errors: int = None
    lifetime_sparsity: list = field(default_factory=list)
    population_sparsity: list = field(default_factory=list)
    correlation: list = field(default_factory=list)
    cum_variance: list = field(default_factory=list)

    @classmethod
    def from_activations(cls, layers, **kw):
        rep = cls(**kw)
        for A in layers:
            life, pop = sparsity_metrics(A)
            corr, cum = correlation_and_spectrum(A)
            rep.lifetime_sparsity.append(life)
            rep.population_sparsity.append(pop)
            rep.correlation.append(corr)
            rep.cum_variance.append(cum)
        return rep

    def summary(self):
        """Per-layer scalar summaries."""
        rows = []
        for i in range(len(self.lifetime_sparsity)):
            rows.append({
                "layer": i,
                "lifetime_sparsity": float(np.mean(self.lifetime_sparsity[i])),
                "population_sparsity": float(np.mean(self.population_sparsity[i])),
                "mean_abs_correlation": mean_abs_offdiag(self.correlation[i]),
                "cum_variance_auc": float(np.mean(self.cum_variance[i])),
            })
        return rows

    def to_csv(self, path):
        """Long format: ``metric, layer, index, value``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "layer", "index", "value"])
            if self.denoise_error is not None:
                w.writerow(["denoise_error", "", "", repr(float(self.denoise_error))])
            if self.test_errors is not None:
                w.writerow(["test_errors", "", "", int(self.test_errors)])
            for name in ("lifetime_sparsity", "population_sparsity", "cum_variance"):
                for layer, vec in enumerate(getattr(self, name)):
                    for i, v in enumerate(vec):
                        w.writerow([name, layer, i, repr(float(v))])
            for row in self.summary():
                for k, v in row.items():
                    if k != "layer":
                        w.writerow([f"mean_{k}" if not k.startswith("mean") else k, row["layer"], "", repr(v)])


def write_matrix(path, M):
    """Raw little-endian float64 matrix with a ``NAEMAT01`` + uint32 rows, cols header."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC + struct.pack("<II", *M.shape))
        fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())


def read_matrix(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MATRIX_MAGIC or len(data) < 16:
        raise ValueError(f"{path}: not a matrix file")
    rows, cols = struct.unpack("<II", data[8:16])
    if len(data) != 16 + 8 * rows * cols:
        raise ValueError(f"{path}: size does not match header {rows}x{cols}")
    return np.frombuffer(data, dtype="<f8", offset=16).reshape(rows, cols).astype(np.float64)
