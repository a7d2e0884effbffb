"""Deterministic penalties that replace marginalized noise.

For a linear decoder and squared error, hidden-activation noise with
independent units adds exactly ``sum_i Var[h~_i | h] * ||W'[:, i]||**2`` to the
expected loss. Input and pre-activation noise are handled through a first-order
expansion of the encoder and are accurate only for small variances.

Every ``penalty_*`` function accepts one example (returns a float) or a batch
of rows (returns one value per row).
"""

from dataclasses import dataclass, field

import numpy as np

from . import model as nm
from . import noise as nz
from .numeric import ShapeError, derivative, second_derivative

PENALTY_NAMES = ("hidden", "prenoise", "input", "tied_gaussian", "contractive", "dropout_pf", "poisson_sparse")


class PenaltyError(ValueError):
    pass


def _unbatch(values, single):
    return float(values[0]) if single else values


def _pre(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"x has shape {x.shape}, expected (..., {params.input_dim})")
    single = x.ndim == 1
    X = np.atleast_2d(x)
    return X @ params.W.T + params.b, X, single


def _require_linear(params, what):
    if params.dec != "linear":
        raise PenaltyError(f"{what} is only defined for a linear decoder, got {params.dec!r}")


def _decoder_col_norms2(params):
    return np.sum(params.Wdec**2, axis=0)


def penalty_hidden(params, h, var_h):
    """Exact excess loss of independent hidden-activation noise with variances ``var_h``."""
    _require_linear(params, "the hidden-noise penalty")
    var_h = np.asarray(var_h, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if var_h.shape != h.shape or h.shape[-1] != params.hidden_dim:
        raise ShapeError(f"h {h.shape} and var_h {var_h.shape} must both be (..., {params.hidden_dim})")
    vals = var_h @ _decoder_col_norms2(params)
    return float(vals) if vals.ndim == 0 else vals


def penalty_prenoise(params, x, var_z):
    _require_linear(params, "the pre-activation noise penalty")
    u, _, single = _pre(params, x)
    fp = derivative(params.enc, u)
    return _unbatch(var_z * (fp**2 @ _decoder_col_norms2(params)), single)


def penalty_input(params, x, var_x):
    """``var_x * ||W' diag(s'(W x + b)) W||_F**2``: first-order excess loss of isotropic input noise."""
    _require_linear(params, "the input noise penalty")
    u, _, single = _pre(params, x)
    fp = derivative(params.enc, u)
    C = (params.Wdec.T @ params.Wdec) * (params.W @ params.W.T)
    return _unbatch(var_x * np.einsum("ni,ij,nj->n", fp, C, fp), single)


def penalty_input_as_written(params, x, var_x):
    """``||W W^T diag(s'(W x + b)) var_x I||_F**2``, the literal closed form.

    Scales with ``var_x**2`` where the excess loss scales with ``var_x``; kept
    for comparison against :func:`penalty_input`.
    """
    u, _, single = _pre(params, x)
    fp = derivative(params.enc, u)
    B2 = (params.W @ params.W.T) ** 2
    return _unbatch(var_x**2 * (fp**2 @ B2.sum(axis=0)), single)


def penalty_tied_gaussian(params, x, var_x):
    """Tied-weight input noise penalty ``var_x * sum_ij (w_i . w_j)**2 s'_i s'_j``.

    Drives the encoder filters towards mutual orthogonality.
    """
    if not params.tied:
        raise PenaltyError("the tied Gaussian penalty requires tied weights")
    u, _, single = _pre(params, x)
    fp = derivative(params.enc, u)
    B = params.W @ params.W.T
    return _unbatch(var_x * np.einsum("ni,ij,nj->n", fp, B**2, fp), single)


def penalty_contractive(params, x):
    """Squared Frobenius norm of the encoder Jacobian."""
    u, _, single = _pre(params, x)
    fp = derivative(params.enc, u)
    return _unbatch(fp**2 @ np.sum(params.W**2, axis=1), single)


def penalty_dropout_pf(params, h, p):
    if not 0.0 <= p <= 1.0:
        raise PenaltyError(f"dropout inclusion probability must lie in [0, 1], got {p}")
    h = np.asarray(h, dtype=np.float64)
    return penalty_hidden(params, h, p * (1.0 - p) * h**2)


def penalty_poisson_sparse(params, h):
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise PenaltyError("the Poisson sparsity penalty needs non-negative activations")
    return penalty_hidden(params, h, h)


@dataclass
class PenaltyConfig:
    """Weighted set of penalties plus the noise parameters they need.

    ``weights`` maps a name from :data:`PENALTY_NAMES` to a non-negative weight.
    ``hidden_noise`` sets the conditional variance used by the ``hidden``
    penalty; ``var_z``, ``var_x`` and ``p`` parametrize the others.
    """

    weights: dict = field(default_factory=dict)
    hidden_noise: nz.NoiseDist = field(default_factory=nz.none)
    var_z: float = 0.0
    var_x: float = 0.0
    p: float = 1.0

    def __post_init__(self):
        for name, w in self.weights.items():
            if name not in PENALTY_NAMES:
                raise PenaltyError(f"unknown penalty {name!r}; expected one of {PENALTY_NAMES}")
            if w < 0:
                raise PenaltyError(f"penalty weight for {name} must be >= 0, got {w}")
        if self.var_z < 0 or self.var_x < 0:
            raise PenaltyError("penalty noise variances must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise PenaltyError(f"dropout inclusion probability must lie in [0, 1], got {self.p}")

    @property
    def active(self):
        return {k: float(w) for k, w in self.weights.items() if w > 0}

    @property
    def mean_scale(self):
        """Expected value of multiplicative hidden noise, applied to ``h`` in the clean term."""
        scale = 1.0
        if "dropout_pf" in self.active:
            scale *= self.p
        if "hidden" in self.active:
            scale *= self.hidden_noise.expectation_factor
        return scale

    def check(self, params):
        if "tied_gaussian" in self.active and not params.tied:
            raise PenaltyError("tied_gaussian requires tied weights")
        if params.dec != "linear" and set(self.active) & {"hidden", "prenoise", "input", "dropout_pf", "poisson_sparse"}:
            raise PenaltyError("marginalized noise penalties need a linear decoder")


def penalty_values(config, params, x):
    """Per-penalty batch means (unweighted) for the active members of ``config``."""
    u, X, _ = _pre(params, x)
    h = nm.activate(params.enc, u)
    out = {}
    for name in config.active:
        if name == "hidden":
            v = penalty_hidden(params, h, config.hidden_noise.conditional_variance(h))
        elif name == "prenoise":
            v = penalty_prenoise(params, X, config.var_z)
        elif name == "input":
            v = penalty_input(params, X, config.var_x)
        elif name == "tied_gaussian":
            v = penalty_tied_gaussian(params, X, config.var_x)
        elif name == "contractive":
            v = penalty_contractive(params, X)
        elif name == "dropout_pf":
            v = penalty_dropout_pf(params, h, config.p)
        else:
            v = penalty_poisson_sparse(params, h)
        out[name] = float(np.mean(v))
    return out


def penalty_total(config, params, x):
    return sum(config.active[k] * v for k, v in penalty_values(config, params, x).items())


def _hidden_var_slope(dist, h):
    """d Var[h~ | h] / dh for each unit."""
    if dist.kind in ("none", "gaussian"):
        return np.zeros_like(h)
    if dist.kind == "mgaussian":
        return 2.0 * dist.var * h
    if dist.kind == "dropout":
        return 2.0 * dist.p * (1.0 - dist.p) * h
    return dist.scale * (h > 0).astype(np.float64)


def penalty_gradients(config, params, x, h=None):
    """Gradients of the weighted, batch-averaged penalty sum.

    Keys match :meth:`NaeParams.arrays`. ``h`` is recomputed from ``x`` and
    only checked if given.
    """
    config.check(params)
    u, X, _ = _pre(params, x)
    n = X.shape[0]
    hh = nm.activate(params.enc, u)
    if h is not None and not np.allclose(np.atleast_2d(h), hh, rtol=0, atol=1e-12):
        raise ValueError("h does not match the clean encoding of x")
    fp = derivative(params.enc, u)
    fpp = second_derivative(params.enc, u)
    W, Wdec = params.W, params.Wdec
    c = _decoder_col_norms2(params)

    g_u = np.zeros_like(u)  # d/du, per example
    g_W = np.zeros_like(W)  # direct dependence on encoder weights
    g_Wdec = np.zeros_like(Wdec)
    for name, w in config.active.items():
        if name == "hidden":
            dist = config.hidden_noise
            v = dist.conditional_variance(hh)
            g_Wdec += w * 2.0 * Wdec * v.mean(axis=0)
            g_u += w * c * _hidden_var_slope(dist, hh) * fp
        elif name == "prenoise":
            g_Wdec += w * 2.0 * config.var_z * Wdec * (fp**2).mean(axis=0)
            g_u += w * config.var_z * c * 2.0 * fp * fpp
        elif name == "input":
            A = Wdec.T @ Wdec
            B = W @ W.T
            S = fp.T @ fp / n
            g_u += w * 2.0 * config.var_x * (fp @ (A * B)) * fpp
            g_W += w * 2.0 * config.var_x * (A * S) @ W
            g_Wdec += w * 2.0 * config.var_x * Wdec @ (B * S)
        elif name == "tied_gaussian":
            B = W @ W.T
            S = fp.T @ fp / n
            g_u += w * 2.0 * config.var_x * (fp @ (B**2)) * fpp
            g_W += w * 4.0 * config.var_x * (B * S) @ W
        elif name == "contractive":
            a = np.sum(W**2, axis=1)
            g_u += w * 2.0 * fp * fpp * a
            g_W += w * 2.0 * (fp**2).mean(axis=0)[:, None] * W
        elif name == "dropout_pf":
            q = config.p * (1.0 - config.p)
            g_Wdec += w * 2.0 * q * Wdec * (hh**2).mean(axis=0)
            g_u += w * 2.0 * q * hh * fp * c
        elif name == "poisson_sparse":
            if np.any(hh < 0):
                raise PenaltyError("the Poisson sparsity penalty needs non-negative activations")
            g_Wdec += w * 2.0 * Wdec * hh.mean(axis=0)
            g_u += w * fp * c

    g_W = g_W + g_u.T @ X / n
    g_b = g_u.mean(axis=0)
    g_d = np.zeros_like(params.d)
    if params.tied:
        return {"W": g_W + g_Wdec.T, "b": g_b, "d": g_d}
    return {"W": g_W, "b": g_b, "d": g_d, "Wdec": g_Wdec}


def analytic_objective(config, params, x, loss_kind="squared"):
    """Clean (expectation-scaled) reconstruction loss plus weighted penalties, batch-averaged."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tr = clean_trace(config, params, X)
    return float(np.mean(nm.loss(tr.x, tr.r, loss_kind))) + penalty_total(config, params, X)


def clean_trace(config, params, X):
    """Forward trace of the clean term, with ``h`` scaled by the expected multiplicative noise."""
    X = np.atleast_2d(X)
    n = X.shape[0]
    noise = nz.NoiseSample(
        np.zeros_like(X),
        np.zeros((n, params.hidden_dim)),
        np.full((n, params.hidden_dim), config.mean_scale),
        nz.ADDITIVE,
        nz.ADDITIVE,
        nz.MULTIPLICATIVE,
    )
    return nm.encode_noisy(params, X, noise)


def analytic_gradients(config, params, x, loss_kind="squared"):
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = nm.gradients(params, clean_trace(config, params, X), loss_kind=loss_kind)
    if config.active:
        for k, v in penalty_gradients(config, params, X).items():
            g[k] = g[k] + v
    return g
