"""Noise distributions for the three corruption sites of a noisy autoencoder.

A :class:`NoiseSpec` holds one :class:`NoiseDist` per site:

* ``input``: corrupts ``x`` before the encoder weights,
* ``pre_activation``: corrupts ``W x + b`` before the encoder nonlinearity,
* ``activation``: corrupts the hidden activations ``h``.

Each distribution kind has a fixed combination mode. Gaussian and Poisson-like
noise is added, multiplicative Gaussian and dropout noise multiplies.
"""

from dataclasses import dataclass, field

import numpy as np

from .numeric import ShapeError, derivative

ADDITIVE = "additive"
MULTIPLICATIVE = "multiplicative"

KINDS = ("none", "gaussian", "mgaussian", "dropout", "poisson")
SITES = ("input", "pre_activation", "activation")

_MODES = {
    "none": ADDITIVE,
    "gaussian": ADDITIVE,
    "mgaussian": MULTIPLICATIVE,
    "dropout": MULTIPLICATIVE,
    "poisson": ADDITIVE,
}


class NoiseError(ValueError):
    pass


class UnsupportedTransform(NoiseError):
    pass


@dataclass(frozen=True)
class NoiseDist:
    """One site's corruption.

    ``var`` is used by the Gaussian kinds, ``p`` (inclusion probability) by
    dropout and ``scale`` by Poisson-like noise, whose per-unit variance is
    ``scale * h`` for clean activation ``h``.
    """

    kind: str = "none"
    var: float = 0.0
    p: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise NoiseError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.var < 0:
            raise NoiseError(f"noise variance must be >= 0, got {self.var}")
        if not 0.0 <= self.p <= 1.0:
            raise NoiseError(f"dropout inclusion probability must lie in [0, 1], got {self.p}")
        if self.scale < 0:
            raise NoiseError(f"poisson scale must be >= 0, got {self.scale}")

    @property
    def mode(self):
        return _MODES[self.kind]

    @property
    def identity(self):
        return 1.0 if self.mode == MULTIPLICATIVE else 0.0

    @property
    def mean_preserving(self):
        return self.kind != "dropout"

    @property
    def is_none(self):
        return (
            self.kind == "none"
            or (self.kind in ("gaussian", "mgaussian") and self.var == 0)
            or (self.kind == "dropout" and self.p == 1.0)
            or (self.kind == "poisson" and self.scale == 0)
        )

    @property
    def expectation_factor(self):
        """Multiplier that replaces this corruption at test time."""
        return self.p if self.kind == "dropout" else 1.0

    def conditional_variance(self, value):
        """Var[corrupted | clean] elementwise, for clean ``value``."""
        value = np.asarray(value, dtype=np.float64)
        if self.kind == "none":
            return np.zeros_like(value)
        if self.kind == "gaussian":
            return np.full_like(value, self.var)
        if self.kind == "mgaussian":
            return self.var * value**2
        if self.kind == "dropout":
            return self.p * (1.0 - self.p) * value**2
        return self.scale * np.maximum(value, 0.0)

    def __str__(self):
        return format_dist(self)


def none():
    return NoiseDist("none")


def gaussian(var):
    return NoiseDist("gaussian", var=float(var))


def mgaussian(var):
    return NoiseDist("mgaussian", var=float(var))


def dropout(p):
    return NoiseDist("dropout", p=float(p))


def poisson(scale=1.0):
    return NoiseDist("poisson", scale=float(scale))


def parse_dist(text):
    """Parse ``none``, ``gaussian:0.1``, ``mgaussian:0.1``, ``dropout:0.5`` or ``poisson[:scale]``."""
    text = text.strip()
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    arg = arg.strip()
    try:
        if kind == "none" and not arg:
            return none()
        if kind == "gaussian":
            return gaussian(float(arg))
        if kind == "mgaussian":
            return mgaussian(float(arg))
        if kind == "dropout":
            return dropout(float(arg))
        if kind == "poisson":
            return poisson(float(arg)) if arg else poisson()
    except ValueError as exc:
        if isinstance(exc, NoiseError):
            raise
        raise NoiseError(f"bad noise parameter in {text!r}") from exc
    raise NoiseError(f"cannot parse noise distribution {text!r}")


def format_dist(dist):
    if dist.kind == "none":
        return "none"
    if dist.kind in ("gaussian", "mgaussian"):
        return f"{dist.kind}:{dist.var!r}"
    if dist.kind == "dropout":
        return f"dropout:{dist.p!r}"
    return "poisson" if dist.scale == 1.0 else f"poisson:{dist.scale!r}"


@dataclass(frozen=True)
class NoiseSpec:
    input: NoiseDist = field(default_factory=none)
    pre_activation: NoiseDist = field(default_factory=none)
    activation: NoiseDist = field(default_factory=none)

    def __post_init__(self):
        for site in ("input", "pre_activation"):
            if getattr(self, site).kind == "poisson":
                raise NoiseError(f"poisson-like noise is only valid at the activation site, not {site}")

    @property
    def is_none(self):
        return all(getattr(self, s).is_none for s in SITES)

    def to_dict(self):
        return {s: format_dist(getattr(self, s)) for s in SITES}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(SITES)
        if unknown:
            raise NoiseError(f"unknown noise sites: {sorted(unknown)}")
        return cls(**{k: parse_dist(v) if isinstance(v, str) else v for k, v in d.items()})


@dataclass
class NoiseSample:
    """One joint draw of the three corruptions.

    Arrays are either vectors (one example) or ``(n, dim)`` matrices.
    """

    eps_i: np.ndarray
    eps_z: np.ndarray
    eps_h: np.ndarray
    mode_i: str = ADDITIVE
    mode_z: str = ADDITIVE
    mode_h: str = ADDITIVE

    @classmethod
    def identity(cls, input_dim, hidden_dim, n=None):
        shape_i = input_dim if n is None else (n, input_dim)
        shape_h = hidden_dim if n is None else (n, hidden_dim)
        return cls(np.zeros(shape_i), np.zeros(shape_h), np.zeros(shape_h))


def sample_site(dist, rng, shape, clean=None):
    """Draw the corruption for one site. ``clean`` is required for Poisson-like noise."""
    if dist.kind == "none":
        return np.full(shape, dist.identity)
    if dist.kind == "gaussian":
        return np.sqrt(dist.var) * rng.normal(shape)
    if dist.kind == "mgaussian":
        return 1.0 + np.sqrt(dist.var) * rng.normal(shape)
    if dist.kind == "dropout":
        return (rng.uniform(size=shape) < dist.p).astype(np.float64)
    if clean is None:
        raise NoiseError("poisson-like noise needs the clean activations to set its variance")
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != tuple(np.atleast_1d(shape)):
        raise ShapeError(f"clean activations have shape {clean.shape}, expected {shape}")
    std = np.sqrt(dist.scale * np.maximum(clean, 0.0))
    return std * rng.normal(shape)


def sample(spec, rng, input_dim, hidden_dim, clean_h=None, n=None):
    """Draw ``(eps_i, eps_z, eps_h)`` for one example, or ``n`` examples if given."""
    if spec.activation.kind == "poisson" and clean_h is None:
        raise NoiseError("poisson-like activation noise needs clean_h")
    shape_i = input_dim if n is None else (n, input_dim)
    shape_h = hidden_dim if n is None else (n, hidden_dim)
    return NoiseSample(
        eps_i=sample_site(spec.input, rng, shape_i),
        eps_z=sample_site(spec.pre_activation, rng, shape_h),
        eps_h=sample_site(spec.activation, rng, shape_h, clean=clean_h),
        mode_i=spec.input.mode,
        mode_z=spec.pre_activation.mode,
        mode_h=spec.activation.mode,
    )


def apply(value, eps, mode):
    value = np.asarray(value, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if value.shape != eps.shape:
        raise ShapeError(f"value shape {value.shape} does not match noise shape {eps.shape}")
    if mode == ADDITIVE:
        return value + eps
    if mode == MULTIPLICATIVE:
        return value * eps
    raise NoiseError(f"unknown combination mode {mode!r}")


# --- equivalences between noise sites ----------------------------------------

def equivalent_hidden_noise_from_prenoise(W, x, dist_z, nonlinearity="sigmoid", b=None):
    """Per-unit activation-noise variance equivalent to small additive pre-activation noise.

    First-order expansion: ``s(z + e) - s(z) ~ s'(z) e``, so the variance is
    ``s'(z)**2 * var_z`` with ``z = W x (+ b)``.
    """
    if dist_z.kind not in ("gaussian", "none"):
        raise UnsupportedTransform(
            f"the Taylor transform needs additive Gaussian pre-activation noise, got {dist_z.kind}"
        )
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.shape[1] != x.shape[-1]:
        raise ShapeError(f"W is {W.shape} but x has length {x.shape[-1]}")
    z = x @ W.T
    if b is not None:
        z = z + b
    var_z = dist_z.var if dist_z.kind == "gaussian" else 0.0
    return derivative(nonlinearity, z) ** 2 * var_z


def _as_covariance(sigma_in, dim):
    sigma = np.asarray(sigma_in, dtype=np.float64)
    if sigma.ndim == 0:
        if sigma < 0:
            raise NoiseError(f"scalar input variance must be >= 0, got {float(sigma)}")
        return float(sigma) * np.eye(dim)
    if sigma.shape != (dim, dim):
        raise ShapeError(f"input covariance must be {dim}x{dim}, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-12, rtol=0):
        raise NoiseError("input covariance is not symmetric")
    eig_min = np.linalg.eigvalsh(sigma).min()
    if eig_min < -1e-10 * max(1.0, np.abs(sigma).max()):
        raise NoiseError(f"input covariance is not positive semidefinite (min eigenvalue {eig_min:.3g})")
    return sigma


def equivalent_prenoise_covariance_from_input(W, sigma_in):
    """Covariance ``W Sigma W^T`` of ``W eps`` for Gaussian input noise with covariance ``Sigma``.

    ``sigma_in`` is either a scalar (isotropic variance) or a full matrix.
    """
    W = np.asarray(W, dtype=np.float64)
    sigma = _as_covariance(sigma_in, W.shape[1])
    return W @ sigma @ W.T


def equivalent_hidden_covariance_from_input(W, x, sigma_in, nonlinearity="sigmoid", b=None):
    """Linearized activation-noise covariance ``D W Sigma W^T D`` with ``D = diag(s'(W x + b))``."""
    W = np.asarray(W, dtype=np.float64)
    z = W @ np.asarray(x, dtype=np.float64)
    if b is not None:
        z = z + b
    dz = derivative(nonlinearity, z)
    return dz[:, None] * equivalent_prenoise_covariance_from_input(W, sigma_in) * dz[None, :]
