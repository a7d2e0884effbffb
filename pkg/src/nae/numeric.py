"""Dense float64 helpers, elementwise nonlinearities and a splittable RNG.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
"""

import numpy as np


class ShapeError(ValueError):
    pass


class Rng:
    """Seedable generator that can be split into independent child streams.

    A child stream is addressed by an integer key path, e.g.
    ``rng.child(epoch, batch)``, so the stream for a given minibatch does not
    depend on how many draws earlier minibatches made.
    """

    def __init__(self, seed, _key=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key):
        return Rng(self.seed, self.key + tuple(key))

    # thin pass-throughs used throughout the package
    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


def as_rng(rng):
    if isinstance(rng, Rng):
        return rng
    return Rng(rng)


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return a


def matmul(a, b):
    """Matrix product with a shape check that reports both operands."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sample_gaussian(rng, mean, var, n):
    if var < 0:
        raise ValueError(f"variance must be non-negative, got {var}")
    if var == 0:
        return np.full(n, float(mean))
    return mean + np.sqrt(var) * rng.normal(n)


def sample_bernoulli(rng, p, n):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"inclusion probability must lie in [0, 1], got {p}")
    return (rng.uniform(size=n) < p).astype(np.float64)


# --- nonlinearities --------------------------------------------------------

def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z):
    return np.maximum(z, 0.0)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


NONLINEARITIES = ("sigmoid", "relu", "linear")


def activate(name, z):
    if name == "sigmoid":
        return sigmoid(z)
    if name == "relu":
        return relu(z)
    if name == "linear":
        return np.array(z, dtype=np.float64, copy=True)
    raise ValueError(f"unknown nonlinearity {name!r}")


def derivative(name, z):
    """Elementwise derivative of the nonlinearity, evaluated at pre-activation ``z``."""
    if name == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s)
    if name == "relu":
        return (np.asarray(z) > 0).astype(np.float64)
    if name == "linear":
        return np.ones_like(np.asarray(z, dtype=np.float64))
    raise ValueError(f"unknown nonlinearity {name!r}")


def second_derivative(name, z):
    if name == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s) * (1.0 - 2.0 * s)
    if name in ("relu", "linear"):
        return np.zeros_like(np.asarray(z, dtype=np.float64))
    raise ValueError(f"unknown nonlinearity {name!r}")
