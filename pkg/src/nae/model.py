"""Noisy autoencoder with a single hidden layer.

The corrupted encoder is::

    x~ = x (+/*) eps_i
    z  = (W x~ + b) (+/*) eps_z
    h~ = s_f(z) (+/*) eps_h
    r  = s_g(W' h~ + d)

Activation noise is applied once, inside ``h~``. All functions accept a single
example (vector) or a batch of row-major examples ``(n, dim)``.
"""

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import noise as nz
from .numeric import ShapeError, activate, as_rng, derivative

ENCODER_NONLINEARITIES = ("sigmoid", "relu")
DECODER_NONLINEARITIES = ("linear", "sigmoid")
LOSSES = ("squared", "cross_entropy")
CE_EPS = 1e-12


class StaleTraceError(RuntimeError):
    pass


class NaeParams:
    """Encoder ``W`` (hidden x input), ``b``; decoder ``Wdec`` (input x hidden), ``d``.

    With ``tied=True`` there is one weight storage and ``Wdec`` is a view of
    ``W.T``. ``version`` is bumped by every in-place update so that traces
    computed with older parameters can be detected.
    """

    def __init__(self, W, b, d, Wdec=None, enc="sigmoid", dec="linear", tied=False):
        if enc not in ENCODER_NONLINEARITIES:
            raise ValueError(f"encoder nonlinearity must be one of {ENCODER_NONLINEARITIES}, got {enc!r}")
        if dec not in DECODER_NONLINEARITIES:
            raise ValueError(f"decoder nonlinearity must be one of {DECODER_NONLINEARITIES}, got {dec!r}")
        self.W = np.array(W, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        self.d = np.array(d, dtype=np.float64)
        self.enc = enc
        self.dec = dec
        self.tied = bool(tied)
        if self.tied:
            if Wdec is not None and not np.array_equal(np.asarray(Wdec), self.W.T):
                raise ValueError("tied parameters require Wdec == W.T")
            self._Wdec = None
        else:
            if Wdec is None:
                raise ValueError("untied parameters need a decoder matrix")
            self._Wdec = np.array(Wdec, dtype=np.float64)
        self.version = 0
        self._check_shapes()

    @property
    def hidden_dim(self):
        return self.W.shape[0]

    @property
    def input_dim(self):
        return self.W.shape[1]

    @property
    def Wdec(self):
        return self.W.T if self.tied else self._Wdec

    def _check_shapes(self):
        h, i = self.W.shape
        if self.b.shape != (h,):
            raise ShapeError(f"encoder bias has shape {self.b.shape}, expected ({h},)")
        if self.d.shape != (i,):
            raise ShapeError(f"decoder bias has shape {self.d.shape}, expected ({i},)")
        if self.Wdec.shape != (i, h):
            raise ShapeError(f"decoder weights have shape {self.Wdec.shape}, expected ({i}, {h})")

    @classmethod
    def init(cls, input_dim, hidden_dim, rng, enc="sigmoid", dec="linear", tied=False):
        """Uniform weights on +-1/sqrt(fan_in), zero biases."""
        rng = as_rng(rng)
        a = 1.0 / np.sqrt(input_dim)
        W = rng.uniform(-a, a, size=(hidden_dim, input_dim))
        Wdec = None
        if not tied:
            a = 1.0 / np.sqrt(hidden_dim)
            Wdec = rng.uniform(-a, a, size=(input_dim, hidden_dim))
        return cls(W, np.zeros(hidden_dim), np.zeros(input_dim), Wdec, enc, dec, tied)

    def arrays(self):
        """Trainable arrays by name; updating them in place updates the model."""
        out = {"W": self.W, "b": self.b, "d": self.d}
        if not self.tied:
            out["Wdec"] = self._Wdec
        return out

    def copy(self):
        return NaeParams(self.W, self.b, self.d, None if self.tied else self._Wdec, self.enc, self.dec, self.tied)

    def touch(self):
        self.version += 1

    def __eq__(self, other):
        if not isinstance(other, NaeParams):
            return NotImplemented
        a, b = self.arrays(), other.arrays()
        return (
            (self.enc, self.dec, self.tied) == (other.enc, other.dec, other.tied)
            and a.keys() == b.keys()
            and all(np.array_equal(a[k], b[k]) for k in a)
        )

    def __repr__(self):
        return (
            f"NaeParams(input={self.input_dim}, hidden={self.hidden_dim}, "
            f"enc={self.enc}, dec={self.dec}, tied={self.tied})"
        )


@dataclass
class ForwardTrace:
    x: np.ndarray  # clean input
    x_tilde: np.ndarray
    u: np.ndarray  # W x~ + b, before pre-activation noise
    z: np.ndarray
    h_tilde: np.ndarray
    a_out: np.ndarray  # W' h~ + d
    r: np.ndarray
    noise: nz.NoiseSample
    version: int


def _batch(x, dim, what="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim or x.ndim > 2:
        raise ShapeError(f"{what} has shape {x.shape}, expected (..., {dim})")
    return x


def encode_clean(params, x):
    x = _batch(x, params.input_dim)
    return activate(params.enc, x @ params.W.T + params.b)


def encode_noisy(params, x, noise):
    """Corrupted forward pass; the returned trace also carries the reconstruction."""
    x = _batch(x, params.input_dim)
    hshape = x.shape[:-1] + (params.hidden_dim,)
    for name, arr, shape in (("eps_i", noise.eps_i, x.shape), ("eps_z", noise.eps_z, hshape),
                             ("eps_h", noise.eps_h, hshape)):
        if np.shape(arr) != shape:
            raise ShapeError(f"{name} has shape {np.shape(arr)}, expected {shape}")
    x_tilde = nz.apply(x, noise.eps_i, noise.mode_i)
    u = x_tilde @ params.W.T + params.b
    z = nz.apply(u, noise.eps_z, noise.mode_z)
    h_tilde = nz.apply(activate(params.enc, z), noise.eps_h, noise.mode_h)
    a_out = h_tilde @ params.Wdec.T + params.d
    r = activate(params.dec, a_out)
    return ForwardTrace(x, x_tilde, u, z, h_tilde, a_out, r, noise, params.version)


def reconstruct(params, h):
    h = _batch(h, params.hidden_dim, "hidden representation")
    return activate(params.dec, h @ params.Wdec.T + params.d)


def sample_noise(params, x, spec, rng):
    """Draw a noise sample for ``x`` site by site.

    Poisson-like activation noise takes its variance from the activation that
    the earlier (already corrupted) sites produce.
    """
    x = _batch(x, params.input_dim)
    shape_i = x.shape
    shape_h = x.shape[:-1] + (params.hidden_dim,)
    eps_i = nz.sample_site(spec.input, rng, shape_i)
    eps_z = nz.sample_site(spec.pre_activation, rng, shape_h)
    clean_h = None
    if spec.activation.kind == "poisson":
        xt = nz.apply(x, eps_i, spec.input.mode)
        z = nz.apply(xt @ params.W.T + params.b, eps_z, spec.pre_activation.mode)
        clean_h = activate(params.enc, z)
    eps_h = nz.sample_site(spec.activation, rng, shape_h, clean=clean_h)
    return nz.NoiseSample(eps_i, eps_z, eps_h, spec.input.mode, spec.pre_activation.mode, spec.activation.mode)


def loss(x, r, kind="squared"):
    """Per-example reconstruction loss, summed over input dimensions."""
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if x.shape != r.shape:
        raise ShapeError(f"input shape {x.shape} does not match reconstruction shape {r.shape}")
    if kind == "squared":
        return np.sum((x - r) ** 2, axis=-1)
    if kind == "cross_entropy":
        rc = np.clip(r, CE_EPS, 1.0 - CE_EPS)
        return -np.sum(x * np.log(rc) + (1.0 - x) * np.log1p(-rc), axis=-1)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def loss_grad_r(x, r, kind="squared"):
    if kind == "squared":
        return 2.0 * (r - x)
    if kind == "cross_entropy":
        rc = np.clip(r, CE_EPS, 1.0 - CE_EPS)
        g = (rc - x) / (rc * (1.0 - rc))
        # clamped entries are flat
        return np.where((r > CE_EPS) & (r < 1.0 - CE_EPS), g, 0.0)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def output_delta(params, trace, loss_kind):
    """dL/d(W' h~ + d) for each example."""
    if params.dec == "sigmoid" and loss_kind == "cross_entropy":
        r = trace.r
        inside = (r > CE_EPS) & (r < 1.0 - CE_EPS)
        return np.where(inside, r - trace.x, 0.0)
    return loss_grad_r(trace.x, trace.r, loss_kind) * derivative(params.dec, trace.a_out)


def gradients(params, trace, x=None, loss_kind="squared"):
    """Exact gradients of the noisy loss with the realized noise held fixed.

    For a batch the per-example gradients are averaged. Returns a dict keyed
    like :meth:`NaeParams.arrays`; for tied weights ``W`` holds the combined
    encoder and decoder gradient.
    """
    if trace.version != params.version:
        raise StaleTraceError(
            f"trace was computed at parameter version {trace.version}, params are at {params.version}"
        )
    if x is not None and not np.array_equal(np.asarray(x, dtype=np.float64), trace.x):
        raise ValueError("x does not match the input the trace was computed for")
    X = np.atleast_2d(trace.x_tilde)
    n = X.shape[0]
    noise = trace.noise

    delta = np.atleast_2d(output_delta(params, trace, loss_kind))
    H = np.atleast_2d(trace.h_tilde)
    g_wdec = delta.T @ H / n
    g_d = delta.mean(axis=0)

    dh = delta @ params.Wdec
    if noise.mode_h == nz.MULTIPLICATIVE:
        dh = dh * np.atleast_2d(noise.eps_h)
    du = dh * derivative(params.enc, np.atleast_2d(trace.z))
    if noise.mode_z == nz.MULTIPLICATIVE:
        du = du * np.atleast_2d(noise.eps_z)
    g_w = du.T @ X / n
    g_b = du.mean(axis=0)

    if params.tied:
        return {"W": g_w + g_wdec.T, "b": g_b, "d": g_d}
    return {"W": g_w, "b": g_b, "d": g_d, "Wdec": g_wdec}


def encode_deterministic(params, x, spec):
    """Test-time encoding with every corruption replaced by its expectation."""
    x = _batch(x, params.input_dim)
    u = (x * spec.input.expectation_factor) @ params.W.T + params.b
    z = u * spec.pre_activation.expectation_factor
    return activate(params.enc, z) * spec.activation.expectation_factor


def reconstruct_deterministic(params, x, spec):
    return reconstruct(params, encode_deterministic(params, x, spec))


def mean_loss(params, X, spec=None, rng=None, loss_kind="squared"):
    """Average noisy (or clean, if ``spec`` is None) loss over the rows of ``X``."""
    if spec is None or spec.is_none:
        noise = nz.NoiseSample.identity(params.input_dim, params.hidden_dim, n=np.atleast_2d(X).shape[0])
    else:
        noise = sample_noise(params, np.atleast_2d(X), spec, rng)
    tr = encode_noisy(params, np.atleast_2d(X), noise)
    return float(np.mean(loss(tr.x, tr.r, loss_kind)))


# --- checkpoint container ------------------------------------------------------
#
# Layout: b"NAECKPT1", little-endian uint32 header length, UTF-8 JSON header
# (sorted keys, no whitespace), then each array listed in header["arrays"] as
# raw little-endian float64 in C order.

CKPT_MAGIC = b"NAECKPT1"


class CheckpointError(ValueError):
    pass


def _write_container(fh, meta, arrays):
    meta = dict(meta)
    meta["arrays"] = [[name, list(arr.shape)] for name, arr in arrays]
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(CKPT_MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    for _, arr in arrays:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_container(data):
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        meta = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    offset = 12 + hlen
    arrays = {}
    for name, shape in meta.pop("arrays"):
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError("trailing bytes after checkpoint arrays")
    return meta, arrays


def dumps_params(params, extra=None):
    """Serialize ``params``; ``extra`` is an optional JSON-able dict stored in the header."""
    buf = io.BytesIO()
    meta = {"kind": "nae", "enc": params.enc, "dec": params.dec, "tied": params.tied}
    if extra:
        meta["extra"] = extra
    _write_container(buf, meta, list(params.arrays().items()))
    return buf.getvalue()


def loads_checkpoint(data):
    """``(params, extra)`` from checkpoint bytes."""
    meta, arrays = _read_container(data)
    if meta.get("kind") != "nae":
        raise CheckpointError(f"checkpoint holds a {meta.get('kind')!r}, not an autoencoder")
    try:
        params = NaeParams(arrays["W"], arrays["b"], arrays["d"], arrays.get("Wdec"),
                           meta["enc"], meta["dec"], meta["tied"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc}") from exc
    return params, meta.get("extra", {})


def loads_params(data):
    return loads_checkpoint(data)[0]


def save_params(params, path, extra=None):
    with open(path, "wb") as fh:
        fh.write(dumps_params(params, extra))


def load_params(path):
    with open(path, "rb") as fh:
        return loads_params(fh.read())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
