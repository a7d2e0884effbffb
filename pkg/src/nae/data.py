"""Dataset loading and image export.

File formats
------------
IDX (MNIST)
    Big-endian. Images: magic ``0x00000803``, then uint32 count, rows, cols,
    then ``count*rows*cols`` unsigned bytes. Labels: magic ``0x00000801``,
    uint32 count, then ``count`` unsigned bytes.
Patch files
    16-byte header: ``b"NAEPATCH"``, little-endian uint32 patch edge, uint32
    patch count; then ``count * edge**2`` little-endian float64 values.
PGM
    Binary graymap ``P5``, maxval 255.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PATCH_MAGIC = b"NAEPATCH"


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


class PgmError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray = None
    scale: tuple = (0.0, 1.0)
    image_shape: tuple = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be an (N, dim) matrix, got shape {self.samples.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.samples),):
                raise ValueError(f"{len(self.labels)} labels for {len(self.samples)} samples")

    def __len__(self):
        return len(self.samples)

    @property
    def dim(self):
        return self.samples.shape[1]

    def take(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.samples[idx], None if self.labels is None else self.labels[idx],
                       self.scale, self.image_shape)

    def head(self, n):
        return self.take(np.arange(min(n, len(self))))

    def split(self, n_first):
        """First ``n_first`` rows and the rest."""
        return self.take(np.arange(n_first)), self.take(np.arange(n_first, len(self)))


@dataclass
class PatchSet:
    patch_edge: int
    patches: np.ndarray

    def __post_init__(self):
        if self.patches.ndim != 2 or self.patches.shape[1] != self.patch_edge**2:
            raise ValueError(f"patches must be (N, {self.patch_edge**2}), got {self.patches.shape}")

    def as_dataset(self):
        return Dataset(self.patches, scale=(-np.inf, np.inf), image_shape=(self.patch_edge, self.patch_edge))


# --- IDX -------------------------------------------------------------------------

def _read_header(data, magic, ndims, path):
    need = 4 + 4 * ndims
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX magic number")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    if len(data) < need:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    return struct.unpack(">" + "I" * ndims, data[4:need]), need


def parse_idx_images(data, path="<bytes>"):
    (count, rows, cols), off = _read_header(data, IMAGE_MAGIC, 3, path)
    size = count * rows * cols
    if len(data) - off < size:
        raise IdxTruncatedError(f"{path}: expected {size} pixel bytes, found {len(data) - off}")
    if len(data) - off > size:
        raise IdxCountMismatch(f"{path}: {len(data) - off - size} trailing bytes after {count} images")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=off).reshape(count, rows, cols)


def parse_idx_labels(data, path="<bytes>"):
    (count,), off = _read_header(data, LABEL_MAGIC, 1, path)
    if len(data) - off < count:
        raise IdxTruncatedError(f"{path}: expected {count} label bytes, found {len(data) - off}")
    if len(data) - off > count:
        raise IdxCountMismatch(f"{path}: {len(data) - off - count} trailing bytes after {count} labels")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=off)


def encode_idx_images(images):
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("images must be a uint8 array of shape (count, rows, cols)")
    return struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise ValueError("labels must be a 1-d uint8 array")
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes()


def write_idx(path, images=None, labels=None):
    with open(path, "wb") as fh:
        fh.write(encode_idx_images(images) if images is not None else encode_idx_labels(labels))


def load_mnist_idx(images_path, labels_path=None, limit=None):
    """Read IDX image (and optional label) files; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        images = parse_idx_images(fh.read(), images_path)
    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as fh:
            labels = parse_idx_labels(fh.read(), labels_path)
        if len(labels) != len(images):
            raise IdxCountMismatch(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images = images[:limit]
        labels = None if labels is None else labels[:limit]
    n, rows, cols = images.shape
    samples = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(samples, None if labels is None else labels.astype(np.int64), (0.0, 1.0), (rows, cols))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist_dir(directory, split="train", limit=None):
    img, lab = MNIST_FILES[split]
    return load_mnist_idx(os.path.join(directory, img), os.path.join(directory, lab), limit=limit)


# --- patches -------------------------------------------------------------------

def extract_patches(image, edge, n, rng):
    """``n`` uniformly positioned ``edge x edge`` patches, each mean-subtracted.

    ``image`` may also be a stack ``(k, H, W)``; each patch then picks its
    source image uniformly.
    """
    img = np.asarray(image, dtype=np.float64)
    stack = img[None] if img.ndim == 2 else img
    if stack.ndim != 3:
        raise ValueError(f"expected an image or a stack of images, got shape {img.shape}")
    _, H, W = stack.shape
    if H < edge or W < edge:
        raise ValueError(f"image of size {H}x{W} is smaller than the {edge}x{edge} patch")
    which = rng.integers(0, stack.shape[0], size=n)
    rows = rng.integers(0, H - edge + 1, size=n)
    cols = rng.integers(0, W - edge + 1, size=n)
    out = np.empty((n, edge * edge))
    for k in range(n):
        p = stack[which[k], rows[k]:rows[k] + edge, cols[k]:cols[k] + edge]
        out[k] = (p - p.mean()).ravel()
    return PatchSet(edge, out)


def synthetic_pink_images(n, size, rng, exponent=1.0):
    """Gaussian images with a ``1/f**exponent`` amplitude spectrum, scaled to unit variance.

    A stand-in for natural images; ``exponent=1`` matches the ``1/f**2`` power
    spectrum of natural scenes.
    """
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    amp = f**-exponent
    amp[0, 0] = 0.0
    out = np.empty((n, size, size))
    for k in range(n):
        spec = (rng.normal((size, size // 2 + 1)) + 1j * rng.normal((size, size // 2 + 1))) * amp
        img = np.fft.irfft2(spec, s=(size, size))
        out[k] = (img - img.mean()) / img.std()
    return out


def write_patches(path, patches):
    if not isinstance(patches, PatchSet):
        raise TypeError("write_patches expects a PatchSet")
    ps = patches
    with open(path, "wb") as fh:
        fh.write(PATCH_MAGIC + struct.pack("<II", ps.patch_edge, len(ps.patches)))
        fh.write(np.ascontiguousarray(ps.patches, dtype="<f8").tobytes())


def read_patches(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != PATCH_MAGIC:
        raise ValueError(f"{path}: not a patch file")
    edge, count = struct.unpack("<II", data[8:16])
    size = count * edge * edge
    if len(data) != 16 + 8 * size:
        raise ValueError(f"{path}: expected {size} float64 values, file holds {(len(data) - 16) / 8:g}")
    return PatchSet(edge, np.frombuffer(data, dtype="<f8", offset=16).reshape(count, edge * edge).astype(np.float64))


# --- PGM --------------------------------------------------------------------------

def normalize_tile(values):
    """Map to 0..255 by min/max; a constant tile maps to 127."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 127, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def filter_grid(W, tile_edge, separator=0):
    """Tile the rows of ``W`` into a near-square uint8 image with 1-pixel separators."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if W.shape[1] != tile_edge * tile_edge:
        edge = math.isqrt(W.shape[1])
        if edge * edge != W.shape[1]:
            raise ValueError(f"filter length {W.shape[1]} is not a square number")
        raise ValueError(f"filter length {W.shape[1]} does not match tile edge {tile_edge}")
    n = W.shape[0]
    ncols = math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    H = nrows * (tile_edge + 1) + 1
    Wd = ncols * (tile_edge + 1) + 1
    img = np.full((H, Wd), separator, dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, ncols)
        top = 1 + r * (tile_edge + 1)
        left = 1 + c * (tile_edge + 1)
        img[top:top + tile_edge, left:left + tile_edge] = normalize_tile(W[k]).reshape(tile_edge, tile_edge)
    return img


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise PgmError("PGM output needs a 2-d uint8 image")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise PgmError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace after maxval
    pix = data[pos:]
    if len(pix) != w * h:
        raise PgmError(f"{path}: expected {w * h} pixels, found {len(pix)}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w).copy()


def export_filter_grid(W, tile_edge, path):
    img = filter_grid(W, tile_edge)
    write_pgm(path, img)
    return img
