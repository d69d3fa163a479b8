"""Dataset ingestion: MNIST IDX files, synthetic coefficient data, cached singular systems."""

from __future__ import annotations

import gzip
import hashlib
import struct
from pathlib import Path

import numpy as np

from .exceptions import BadMagicError, DimMismatchError, TruncatedFileError
from .operator_core import SingularSystem, build_singular_system

__all__ = [
    "IMAGE_MAGIC",
    "LABEL_MAGIC",
    "cached_singular_system",
    "file_digest",
    "load_mnist_idx",
    "read_idx",
    "synthetic_dataset",
    "write_idx",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, magic: int, limit: int | None = None) -> np.ndarray:
    """Read a big-endian unsigned-byte IDX array, optionally only the first ``limit`` items."""
    with _open(path) as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise TruncatedFileError(f"{path}: missing IDX header")
        (found,) = struct.unpack(">I", header)
        if found != magic:
            raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
        ndim = magic & 0xFF
        raw_dims = fh.read(4 * ndim)
        if len(raw_dims) < 4 * ndim:
            raise TruncatedFileError(f"{path}: truncated dimension block")
        dims = list(struct.unpack(f">{ndim}I", raw_dims))
        if limit is not None:
            dims[0] = min(dims[0], int(limit))
        count = int(np.prod(dims))
        payload = fh.read(count)
    if len(payload) < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array, magic: int) -> None:
    """Write a uint8 array as IDX (gzip-compressed with a fixed mtime when the name ends in ``.gz``)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if arr.ndim != (magic & 0xFF):
        raise DimMismatchError(f"magic 0x{magic:08x} needs {magic & 0xFF} dims, array has {arr.ndim}")
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def load_mnist_idx(images_path, labels_path=None, limit: int | None = None, offset: int = 0):
    """Load MNIST images as flat 784-vectors in [0, 1] (and labels if a path is given).

    ``offset`` skips leading items, so disjoint train/test slices can be cut
    from one file.
    """
    stop = None if limit is None else offset + limit
    images = read_idx(images_path, IMAGE_MAGIC, stop)
    if images.shape[1:] != (28, 28):
        raise DimMismatchError(f"expected 28x28 images, got {images.shape[1:]}")
    X = images[offset:].reshape(-1, 784).astype(np.float64) / 255.0
    if labels_path is None:
        return X
    labels = read_idx(labels_path, LABEL_MAGIC, stop)[offset:].astype(np.int64)
    if labels.shape[0] != X.shape[0]:
        raise DimMismatchError(f"{X.shape[0]} images but {labels.shape[0]} labels")
    return X, labels


def synthetic_dataset(system: SingularSystem, n_samples: int, kind: str = "gaussian",
                      seed: int = 0, mean: float = 1.0, scale: float = 0.5,
                      source_power: float = 0.0) -> np.ndarray:
    """Samples ``x = sum_j c_j v_j`` with i.i.d. coefficients.

    ``gaussian`` draws ``c ~ N(mean, scale^2)``; ``uniform`` draws from
    ``mean + scale [-1, 1]``. ``source_power = mu > 0`` multiplies mode ``j``
    by ``sigma_j^{2 mu}`` so that ``x = A^mu w``.
    """
    rng = np.random.default_rng(seed)
    shape = (n_samples, system.n)
    if kind == "gaussian":
        C = mean + scale * rng.standard_normal(shape)
    elif kind == "uniform":
        C = mean + scale * rng.uniform(-1.0, 1.0, shape)
    else:
        raise ValueError(f"unknown distribution {kind!r}")
    if source_power:
        C = C * system.sigma_sq**source_power
    return system.synthesize(C)


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def cached_singular_system(A_tilde, cache_dir, method: str = "jacobi", **kwargs) -> SingularSystem:
    """Build the singular system of ``A_tilde`` once and reuse it from ``cache_dir``.

    The cache key is the SHA-256 of the operator bytes and the method.
    """
    A = np.ascontiguousarray(A_tilde, dtype=np.float64)
    key = hashlib.sha256(A.tobytes() + str(A.shape).encode() + method.encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"singular-{key}.npz"
    if path.exists():
        with np.load(path) as z:
            return SingularSystem(z["sigma_sq"], z["v"], z["u"], int(z["null_dim"]),
                                  float(z["zero_threshold"]))
    system = build_singular_system(A, method=method, **kwargs)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, sigma_sq=system.sigma_sq, v=system.v, u=system.u,
             null_dim=system.null_dim, zero_threshold=system.zero_threshold)
    tmp.replace(path)
    return system
