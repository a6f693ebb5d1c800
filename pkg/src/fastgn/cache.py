"""Binary feature cache (``FGNF``) and synthetic feature generation.

Layout, all little-endian::

    magic   4 bytes  b"FGNF"
    version u32      1
    n       u64
    d_f     u64
    C       u64
    features f64[n * d_f]   row-major
    labels   u32[n]
"""

import struct
from pathlib import Path

import numpy as np

from .affine import FeatureBatch

__all__ = [
    "MAGIC",
    "VERSION",
    "CacheFormatError",
    "write_feature_cache",
    "read_feature_cache",
    "make_features",
    "stratified_split",
]

MAGIC = b"FGNF"
VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


class CacheFormatError(ValueError):
    pass


def write_feature_cache(path, features, labels, n_classes):
    features = np.ascontiguousarray(features, dtype="<f8")
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ValueError("features must be (n, d_f) with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("labels must lie in [0, C)")
    n, d_f = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d_f, n_classes))
        fh.write(features.tobytes())
        fh.write(labels.astype("<u4").tobytes())


def read_feature_cache(path):
    """Return ``(FeatureBatch, n_classes)``; truncated or padded files are rejected."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CacheFormatError(f"{path}: file too short for the header ({len(data)} bytes)")
    magic, version, n, d_f, n_classes = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * n * d_f + 4 * n
    if len(data) != expected:
        raise CacheFormatError(f"{path}: length mismatch, expected {expected} bytes, found {len(data)}")
    features = np.frombuffer(data, dtype="<f8", count=n * d_f, offset=_HEADER.size).reshape(n, d_f)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=_HEADER.size + 8 * n * d_f)
    if n and labels.max() >= n_classes:
        raise CacheFormatError(f"{path}: label {labels.max()} out of range for C={n_classes}")
    return FeatureBatch(features.astype(np.float64), labels.astype(np.intp)), int(n_classes)


def make_features(n, d_f, n_classes, seed=0, mode="gaussian", noise=1.0, radius=1.0):
    """Synthetic features.

    ``gaussian``: standard-normal features with uniformly random labels.
    ``clustered``: balanced labels, class means drawn uniformly on a sphere of
    the given radius, isotropic within-class noise of std ``noise``.
    """
    if min(n, d_f, n_classes) < 1:
        raise ValueError("n, d_f and C must be positive")
    rng = np.random.default_rng(seed)
    if mode == "gaussian":
        features = rng.standard_normal((n, d_f))
        labels = rng.integers(0, n_classes, n)
    elif mode == "clustered":
        means = rng.standard_normal((n_classes, d_f))
        means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
        labels = rng.permutation(np.arange(n) % n_classes)
        features = means[labels] + noise * rng.standard_normal((n, d_f))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return FeatureBatch(features, labels)


def stratified_split(labels, eval_fraction, seed=0):
    """Per-class random split; returns ``(train_idx, eval_idx)``.

    Each class contributes ``round(eval_fraction * count)`` examples to the
    evaluation side, always leaving at least one in training.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train_idx, eval_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = min(int(round(eval_fraction * idx.size)), idx.size - 1)
        eval_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    eval_idx = np.sort(np.concatenate(eval_idx))
    if eval_idx.size == 0:
        raise ValueError("split leaves the evaluation side empty")
    return train_idx, eval_idx
