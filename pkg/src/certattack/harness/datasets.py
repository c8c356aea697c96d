"""Desk-scale datasets: synthetic 2-D point sets and IDX image files.

The IDX reader/writer speaks the standard big-endian container (magic
0x00000803 for images, 0x00000801 for labels), transparently gzipped when
the filename ends in .gz. The digits fixture upsamples sklearn's 8x8
digits to 28x28 so image-model code paths run without any download.
"""

import gzip
import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits, make_blobs, make_moons

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_BLOB_CENTERS = [[0.25, 0.25], [0.75, 0.75]]


def make_synthetic(kind, n, seed=0):
    """Two-class 2-D points in [0,1]^2, deterministic under the seed."""
    if n < 2:
        raise ValueError("need at least two points")
    if kind == "blobs":
        X, y = make_blobs(n_samples=n, centers=_BLOB_CENTERS,
                          cluster_std=0.06, random_state=seed)
    elif kind == "moons":
        X, y = make_moons(n_samples=n, noise=0.05, random_state=seed)
        # raw moons span roughly [-1,2] x [-0.5,1]; map into the unit box
        X = (X + np.array([1.25, 0.75])) / np.array([3.6, 2.0])
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    return np.clip(X, 0.0, 1.0), y.astype(np.int64)


def _open(path, mode="rb"):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise ValueError(f"truncated IDX file: {what} "
                         f"({len(buf)} of {count} bytes)")
    return buf


def load_idx_images(path):
    """(n, rows, cols) float64 images scaled into [0, 1]."""
    with _open(path) as fh:
        magic, n, rows, cols = struct.unpack(
            ">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"bad image magic 0x{magic:08x}")
        raw = _read_exact(fh, n * rows * cols, "image payload")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    return data.astype(np.float64) / 255.0


def load_idx_labels(path):
    with _open(path) as fh:
        magic, n = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"bad label magic 0x{magic:08x}")
        raw = _read_exact(fh, n, "label payload")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError("labels outside 0-9")
    return labels


def load_mnist_idx(images_path, labels_path):
    """Paired IDX image/label files as (images in [0,1], labels 0-9)."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images vs "
                         f"{labels.shape[0]} labels")
    return images, labels


def save_idx_images(path, images):
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise ValueError("image values must fit uint8")
        arr = np.round(arr).astype(np.uint8)
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def save_idx_labels(path, labels):
    arr = np.asarray(labels)
    if arr.ndim != 1 or np.any(arr < 0) or np.any(arr > 255):
        raise ValueError("labels must be a 1-D uint8 vector")
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, arr.size))
        fh.write(arr.astype(np.uint8).tobytes())


def digits_idx_fixture(out_dir, n=None):
    """Write sklearn's digits as 28x28 IDX files; returns the two paths.

    Each 8x8 digit (values 0..16) is 3x nearest-neighbor upsampled to
    24x24 and padded by 2 on every side, giving MNIST-shaped grayscale
    images with the usual blank border.
    """
    X, y = load_digits(return_X_y=True)
    if n is not None:
        if not 1 <= n <= len(y):
            raise ValueError("subset size exceeds dataset size")
        X, y = X[:n], y[:n]
    img8 = X.reshape(-1, 8, 8) / 16.0
    img24 = np.kron(img8, np.ones((1, 3, 3)))
    img28 = np.pad(img24, ((0, 0), (2, 2), (2, 2)))
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    images_path = f"{out_dir}/digits-images-idx3-ubyte.gz"
    labels_path = f"{out_dir}/digits-labels-idx1-ubyte.gz"
    save_idx_images(images_path, np.round(img28 * 255))
    save_idx_labels(labels_path, y)
    return images_path, labels_path
