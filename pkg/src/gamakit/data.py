"""Datasets: IDX (MNIST) ingestion, a desk-scale MNIST subset and synthetic Gaussian blobs."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803

IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def take(self, n):
        return LabeledBatch(self.images[:n], self.labels[:n])


@dataclass
class Dataset:
    name: str
    train: LabeledBatch
    val: LabeledBatch
    test: LabeledBatch
    image_shape: tuple
    num_classes: int
    epsilon: float

    def split(self, name):
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}; valid: train, val, test")
        return getattr(self, name)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path):
    """Parse a big-endian IDX file of unsigned bytes into a uint8 array."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise ParseError("file too short", field="magic")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC):
        raise ParseError(f"bad magic number 0x{magic:08x}", field="magic")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise ParseError("truncated dimension header", field="dims")
    dims = struct.unpack(f">{ndim}I", data[4:end])
    n = int(np.prod(dims))
    if len(data) - end != n:
        raise ParseError(f"expected {n} data bytes, found {len(data) - end}", field="data")
    return np.frombuffer(data, dtype=np.uint8, offset=end).reshape(dims).copy()


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise ConfigError("IDX writer supports label vectors and image stacks only")
    magic = IDX_LABELS_MAGIC if array.ndim == 1 else IDX_IMAGES_MAGIC
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def downsample2x(images):
    """Average 2x2 blocks: (M, H, W) -> (M, H//2, W//2)."""
    m, h, w = images.shape
    blocks = images[:, : h - h % 2, : w - w % 2].reshape(m, h // 2, 2, w // 2, 2)
    return blocks.mean(axis=(2, 4))


def load_mnist_idx(image_path, label_path, downsample=False):
    """Load an IDX image/label pair; pixels scaled to [0, 1], shape (M, 1, H, W)."""
    images = read_idx(image_path)
    labels = read_idx(label_path)
    if images.ndim != 3:
        raise ParseError(f"image file has {images.ndim} dimensions, expected 3", field="dims")
    if labels.ndim != 1:
        raise ParseError(f"label file has {labels.ndim} dimensions, expected 1", field="dims")
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels", field="count")
    if labels.size and labels.max() > 9:
        raise ParseError(f"label {int(labels.max())} outside 0-9", field="labels")
    x = images.astype(np.float64) / 255.0
    if downsample:
        x = downsample2x(x)
    return x[:, None], labels.astype(np.int64)


def save_cache(path, images, labels):
    np.savez(path, images=images, labels=labels)


def load_cache(path):
    with np.load(path) as z:
        return z["images"], z["labels"]


def cache_dir():
    return Path(os.environ.get("GAMAKIT_CACHE", Path.home() / ".cache" / "gamakit"))


def materialize_mnist_subset(root=None):
    """Write the 5000-digit MNIST subset bundled with mlxtend as IDX files under ``root``.

    Returns the directory. Existing files are reused.
    """
    root = Path(root) if root is not None else cache_dir() / "mnist5k"
    img = root / IDX_FILES["train_images"]
    lab = root / IDX_FILES["train_labels"]
    if img.exists() and lab.exists():
        return root
    try:
        from mlxtend.data import mnist_data
    except ImportError:  # pragma: no cover - depends on environment
        raise ConfigError(
            "no MNIST IDX files found; pass a directory with IDX files or install mlxtend"
        ) from None
    X, y = mnist_data()
    root.mkdir(parents=True, exist_ok=True)
    write_idx(img, X.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(lab, y.astype(np.uint8))
    return root


def _find(root, key):
    for name in (IDX_FILES[key], IDX_FILES[key] + ".gz"):
        p = Path(root) / name
        if p.exists():
            return p
    return None


def mnist_desk(root=None, seed=0, n_train=2000, n_val=1000, n_test=1000, downsample=True):
    """Desk-scale MNIST: 14x14 images, 2k train / 1k val / 1k test by default.

    ``root`` (or ``$GAMAKIT_MNIST``) may point at a directory of standard IDX
    files; otherwise the bundled 5k subset is used. Train and validation come
    from the training file and test from the t10k file when it is present;
    with a single file all three splits are drawn from it without overlap.
    """
    root = root or os.environ.get("GAMAKIT_MNIST")
    root = Path(root) if root else materialize_mnist_subset()
    tr_img, tr_lab = _find(root, "train_images"), _find(root, "train_labels")
    if tr_img is None or tr_lab is None:
        raise ConfigError(f"no IDX training files under {root}")
    x, y = load_mnist_idx(tr_img, tr_lab, downsample=downsample)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    te_img, te_lab = _find(root, "test_images"), _find(root, "test_labels")
    if te_img is not None and te_lab is not None:
        xt, yt = load_mnist_idx(te_img, te_lab, downsample=downsample)
        test_idx = np.random.default_rng(seed + 1).permutation(len(yt))[:n_test]
        test = LabeledBatch(xt[test_idx], yt[test_idx])
        need = n_train + n_val
    else:
        need = n_train + n_val + n_test
        test = None
    if need > len(y):
        raise ConfigError(f"requested {need} samples but only {len(y)} available")
    tr = order[:n_train]
    va = order[n_train : n_train + n_val]
    if test is None:
        te = order[n_train + n_val : need]
        test = LabeledBatch(x[te], y[te])
    return Dataset(
        name="mnist-desk",
        train=LabeledBatch(x[tr], y[tr]),
        val=LabeledBatch(x[va], y[va]),
        test=test,
        image_shape=tuple(x.shape[1:]),
        num_classes=10,
        epsilon=0.3,
    )


def gaussian_centers(n_classes, dim, separation):
    # centres depend only on (n_classes, dim), never on the sampling seed
    rng = np.random.default_rng(12345)
    v = rng.standard_normal((n_classes, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return 0.5 + 0.5 * separation * v


def synth_gaussians(n_classes=3, n_per_class=200, dim=2, separation=0.5, seed=0, sigma=0.1,
                    val_frac=0.2, test_frac=0.2):
    """Isotropic Gaussian blobs around fixed centres, clipped to [0, 1]^dim."""
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    centers = gaussian_centers(n_classes, dim, separation)
    rng = np.random.default_rng(seed)
    x = np.concatenate([c + sigma * rng.standard_normal((n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = np.clip(x, 0.0, 1.0)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    n_val = int(round(val_frac * len(y)))
    n_test = int(round(test_frac * len(y)))
    n_train = len(y) - n_val - n_test
    sl = [slice(0, n_train), slice(n_train, n_train + n_val), slice(n_train + n_val, len(y))]
    batches = [LabeledBatch(x[s], y[s]) for s in sl]
    return Dataset(
        name="gaussians",
        train=batches[0],
        val=batches[1],
        test=batches[2],
        image_shape=(dim,),
        num_classes=n_classes,
        epsilon=0.1,
    )


def load_dataset(name, seed=0, root=None):
    """Resolve a dataset name used on the command line."""
    if name in ("mnist", "mnist-desk"):
        return mnist_desk(root=root, seed=seed)
    if name == "mnist-full":
        return mnist_desk(root=root, seed=seed, n_train=50000, n_val=10000, n_test=10000,
                          downsample=False)
    if name == "gaussians":
        return synth_gaussians(n_classes=3, n_per_class=300, dim=2, separation=0.5, seed=seed)
    if name.startswith("gaussians:"):
        # gaussians:CLASSES:DIM:SEPARATION
        try:
            _, c, d, s = name.split(":")
            return synth_gaussians(int(c), 200, int(d), float(s), seed=seed)
        except ValueError:
            raise ConfigError(f"expected gaussians:CLASSES:DIM:SEPARATION, got {name!r}") from None
    raise ConfigError(f"unknown dataset {name!r}; valid: mnist, mnist-full, gaussians[:C:D:S]")
