"""Datasets: synthetic generators, the IDX reader/writer, and the seeded batch stream."""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IdxFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, split=None):
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, split or self.split)


@dataclass
class Batch:
    batch_id: int
    inputs: np.ndarray
    labels: np.ndarray


def _teacher_labels(x, classes, rng, hidden=32):
    W1 = rng.normal(size=(x.shape[1], hidden)) / np.sqrt(x.shape[1])
    W2 = rng.normal(size=(hidden, classes)) / np.sqrt(hidden)
    b2 = rng.normal(scale=0.1, size=classes)
    scores = np.tanh(x @ W1) @ W2 + b2
    return scores.argmax(axis=1)


def gen_synthetic(kind, n, seed=0, features=10, classes=None, separation=6.0, noise=0.15):
    """Reproducible synthetic classification data.

    * ``two-gaussians``: two isotropic unit-variance clusters ``separation`` sigmas apart.
    * ``xor-rings``: four blobs on the unit circle with alternating (XOR) labels, 2-D.
    * ``random-teacher``: Gaussian inputs labelled by a frozen random tanh network.
    """
    rng = np.random.default_rng(seed)
    if kind == "two-gaussians":
        classes = 2
    elif kind == "xor-rings":
        classes = 2
    elif kind == "random-teacher":
        classes = classes or 4
    else:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    if n < 2 * classes:
        raise ValueError(f"need at least {2 * classes} samples, got {n}")

    if kind == "two-gaussians":
        labels = np.arange(n) % 2
        direction = rng.normal(size=features)
        direction /= np.linalg.norm(direction)
        x = rng.normal(size=(n, features)) + np.outer(labels - 0.5, direction) * separation
    elif kind == "xor-rings":
        blob = np.arange(n) % 4
        angles = np.pi / 4 + blob * np.pi / 2
        centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        x = centers + rng.normal(scale=noise, size=(n, 2))
        labels = blob % 2
    else:
        x = rng.normal(size=(n, features))
        labels = _teacher_labels(x, classes, rng)
    perm = rng.permutation(n)
    return Dataset(x[perm], labels[perm], classes)


def train_test_split(dataset, n_test, seed=0):
    if not 0 < n_test < len(dataset):
        raise ValueError(f"n_test must be in (0, {len(dataset)}), got {n_test}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(perm[n_test:], "train"), dataset.subset(perm[:n_test], "test")


def _read_header(buf, what, magic, ndims_min):
    if len(buf) < 8:
        raise IdxFormatError("truncated", f"{what} file shorter than its header")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise IdxFormatError(f"bad-{what}-magic", f"{what} magic 0x{got:08x}, expected 0x{magic:08x}")
    ndims = got & 0xFF
    if ndims < ndims_min:
        raise IdxFormatError(f"bad-{what}-magic", f"{what} file has {ndims} dims")
    if len(buf) < 4 + 4 * ndims:
        raise IdxFormatError("truncated", f"{what} header truncated")
    dims = struct.unpack_from(f">{ndims}I", buf, 4)
    return dims, 4 + 4 * ndims


def load_idx(images_path, labels_path, standardize=False, class_count=None, split="train"):
    """Read an IDX image/label file pair into a ``[N, 1, H, W]`` dataset scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        ibuf = f.read()
    with open(labels_path, "rb") as f:
        lbuf = f.read()
    dims, off = _read_header(ibuf, "images", IDX_IMAGES_MAGIC, 3)
    (n_lab,), loff = _read_header(lbuf, "labels", IDX_LABELS_MAGIC, 1)
    n, h, w = dims
    if len(ibuf) != off + n * h * w:
        raise IdxFormatError("truncated", f"images payload has {len(ibuf) - off} bytes, expected {n * h * w}")
    if len(lbuf) != loff + n_lab:
        raise IdxFormatError("truncated", f"labels payload has {len(lbuf) - loff} bytes, expected {n_lab}")
    if n != n_lab:
        raise IdxFormatError("count-mismatch", f"{n} images but {n_lab} labels")
    x = np.frombuffer(ibuf, dtype=np.uint8, offset=off).reshape(n, 1, h, w) / 255.0
    if standardize:
        mean, std = x.mean(), x.std()
        x = (x - mean) / (std if std > 0 else 1.0)
    y = np.frombuffer(lbuf, dtype=np.uint8, offset=loff).astype(np.int64)
    classes = class_count or (int(y.max()) + 1 if n else 1)
    return Dataset(x, y, classes, split)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 ``images [N, H, W]`` and ``labels [N]`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def batch_stream(dataset, batch_size, seed=0, epochs=None):
    """Yield :class:`Batch` objects with ids 1, 2, ...; reshuffled every epoch.

    The tail batch of each epoch is kept. ``epochs=None`` streams forever.
    """
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    rng = np.random.default_rng(seed)
    batch_id = 1
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            yield Batch(batch_id, dataset.inputs[idx], dataset.labels[idx])
            batch_id += 1
        epoch += 1


def make_datasets(config):
    """Train/test datasets described by a :class:`~fdg.config.RunConfig`."""
    if config.dataset == "idx":
        train = load_idx(config.images, config.labels, config.standardize)
        if config.test_images:
            test = load_idx(config.test_images, config.test_labels, config.standardize,
                            class_count=train.class_count, split="test")
        else:
            train, test = train_test_split(train, min(config.n_test, len(train) // 5), config.data_seed)
        return train, test
    full = gen_synthetic(config.dataset, config.n_train + config.n_test, seed=config.data_seed,
                         features=config.features, classes=config.classes)
    return train_test_split(full, config.n_test, seed=config.data_seed)
