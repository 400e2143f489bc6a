"""Datasets, binary loaders and device partitioning."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: torch.Tensor  # (N, C, H, W) or (N, d), values in [0, 1] for images
    labels: torch.Tensor  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in length")
        if self.labels.numel() and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label outside class range")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Dataset":
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def class_indices(self) -> dict[int, np.ndarray]:
        labels = self.labels.numpy()
        return {c: np.flatnonzero(labels == c) for c in range(self.num_classes)}


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------


def load_mnist(image_path, label_path) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped)."""
    with _open(image_path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise DataFormatError("image file shorter than its header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"bad image magic 0x{magic:08x}")
    if len(raw) - 16 != n * rows * cols:
        raise DataFormatError(f"image payload is {len(raw) - 16} bytes, header promises {n * rows * cols}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)

    with _open(label_path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataFormatError("label file shorter than its header")
    magic, m = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"bad label magic 0x{magic:08x}")
    if len(raw) - 8 != m:
        raise DataFormatError(f"label payload is {len(raw) - 8} bytes, header promises {m}")
    if m != n:
        raise DataFormatError(f"{n} images but {m} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(torch.from_numpy(pixels.astype(np.float64) / 255.0), torch.from_numpy(labels), 10)


def write_mnist(ds: Dataset, image_path, label_path) -> None:
    """Write ``ds`` (N, 1, H, W) as an IDX pair; pixels are rounded to bytes."""
    n, _, rows, cols = ds.images.shape
    pixels = np.clip(np.rint(ds.images.numpy() * 255), 0, 255).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.numpy().astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def load_cifar10(batch_paths) -> Dataset:
    """Read CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixels."""
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    images, labels = [], []
    for path in batch_paths:
        with _open(path) as fh:
            raw = fh.read()
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    lab = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    if lab.size and lab.max() > 9:
        raise DataFormatError("CIFAR-10 label byte above 9")
    return Dataset(torch.from_numpy(pixels.astype(np.float64) / 255.0), torch.from_numpy(lab), 10)


def write_cifar10(ds: Dataset, path) -> None:
    pixels = np.clip(np.rint(ds.images.numpy() * 255), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    if pixels.shape[1] != 3072:
        raise ValueError("CIFAR-10 records hold 3x32x32 images")
    rec = np.concatenate([ds.labels.numpy().astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# bundled and synthetic data
# ---------------------------------------------------------------------------


def bundled_mnist(test_per_class: int = 100) -> tuple[Dataset, Dataset]:
    """The 5000-image MNIST subset shipped with mlxtend, split train/test.

    The last ``test_per_class`` images of each digit form the test split.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    images = torch.from_numpy(x.reshape(-1, 1, 28, 28) / 255.0).to(DTYPE)
    labels = torch.from_numpy(y.astype(np.int64))
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[: len(idx) - test_per_class])
        test_idx.append(idx[len(idx) - test_per_class :])
    full = Dataset(images, labels, 10)
    return full.subset(np.concatenate(train_idx)), full.subset(np.concatenate(test_idx))


PANEL_SOURCES = (
    "astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry",
    "retina", "hubble_deep_field", "colorwheel", "cat", "stereo_motorcycle",
)


def natural_image_panel(n: int = 10, size: int = 32, grayscale: bool = False) -> Dataset:
    """Photographs bundled with scikit-image, resized to ``size`` x ``size``.

    Used as CIFAR-scale attack targets. Sample ``i`` gets label ``i % 10``.
    """
    import skimage.data
    from skimage.transform import resize

    images = []
    for i in range(n):
        name = PANEL_SOURCES[i % len(PANEL_SOURCES)]
        img = getattr(skimage.data, name)()
        if isinstance(img, tuple):
            img = img[0]
        img = np.asarray(img, dtype=np.float64)
        if img.max() > 1:
            img = img / 255.0
        img = img[..., :3]
        rounds = i // len(PANEL_SOURCES)
        if rounds:
            # further passes take progressively tighter centre crops
            h, w = img.shape[:2]
            frac = 0.5 ** rounds
            ch, cw = int(h * frac), int(w * frac)
            img = img[(h - ch) // 2 : (h + ch) // 2, (w - cw) // 2 : (w + cw) // 2]
        img = resize(img, (size, size, 3), anti_aliasing=True)
        if grayscale:
            img = img.mean(axis=2, keepdims=True)
        images.append(np.clip(img, 0, 1).transpose(2, 0, 1))
    x = torch.from_numpy(np.stack(images)).to(DTYPE)
    y = torch.arange(n) % 10
    return Dataset(x, y, 10)


def _class_means(classes: int, dim: int, separation: float) -> np.ndarray:
    means = np.zeros((classes, dim))
    if classes <= dim:
        means[np.arange(classes), np.arange(classes)] = separation / np.sqrt(2)
    else:
        if dim < 2:
            raise ValueError("need dim >= 2 when classes exceed dim")
        # points on a circle whose neighbouring chord equals the separation
        radius = separation / (2 * np.sin(np.pi / classes))
        ang = 2 * np.pi * np.arange(classes) / classes
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
    return means


def gen_synthetic(classes: int, dim: int, per_class: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian blobs whose nearest class means sit ``separation`` apart."""
    if min(classes, dim, per_class) < 1:
        raise ValueError("classes, dim and per_class must be >= 1")
    rng = np.random.default_rng(seed)
    means = _class_means(classes, dim, separation)
    x = np.concatenate([means[c] + rng.standard_normal((per_class, dim)) for c in range(classes)])
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(torch.from_numpy(x).to(DTYPE), torch.from_numpy(y), classes)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


@dataclass
class PartitionPlan:
    device_indices: list[np.ndarray]
    device_classes: list[list[int]]
    classes_per_device: int | None
    samples_per_class: int | None
    seed: int
    iid: bool = False

    @property
    def num_devices(self) -> int:
        return len(self.device_indices)

    def device_data(self, ds: Dataset, k: int) -> Dataset:
        return ds.subset(self.device_indices[k])

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_devices": self.num_devices,
                "classes_per_device": self.classes_per_device,
                "samples_per_class": self.samples_per_class,
                "seed": self.seed,
                "iid": self.iid,
                "device_classes": {str(k): c for k, c in enumerate(self.device_classes)},
                "devices": {str(k): idx.tolist() for k, idx in enumerate(self.device_indices)},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        obj = json.loads(text)
        n = obj["num_devices"]
        return cls(
            device_indices=[np.asarray(obj["devices"][str(k)], dtype=np.int64) for k in range(n)],
            device_classes=[list(obj["device_classes"][str(k)]) for k in range(n)],
            classes_per_device=obj.get("classes_per_device"),
            samples_per_class=obj.get("samples_per_class"),
            seed=obj["seed"],
            iid=obj.get("iid", False),
        )


class _Pool:
    """Per-class draw: without replacement until exhausted, then with replacement."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator):
        self.indices = indices
        self.order = rng.permutation(indices)
        self.pos = 0
        self.rng = rng

    def draw(self, n: int) -> np.ndarray:
        take = self.order[self.pos : self.pos + n]
        self.pos += len(take)
        if len(take) < n:
            exclude = set(take.tolist())
            rest = np.array([i for i in self.indices if i not in exclude])
            extra = self.rng.choice(rest, size=n - len(take), replace=False)
            take = np.concatenate([take, extra])
        return take


def partition_noniid(
    ds: Dataset, num_devices: int, classes_per_device: int = 2, samples_per_class: int = 20, seed: int = 0
) -> PartitionPlan:
    """Give every device ``classes_per_device`` random classes, ``samples_per_class`` each.

    Within a class, samples are handed out without replacement until the
    class is used up; later devices then draw with replacement across
    devices (never twice within one device).
    """
    if num_devices < 1 or classes_per_device < 1 or samples_per_class < 1:
        raise ValueError("num_devices, classes_per_device and samples_per_class must be >= 1")
    by_class = {c: idx for c, idx in ds.class_indices().items() if len(idx)}
    if classes_per_device > len(by_class):
        raise ValueError(f"{classes_per_device} classes per device but only {len(by_class)} populated")
    short = [c for c, idx in by_class.items() if len(idx) < samples_per_class]
    rng = np.random.default_rng(seed)
    available = sorted(c for c in by_class if c not in short)
    if classes_per_device > len(available):
        raise ValueError(f"fewer than {classes_per_device} classes hold {samples_per_class} samples")
    pools = {c: _Pool(by_class[c], rng) for c in available}
    indices, classes = [], []
    for _ in range(num_devices):
        chosen = sorted(rng.choice(available, size=classes_per_device, replace=False).tolist())
        classes.append([int(c) for c in chosen])
        indices.append(np.concatenate([pools[c].draw(samples_per_class) for c in chosen]).astype(np.int64))
    return PartitionPlan(indices, classes, classes_per_device, samples_per_class, seed)


def partition_iid(ds: Dataset, num_devices: int, samples_per_device: int, seed: int = 0) -> PartitionPlan:
    """Uniformly random shards covering the whole label mix."""
    if samples_per_device > len(ds):
        raise ValueError("device shard larger than the dataset")
    rng = np.random.default_rng(seed)
    pool = _Pool(np.arange(len(ds)), rng)
    labels = ds.labels.numpy()
    indices, classes = [], []
    for _ in range(num_devices):
        idx = pool.draw(samples_per_device).astype(np.int64)
        indices.append(idx)
        classes.append(sorted(set(labels[idx].tolist())))
    return PartitionPlan(indices, classes, None, None, seed, iid=True)


# the two non-IID presets used by the experiments
PRESETS = {
    "rep-leakage": {"classes_per_device": 2, "samples_per_class": 20},
    "defense": {"classes_per_device": 2, "samples_per_class": 100},
}
