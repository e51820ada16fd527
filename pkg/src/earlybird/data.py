"""MNIST IDX and CIFAR-10 binary readers, plus a rendered-digit stand-in for MNIST.

All images come out as float32 NCHW arrays.  MNIST pixels are scaled to
[0, 1]; CIFAR-10 is standardised per channel with mean/std measured on the
loaded training records.
"""

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .errors import DataFormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.y.shape[0])

    def head(self, n):
        return Dataset(self.x[:n], self.y[:n], self.num_classes, dict(self.meta))

    def split_tail(self, fraction=0.1):
        """``(head, tail)`` where ``tail`` is the last ``fraction`` of the samples."""
        n_tail = int(round(len(self) * fraction))
        cut = len(self) - n_tail
        return (
            Dataset(self.x[:cut], self.y[:cut], self.num_classes, dict(self.meta)),
            Dataset(self.x[cut:], self.y[cut:], self.num_classes, dict(self.meta)),
        )


@dataclass
class DataSplits:
    train: Dataset
    val: Dataset
    test: Dataset


def _read_bytes(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise FileNotFoundError(path)
    data = path.read_bytes()
    return gzip.decompress(data) if path.suffix == ".gz" else data


# --------------------------------------------------------------------------
# MNIST IDX
# --------------------------------------------------------------------------

def parse_idx_images(data, limit=None):
    if len(data) < 16:
        raise DataFormatError("IDX image header truncated", len(data))
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"bad IDX image magic 0x{magic:08x}", 0)
    expected = 16 + n * rows * cols
    if len(data) != expected:
        raise DataFormatError(f"IDX image file has {len(data)} bytes, header implies {expected}", min(len(data), expected))
    if limit is not None:
        n = min(n, limit)
    pix = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pix.reshape(n, 1, rows, cols)


def parse_idx_labels(data, limit=None, num_classes=10):
    if len(data) < 8:
        raise DataFormatError("IDX label header truncated", len(data))
    magic, n = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"bad IDX label magic 0x{magic:08x}", 0)
    if len(data) != 8 + n:
        raise DataFormatError(f"IDX label file has {len(data)} bytes, header implies {8 + n}", min(len(data), 8 + n))
    labels = np.frombuffer(data, dtype=np.uint8, offset=8)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise DataFormatError(f"label {labels[bad[0]]} out of range", 8 + int(bad[0]))
    if limit is not None:
        labels = labels[:limit]
    return labels.astype(np.int64)


def load_mnist_idx(images_path, labels_path, subset=None):
    images = parse_idx_images(_read_bytes(images_path), subset)
    labels = parse_idx_labels(_read_bytes(labels_path), subset)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float32) / np.float32(255.0)
    return Dataset(x, labels, 10, {"format": "mnist-idx"})


def encode_idx_images(images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()


# --------------------------------------------------------------------------
# CIFAR-10 binary
# --------------------------------------------------------------------------

def parse_cifar10_bin(data, limit=None):
    if len(data) % CIFAR_RECORD:
        raise DataFormatError(
            f"CIFAR-10 file length {len(data)} is not a multiple of {CIFAR_RECORD}",
            len(data) - len(data) % CIFAR_RECORD,
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"label {labels[bad[0]]} out of range", int(bad[0]) * CIFAR_RECORD)
    return records[:, 1:].reshape(-1, 3, 32, 32), labels.astype(np.int64)


def load_cifar10_bin(paths, subset=None, stats=None):
    """Concatenate record files (up to ``subset`` records) and standardise per channel.

    ``stats`` is ``(mean, std)``; when omitted it is measured on these records.
    """
    xs, ys, left = [], [], subset
    for path in paths:
        if left is not None and left <= 0:
            break
        x, y = parse_cifar10_bin(_read_bytes(path), left)
        xs.append(x)
        ys.append(y)
        if left is not None:
            left -= len(y)
    x = np.concatenate(xs).astype(np.float32) / np.float32(255.0)
    y = np.concatenate(ys)
    if stats is None:
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
    else:
        mean, std = (np.asarray(s, dtype=np.float32) for s in stats)
    x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    meta = {"format": "cifar10-bin", "mean": [float(v) for v in mean], "std": [float(v) for v in std]}
    return Dataset(x.astype(np.float32), y, 10, meta)


# --------------------------------------------------------------------------
# Entry points
# --------------------------------------------------------------------------

def load_dataset(root, format, split="train", subset=None, stats=None):
    """Load one split from a directory holding the standard file names."""
    root = Path(root)
    if format == "mnist-idx":
        img, lab = MNIST_FILES[split]
        return load_mnist_idx(root / img, root / lab, subset)
    if format == "cifar10-bin":
        if (root / "cifar-10-batches-bin").is_dir():
            root = root / "cifar-10-batches-bin"
        return load_cifar10_bin([root / f for f in CIFAR_FILES[split]], subset, stats)
    raise InputError(f"unknown dataset format {format!r}")


def load_splits(root, format, subset=None, test_subset=None, val_fraction=0.1):
    """Train/validation/test splits; validation is the last ``val_fraction`` of the training records."""
    train = load_dataset(root, format, "train", subset)
    stats = (train.meta["mean"], train.meta["std"]) if format == "cifar10-bin" else None
    test = load_dataset(root, format, "test", test_subset, stats)
    train, val = train.split_tail(val_fraction)
    return DataSplits(train, val, test)


# --------------------------------------------------------------------------
# Rendered digits
# --------------------------------------------------------------------------

_FONT_PREFIXES = ("DejaVuSans", "DejaVuSerif", "STIXGeneral", "cmr10", "cmtt10", "cmss10", "cmb10")


def _digit_fonts():
    dirs = []
    try:
        import matplotlib

        dirs.append(Path(matplotlib.get_data_path()) / "fonts" / "ttf")
    except ImportError:
        pass
    dirs.append(Path("/usr/share/fonts/truetype/dejavu"))
    seen, fonts = set(), []
    for d in dirs:
        if not d.is_dir():
            continue
        for f in sorted(d.glob("*.ttf")):
            if f.name in seen or not f.name.startswith(_FONT_PREFIXES) or "Display" in f.name:
                continue
            seen.add(f.name)
            fonts.append(str(f))
    return fonts


def render_digits(n, seed=0, size=28):
    """Render ``n`` randomly distorted digit glyphs as uint8 ``(n, size, size)`` images.

    Each sample picks a font, point size, rotation, shear, scale, offset,
    stroke thickening and blur, then adds pixel noise and occasionally a stray
    stroke.  Labels are uniform over 0-9.
    """
    from PIL import Image, ImageDraw, ImageFilter, ImageFont

    rng = np.random.Generator(np.random.PCG64(seed))
    fonts = _digit_fonts()
    canvas = 2 * size
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n)
    for k in range(n):
        pt = int(rng.integers(40, 52))
        if fonts:
            font = ImageFont.truetype(fonts[int(rng.integers(len(fonts)))], pt)
        else:
            font = ImageFont.load_default(pt)
        img = Image.new("L", (canvas, canvas), 0)
        draw = ImageDraw.Draw(img)
        draw.text((canvas / 2, canvas / 2), str(labels[k]), fill=255, font=font, anchor="mm")
        if rng.random() < 0.3:
            pts = rng.uniform(0.2 * canvas, 0.8 * canvas, size=4)
            draw.line(list(pts), fill=int(rng.integers(90, 200)), width=int(rng.integers(1, 3)))
        if rng.random() < 0.5:
            img = img.filter(ImageFilter.MaxFilter(3))
        angle = np.deg2rad(rng.uniform(-18, 18))
        shear = rng.uniform(-0.3, 0.3)
        scale = rng.uniform(0.85, 1.1)
        dx, dy = rng.uniform(-4, 4, size=2)
        # inverse affine: output -> input coordinates, about the canvas centre
        c, s = np.cos(angle), np.sin(angle)
        m = np.array([[c, -s + shear], [s, c]]) / scale
        centre = np.array([canvas / 2, canvas / 2])
        offset = centre - m @ (centre + np.array([dx, dy]))
        img = img.transform(
            (canvas, canvas), Image.AFFINE,
            (m[0, 0], m[0, 1], offset[0], m[1, 0], m[1, 1], offset[1]),
            resample=Image.BILINEAR,
        )
        img = img.filter(ImageFilter.GaussianBlur(rng.uniform(0.3, 1.0)))
        img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
        arr = arr + rng.normal(0, 12, arr.shape)
        images[k] = np.clip(arr, 0, 255).astype(np.uint8)
    return images, labels.astype(np.uint8)


def write_synthetic_mnist(root, n_train=10000, n_test=2000, seed=0):
    """Write rendered digits under ``root`` using the MNIST IDX file names."""
    root = Path(root)
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        images, labels = render_digits(n, s)
        img_name, lab_name = MNIST_FILES[split]
        atomic_write(root / img_name, encode_idx_images(images))
        atomic_write(root / lab_name, encode_idx_labels(labels))
    return root
