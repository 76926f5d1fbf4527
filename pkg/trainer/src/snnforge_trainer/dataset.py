"""MNIST-format digit data: IDX readers/writers and a deterministic
desk-scale generator.

The generator renders 28x28 digit glyphs from the DejaVu font family
(bundled with matplotlib) under random affine jitter, blur and noise, and
writes standard IDX files.  Real MNIST IDX files are drop-in replacements
everywhere these are used.
"""

import argparse
import gzip
import os
import struct

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

FONTS = (
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSansMono.ttf",
    "DejaVuSansMono-Bold.ttf",
)

_font_cache = {}


def _font_dir():
    import matplotlib

    return os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf")


def _get_font(name, size):
    key = (name, size)
    if key not in _font_cache:
        _font_cache[key] = ImageFont.truetype(os.path.join(_font_dir(), name), size)
    return _font_cache[key]


def render_digit(digit: int, rng) -> np.ndarray:
    """One 28x28 uint8 image of ``digit`` with randomized style and geometry.

    Glyphs fill most of the frame at near-full contrast (like the classic
    handwritten-digit files), so converted networks see a healthy input
    drive; geometry jitter and noise carry the intra-class variability.
    """
    font = _get_font(FONTS[rng.integers(len(FONTS))], int(rng.integers(20, 27)))
    canvas = Image.new("L", (56, 56), 0)
    draw = ImageDraw.Draw(canvas)
    text = str(digit)
    bbox = draw.textbbox((0, 0), text, font=font)
    w, h = bbox[2] - bbox[0], bbox[3] - bbox[1]
    draw.text((28 - w / 2 - bbox[0], 28 - h / 2 - bbox[1]), text, fill=255, font=font)

    angle = np.deg2rad(rng.uniform(-12, 12))
    scale = rng.uniform(0.85, 1.1)
    shear = rng.uniform(-0.15, 0.15)
    tx, ty = rng.uniform(-2.0, 2.0, 2)
    ca, sa = np.cos(angle) / scale, np.sin(angle) / scale
    a, b = ca, sa + shear / scale
    d, e = -sa, ca
    coeffs = (a, b, 28 - a * 28 - b * 28 - tx, d, e, 28 - d * 28 - e * 28 - ty)
    canvas = canvas.transform((56, 56), Image.AFFINE, coeffs, resample=Image.BILINEAR)
    canvas = canvas.filter(ImageFilter.GaussianBlur(rng.uniform(0.3, 0.7)))

    arr = np.asarray(canvas, dtype=np.float64)[14:42, 14:42]
    arr *= rng.uniform(0.92, 1.0) / max(arr.max(), 1e-9) * 255
    arr = np.clip(arr + rng.normal(0, 6, arr.shape) * (arr > 10), 0, 255)
    arr += np.clip(rng.normal(0, 2, arr.shape), 0, 8)
    return np.clip(arr, 0, 255).astype(np.uint8)


def generate_split(n: int, seed: int):
    """``n`` labeled images under one seed; label sequence is part of the seed."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    images = np.stack([render_digit(int(l), rng) for l in labels])
    return images, labels


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def write_idx_images(images: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with _open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with _open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def read_idx_images(path) -> np.ndarray:
    with _open(path, "rb") as f:
        blob = f.read()
    magic, n, h, w = struct.unpack_from(">IIII", blob, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(f"{path}: bad IDX image magic 0x{magic:08x}")
    return np.frombuffer(blob, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, h, w)


def read_idx_labels(path) -> np.ndarray:
    with _open(path, "rb") as f:
        blob = f.read()
    magic, n = struct.unpack_from(">II", blob, 0)
    if magic != IDX_LABEL_MAGIC:
        raise ValueError(f"{path}: bad IDX label magic 0x{magic:08x}")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=8)


def load_pair(images_path, labels_path):
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image/label counts differ")
    return images, labels


DEFAULT_TRAIN = ("desk-train-images-idx3-ubyte.gz", "desk-train-labels-idx1-ubyte.gz")
DEFAULT_TEST = ("desk-test-images-idx3-ubyte.gz", "desk-test-labels-idx1-ubyte.gz")


def find_pair(data_dir, which: str):
    """Locate a train/test IDX pair: real MNIST names first, then desk names."""
    mnist = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }[which]
    desk = {"train": DEFAULT_TRAIN, "test": DEFAULT_TEST}[which]
    for images, labels in ((mnist[0], mnist[1]), (mnist[0] + ".gz", mnist[1] + ".gz"), desk):
        ip = os.path.join(data_dir, images)
        lp = os.path.join(data_dir, labels)
        if os.path.exists(ip) and os.path.exists(lp):
            return ip, lp
    raise FileNotFoundError(f"no {which} IDX pair found under {data_dir}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Generate the desk-scale digit dataset")
    parser.add_argument("--out-dir", default="data")
    parser.add_argument("--train-n", type=int, default=12000)
    parser.add_argument("--test-n", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args(argv)

    os.makedirs(args.out_dir, exist_ok=True)
    train_images, train_labels = generate_split(args.train_n, args.seed)
    test_images, test_labels = generate_split(args.test_n, args.seed + 1)
    write_idx_images(train_images, os.path.join(args.out_dir, DEFAULT_TRAIN[0]))
    write_idx_labels(train_labels, os.path.join(args.out_dir, DEFAULT_TRAIN[1]))
    write_idx_images(test_images, os.path.join(args.out_dir, DEFAULT_TEST[0]))
    write_idx_labels(test_labels, os.path.join(args.out_dir, DEFAULT_TEST[1]))
    print(f"wrote {args.train_n} train / {args.test_n} test images to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
