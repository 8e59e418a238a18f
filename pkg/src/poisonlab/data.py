"""Dataset containers, synthetic data generation, IDX ingestion, splits, and seeding.

All pixel data lives in [0, 1] as 64-bit floats. Every random operation takes an
explicit 64-bit seed and is a pure function of (inputs, seed); named sub-streams
are derived with :func:`derive_seed` so that stages cannot perturb each other.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803

_U64 = 0xFFFFFFFFFFFFFFFF


class IdxFormatError(ValueError):
    """Raised when an IDX byte stream has a bad magic or truncated payload."""


def derive_seed(master: int, label: str) -> int:
    """Derive the labeled 64-bit sub-seed of a master seed.

    Hash-based, so streams for different labels are independent and adding a
    new consumer never shifts an existing one.
    """
    digest = hashlib.sha256(f"{master & _U64}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def rng_from(seed: int) -> np.random.Generator:
    """PCG64 generator for a 64-bit seed; the single RNG entry point."""
    return np.random.Generator(np.random.PCG64(seed & _U64))


@dataclass(frozen=True, eq=False)
class Image:
    """A height x width x channels pixel grid, row-major, values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] not in (1, 3):
            raise ValueError(f"pixels must have shape (H, W, C) with C in {{1, 3}}, got {p.shape}")
        if p.size and (float(p.min()) < 0.0 or float(p.max()) > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def flat(self) -> np.ndarray:
        """Row-major flattening of length H*W*C."""
        return self.pixels.reshape(-1)


@dataclass(eq=False)
class LabeledExample:
    image: Image
    label: int


@dataclass(eq=False)
class Dataset:
    """Ordered list of labeled images; the index of an example is its identity."""

    examples: list[LabeledExample]
    class_count: int
    name: str = "dataset"

    def __post_init__(self) -> None:
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        dims = None
        for i, ex in enumerate(self.examples):
            if not 0 <= ex.label < self.class_count:
                raise ValueError(f"example {i} has label {ex.label} outside [0, {self.class_count})")
            d = ex.image.pixels.shape
            if dims is None:
                dims = d
            elif d != dims:
                raise ValueError(f"example {i} has shape {d}, expected {dims}")

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, index: int) -> LabeledExample:
        return self.examples[index]

    def __iter__(self):
        return iter(self.examples)

    def _dims(self) -> tuple[int, int, int]:
        if not self.examples:
            raise ValueError("empty dataset has no image dimensions")
        return self.examples[0].image.pixels.shape

    @property
    def height(self) -> int:
        return self._dims()[0]

    @property
    def width(self) -> int:
        return self._dims()[1]

    @property
    def channels(self) -> int:
        return self._dims()[2]

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        """All examples as a flattened (N, H*W*C) matrix plus an (N,) label vector."""
        x = np.stack([ex.image.flat for ex in self.examples]) if self.examples else np.zeros((0, 0))
        y = np.array([ex.label for ex in self.examples], dtype=np.int64)
        return x, y

    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)


def synthetic_template(class_index: int, side: int) -> np.ndarray:
    """Fixed grayscale template of class `class_index`: a bright horizontal and
    vertical bar on a dim background, positioned by the class index.

    The (row, column) placement is injective for class_index < side*side, so
    any desk-scale class count gets a distinct geometry.
    """
    if class_index < 0:
        raise ValueError("class_index must be nonnegative")
    if side < 1:
        raise ValueError("side must be positive")
    band = max(1, side // 8)
    row = class_index % side
    col = (class_index // side + class_index) % side
    img = np.full((side, side), 0.1)
    img[row : row + band, :] = 0.9
    img[:, col : col + band] = 0.9
    return img[:, :, None]


def generate_synthetic(
    class_count: int, per_class: int, side: int, noise_std: float, seed: int
) -> Dataset:
    """Balanced grayscale dataset: per class, `per_class` noisy copies of its
    template, Gaussian pixel noise of std `noise_std`, clamped to [0, 1].

    Deterministic in (arguments, seed). Examples are ordered class-major.
    """
    if class_count < 2:
        raise ValueError("class_count must be at least 2")
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    if side < 8:
        raise ValueError("side must be at least 8")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    rng = rng_from(seed)
    examples = []
    for c in range(class_count):
        template = synthetic_template(c, side)
        noise = rng.normal(0.0, noise_std, size=(per_class, side, side, 1))
        block = np.clip(template[None] + noise, 0.0, 1.0)
        for i in range(per_class):
            examples.append(LabeledExample(Image(block[i]), c))
    return Dataset(examples, class_count, name=f"synthetic-{class_count}x{per_class}-{side}px")


def read_idx_labels(data: bytes) -> list[int]:
    """Decode an IDX label stream (big-endian magic 0x00000801 + count + bytes)."""
    if len(data) < 8:
        raise IdxFormatError("label stream shorter than its 8-byte header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    payload = data[8:]
    if len(payload) != count:
        raise IdxFormatError(f"label payload holds {len(payload)} bytes, header declares {count}")
    return list(payload)


def read_idx_images(data: bytes) -> np.ndarray:
    """Decode an IDX image stream to a (count, rows, cols) float array, pixels u/255."""
    if len(data) < 16:
        raise IdxFormatError("image stream shorter than its 16-byte header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    payload = data[16:]
    expected = count * rows * cols
    if len(payload) != expected:
        raise IdxFormatError(f"image payload holds {len(payload)} bytes, header declares {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, rows, cols)


def dataset_from_idx(
    image_bytes: bytes, label_bytes: bytes, class_count: int | None = None, name: str = "idx"
) -> Dataset:
    """Pair an IDX image stream with an IDX label stream by index."""
    images = read_idx_images(image_bytes)
    labels = read_idx_labels(label_bytes)
    if len(images) != len(labels):
        raise ValueError(f"image/label count mismatch: {len(images)} images, {len(labels)} labels")
    if class_count is None:
        class_count = max(labels) + 1 if labels else 2
    examples = [
        LabeledExample(Image(images[i][:, :, None]), labels[i]) for i in range(len(labels))
    ]
    return Dataset(examples, class_count, name=name)


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified disjoint train/test partition.

    The test set size is round(test_fraction * n); per-class contributions are
    allocated by largest remainder, so every class lands within one example of
    its exact proportional share. Relative example order is preserved.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    labels = dataset.labels()
    target_total = int(np.floor(test_fraction * n + 0.5))

    class_indices = [np.flatnonzero(labels == c) for c in range(dataset.class_count)]
    quotas = [test_fraction * len(idx) for idx in class_indices]
    base = [int(np.floor(q)) for q in quotas]
    extras = target_total - sum(base)
    by_remainder = sorted(range(dataset.class_count), key=lambda c: (-(quotas[c] - base[c]), c))
    counts = list(base)
    for c in by_remainder[:extras]:
        counts[c] += 1

    rng = rng_from(seed)
    test_mask = np.zeros(n, dtype=bool)
    for c in range(dataset.class_count):
        perm = rng.permutation(class_indices[c])
        test_mask[perm[: counts[c]]] = True

    train_examples = [dataset.examples[i] for i in range(n) if not test_mask[i]]
    test_examples = [dataset.examples[i] for i in range(n) if test_mask[i]]
    train = Dataset(train_examples, dataset.class_count, name=f"{dataset.name}-train")
    test = Dataset(test_examples, dataset.class_count, name=f"{dataset.name}-test")
    return train, test


def save_dataset(dataset: Dataset, directory: str | Path, provenance: str = "") -> None:
    """Persist to a directory: plain-text manifest + raw little-endian
    float32 pixel file + raw uint32 label file, both in example order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w, c = dataset._dims() if dataset.examples else (0, 0, 0)
    manifest = [
        f"name = {dataset.name}",
        f"class_count = {dataset.class_count}",
        f"height = {h}",
        f"width = {w}",
        f"channels = {c}",
        f"examples = {len(dataset)}",
        f"seed_provenance = {provenance}",
    ]
    (directory / "manifest.txt").write_text("\n".join(manifest) + "\n")
    pixels = np.stack([ex.image.pixels for ex in dataset.examples]) if dataset.examples else np.zeros((0,))
    (directory / "pixels.f32").write_bytes(pixels.astype("<f4").tobytes())
    (directory / "labels.u32").write_bytes(dataset.labels().astype("<u4").tobytes())


def load_dataset(directory: str | Path) -> Dataset:
    """Load a dataset previously written by :func:`save_dataset`."""
    directory = Path(directory)
    fields: dict[str, str] = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    n = int(fields["examples"])
    h, w, c = int(fields["height"]), int(fields["width"]), int(fields["channels"])
    pixels = np.frombuffer((directory / "pixels.f32").read_bytes(), dtype="<f4").astype(np.float64)
    labels = np.frombuffer((directory / "labels.u32").read_bytes(), dtype="<u4")
    if pixels.size != n * h * w * c:
        raise ValueError(f"pixel file holds {pixels.size} values, manifest declares {n * h * w * c}")
    if labels.size != n:
        raise ValueError(f"label file holds {labels.size} values, manifest declares {n}")
    pixels = pixels.reshape(n, h, w, c)
    examples = [LabeledExample(Image(pixels[i]), int(labels[i])) for i in range(n)]
    return Dataset(examples, int(fields["class_count"]), name=fields.get("name", "dataset"))
