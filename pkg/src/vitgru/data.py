"""Dataset scanning, preprocessing, stratified splitting, and augmentation.

A dataset is a directory with one subdirectory per class holding PNG/JPEG
files. Images are resized bilinearly to the working resolution, grayscale is
replicated to three channels, and intensities land in [0, 1]. A synthetic
generator writes class-separable blob images in the same layout so the whole
pipeline runs without any external data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .rng import substream

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass
class DatasetRecord:
    path: str
    label: int
    class_name: str
    split: str | None = None


@dataclass
class DatasetIndex:
    records: list[DatasetRecord]
    class_names: list[str]
    skipped: list[dict] = field(default_factory=list)

    @property
    def class_to_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.class_names)}

    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in self.class_names}
        for r in self.records:
            out[r.class_name] += 1
        return out

    def subset(self, split: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == split]


@dataclass
class ImageSample:
    pixels: np.ndarray  # [S x S x 3] float in [0, 1]
    label: int
    path: str = ""
    split: str | None = None


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    p_brightness_contrast: float = 0.3
    p_median_blur: float = 0.4
    brightness_delta_range: tuple = (-0.2, 0.2)
    contrast_factor_range: tuple = (0.8, 1.2)
    median_kernel: int = 3
    seed: int = 0
    train_only: bool = True

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rot90", "p_brightness_contrast", "p_median_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability in [0, 1], got {p}")
        if self.median_kernel < 3 or self.median_kernel % 2 == 0:
            raise ConfigError(f"median_kernel must be odd and >= 3, got {self.median_kernel}")


def scan_dataset(root) -> DatasetIndex:
    """Build the index: one class per subdirectory, lexicographic order throughout.

    Files that fail a cheap decode check land in the skip report instead of
    aborting the scan.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} has no class subdirectories")
    records: list[DatasetRecord] = []
    skipped: list[dict] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        kept = 0
        for p in files:
            try:
                with Image.open(p) as im:
                    im.verify()
            except Exception as exc:
                skipped.append({"path": str(p), "reason": str(exc)})
                continue
            records.append(DatasetRecord(str(p), label, class_dir.name))
            kept += 1
        if kept == 0:
            raise DataError(f"class directory {class_dir} has no readable images")
    return DatasetIndex(records, [d.name for d in class_dirs], skipped)


def decode_preprocess(path, image_size: int = 224) -> np.ndarray:
    """Decoded pixels: bilinear resize, grayscale replicated to RGB, values in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return arr / 255.0


def load_samples(index: DatasetIndex, split: str | None = None, image_size: int = 224) -> list[ImageSample]:
    """Decode every record (or just one split) into memory."""
    records = index.records if split is None else index.subset(split)
    return [
        ImageSample(decode_preprocess(r.path, image_size), r.label, r.path, r.split)
        for r in records
    ]


def stratified_split(index: DatasetIndex, ratio: float = 0.8, seed: int = 0) -> DatasetIndex:
    """Tag each record train or test, per class, by seeded shuffle.

    Per class, round(ratio * n) records train (clamped so both sides stay
    non-empty); the splits are disjoint and their union is the whole index.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    new_records = [DatasetRecord(r.path, r.label, r.class_name) for r in index.records]
    for label, class_name in enumerate(index.class_names):
        positions = [i for i, r in enumerate(new_records) if r.label == label]
        n = len(positions)
        if n < 2:
            raise DataError(f"class {class_name} has {n} records; need at least 2 to split")
        n_train = int(math.floor(ratio * n + 0.5))
        n_train = min(max(n_train, 1), n - 1)
        rng = substream(seed, "split", class_name)
        order = rng.permutation(n)
        train_set = {positions[j] for j in order[:n_train]}
        for i in positions:
            new_records[i].split = "train" if i in train_set else "test"
    return DatasetIndex(new_records, list(index.class_names), list(index.skipped))


def median_filter(img: np.ndarray, kernel: int) -> np.ndarray:
    """Per-channel median with edge replication."""
    h, w, _ = img.shape
    pad = kernel // 2
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    windows = np.stack(
        [padded[di : di + h, dj : dj + w, :] for di in range(kernel) for dj in range(kernel)],
        axis=0,
    )
    return np.median(windows, axis=0)


def augment_batch(batch: list[ImageSample], config: AugmentConfig, rng: np.random.Generator) -> list[ImageSample]:
    """Independently transform each image; labels and the [0, 1] range survive.

    Per image: horizontal flip, vertical flip, a k*90-degree rotation with k
    uniform in {1, 2, 3}, brightness/contrast jitter clamped back to [0, 1],
    and a median blur, each fired by its own probability. The event coin is
    drawn for every stage even when it misses, so a given rng stream always
    yields the same batch.
    """
    if config.train_only:
        for s in batch:
            if s.split == "test":
                raise DataError(f"augmentation requested for test-split sample {s.path or s.label}")
    out = []
    for s in batch:
        px = s.pixels
        if rng.random() < config.p_hflip:
            px = px[:, ::-1, :]
        if rng.random() < config.p_vflip:
            px = px[::-1, :, :]
        if rng.random() < config.p_rot90:
            px = np.rot90(px, k=int(rng.integers(1, 4)), axes=(0, 1))
        if rng.random() < config.p_brightness_contrast:
            contrast = rng.uniform(*config.contrast_factor_range)
            brightness = rng.uniform(*config.brightness_delta_range)
            px = np.clip(contrast * (px - 0.5) + 0.5 + brightness, 0.0, 1.0)
        if rng.random() < config.p_median_blur:
            px = median_filter(np.ascontiguousarray(px), config.median_kernel)
        out.append(ImageSample(np.ascontiguousarray(px), s.label, s.path, s.split))
    return out


def synth_generate(out_dir, per_class: int = 20, num_classes: int = 3,
                   image_size: int = 224, seed: int = 0) -> DatasetIndex:
    """Write class-separable blob images in the scan_dataset layout.

    Class k gets a Gaussian bright spot at its own anchor position plus seeded
    noise, saved as 8-bit grayscale PNGs; identical seeds give identical bytes.
    """
    if per_class < 1 or num_classes < 1:
        raise ConfigError(f"need per_class >= 1 and num_classes >= 1, got {per_class}/{num_classes}")
    out_dir = Path(out_dir)
    rng = substream(seed, "synth")
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s]
    sigma = s / 6.0
    for k in range(num_classes):
        angle = 2.0 * math.pi * k / num_classes
        cy = s / 2.0 + (s / 4.0) * math.sin(angle)
        cx = s / 2.0 + (s / 4.0) * math.cos(angle)
        class_dir = out_dir / f"class_{k}"
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            jy, jx = rng.normal(0.0, s * 0.02, size=2)
            d2 = (yy - cy - jy) ** 2 + (xx - cx - jx) ** 2
            blob = np.exp(-d2 / (2.0 * sigma * sigma))
            noise = rng.normal(0.0, 0.05, size=(s, s))
            img = np.clip(0.2 + 0.6 * blob + noise, 0.0, 1.0)
            arr = np.round(img * 255.0).astype(np.uint8)
            Image.fromarray(arr, "L").save(class_dir / f"sample_{i:04d}.png")
    return scan_dataset(out_dir)
