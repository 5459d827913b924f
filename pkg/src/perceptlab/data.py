"""Synthetic "textured blob" dataset plus generic image-folder ingestion.

Four fine-grained classes on 32x32 RGB images: each image is a soft-edged
blob on a noisy gradient background, carrying a class-defining number of dark
spots and a class-defining stripe frequency. Everything is generated from a
seed, and pixels are quantized to the 8-bit grid so PNG round trips are exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CLASS_NAMES = ("few_coarse", "few_fine", "many_coarse", "many_fine")
SPOT_COUNTS = (3, 3, 6, 6)
STRIPE_FREQS = (2.0, 5.0, 2.0, 5.0)
IMAGE_SIZE = 32

SHAPE_KINDS = ("circle", "triangle")


@dataclass
class Split:
    images: np.ndarray  # (N, H, W, 3) float32 in [0,1], 8-bit quantized
    labels: np.ndarray  # (N,) int64
    ids: list[str]

    def __len__(self):
        return len(self.ids)


@dataclass
class ImageSet:
    class_names: tuple[str, ...]
    splits: dict[str, Split] = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def index_of(self, image_id: str) -> tuple[str, int]:
        for split_name, split in self.splits.items():
            try:
                return split_name, split.ids.index(image_id)
            except ValueError:
                continue
        raise KeyError(image_id)

    def pixels(self, image_id: str) -> np.ndarray:
        split_name, i = self.index_of(image_id)
        return self.splits[split_name].images[i]


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _render_blob(class_idx: int, rng: np.random.Generator, size: int) -> np.ndarray:
    spots = SPOT_COUNTS[class_idx]
    freq = STRIPE_FREQS[class_idx] * rng.uniform(0.92, 1.08)

    lin = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    base = rng.uniform(0.25, 0.55, size=3)
    gdir = rng.normal(size=2)
    gdir /= np.linalg.norm(gdir) + 1e-12
    shade = rng.uniform(-0.12, 0.12, size=3)
    img = base[None, None, :] + (xx * gdir[0] + yy * gdir[1])[:, :, None] * shade[None, None, :]

    cx, cy = rng.uniform(-0.12, 0.12, size=2)
    r0, r1 = rng.uniform(0.55, 0.75, size=2)
    theta = rng.uniform(0, np.pi)
    xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    dist = (xr / r0) ** 2 + (yr / r1) ** 2
    mask = 1.0 / (1.0 + np.exp((dist - 1.0) / 0.08))

    blob_color = rng.uniform(0.45, 0.8, size=3)
    angle = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(np.pi * freq * (xr * np.cos(angle) + yr * np.sin(angle)) + phase)
    amp = rng.uniform(0.10, 0.16)
    blob = blob_color[None, None, :] + (wave * amp)[:, :, None]

    img = img * (1 - mask[:, :, None]) + blob * mask[:, :, None]

    # dark spots: rejection-sample positions inside the blob, keep them apart
    positions = []
    attempts = 0
    while len(positions) < spots and attempts < 200:
        attempts += 1
        ang = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform(0, 1)) * 0.72
        px, py = rad * np.cos(ang), rad * np.sin(ang)
        if all((px - qx) ** 2 + (py - qy) ** 2 > 0.22 ** 2 for qx, qy in positions):
            positions.append((px, py))
    spot_r = rng.uniform(0.085, 0.12)
    for px, py in positions:
        d2 = (xr - px) ** 2 + (yr - py) ** 2
        s = np.exp(-d2 / (2 * spot_r ** 2)) * mask
        img = img * (1 - 0.85 * s[:, :, None])

    img += rng.normal(0.0, 0.02, size=img.shape)
    return _quantize(img)


def make_image_set(seed: int = 99, train_per_class: int = 400,
                   test_per_class: int = 100, size: int = IMAGE_SIZE) -> ImageSet:
    """Deterministic synthetic dataset; per-image rng derived from
    (seed, split, class, index) so any subset regenerates identically."""
    dataset = ImageSet(class_names=CLASS_NAMES)
    for split_idx, (split_name, per_class) in enumerate(
            (("train", train_per_class), ("test", test_per_class))):
        images, labels, ids = [], [], []
        for class_idx, class_name in enumerate(CLASS_NAMES):
            for i in range(per_class):
                rng = np.random.default_rng((seed, split_idx, class_idx, i))
                images.append(_render_blob(class_idx, rng, size))
                labels.append(class_idx)
                ids.append(f"{split_name}-{class_name}-{i:04d}")
        dataset.splits[split_name] = Split(
            images=np.stack(images), labels=np.asarray(labels, dtype=np.int64), ids=ids)
    return dataset


def shape_image(kind: str, size: int = IMAGE_SIZE) -> np.ndarray:
    """Canonical attention-check image: a light circle or triangle on slate."""
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape {kind!r}")
    lin = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    img = np.full((size, size, 3), 0.18, dtype=np.float64)
    if kind == "circle":
        mask = (xx ** 2 + yy ** 2) <= 0.55 ** 2
    else:
        # upward triangle: inside three half-planes
        mask = (yy <= 0.55) & (yy >= -0.65 + 2.2 * np.abs(xx))
        mask = mask[::-1]  # apex up
    img[mask] = 0.92
    return _quantize(img)


# --------------------------------------------------------------------------
# 8-bit PNG io (conversion contract: /255 on read, round(*255) on write)


def save_png(pixels: np.ndarray, path) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def decode_png_bytes(blob: bytes) -> np.ndarray:
    import io

    with Image.open(io.BytesIO(blob)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image_folder(dataset: ImageSet, root) -> None:
    """Layout: <root>/<split>/<class_name>/<image_id>.png"""
    root = Path(root)
    for split_name, split in dataset.splits.items():
        for i, image_id in enumerate(split.ids):
            class_name = dataset.class_names[split.labels[i]]
            d = root / split_name / class_name
            d.mkdir(parents=True, exist_ok=True)
            save_png(split.images[i], d / f"{image_id}.png")


def load_image_folder(root) -> ImageSet:
    """Ingest <root>/<split>/<class>/*.png with classes sorted by name."""
    root = Path(root)
    split_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not split_names:
        raise ValueError(f"no split directories under {root}")
    class_names = sorted(p.name for p in (root / split_names[0]).iterdir() if p.is_dir())
    if not class_names:
        raise ValueError(f"no class directories under {root / split_names[0]}")
    dataset = ImageSet(class_names=tuple(class_names))
    for split_name in split_names:
        images, labels, ids = [], [], []
        for class_idx, class_name in enumerate(class_names):
            class_dir = root / split_name / class_name
            if not class_dir.is_dir():
                raise ValueError(f"missing class directory {class_dir}")
            for f in sorted(class_dir.glob("*.png")):
                images.append(load_png(f))
                labels.append(class_idx)
                ids.append(f.stem)
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate image ids in split {split_name}")
        dataset.splits[split_name] = Split(
            images=np.stack(images), labels=np.asarray(labels, dtype=np.int64), ids=ids)
    return dataset


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over a (N, H, W, C) stack, for model normalization."""
    mean = images.mean(axis=(0, 1, 2))
    std = images.std(axis=(0, 1, 2))
    return mean.astype(np.float64), np.maximum(std, 1e-4).astype(np.float64)
