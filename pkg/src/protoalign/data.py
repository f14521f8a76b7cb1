"""Folder-per-class image datasets with an explicit split file, and a synthetic shapes generator.

Layout::

    root/
      <class_name>/<image>.png
      split.txt          # one "<class_name>/<image>.png train|test" line per image

Class indices follow the sorted class directory names.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
SHAPES = ("square", "disk", "triangle", "cross")
PART_COLORS = {
    "red": (230, 40, 30),
    "blue": (30, 70, 235),
    "green": (30, 190, 50),
}


class IngestionError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    root: str
    split_file: Optional[str] = None
    image_size: tuple = (64, 64)

    @property
    def split_path(self) -> str:
        return self.split_file or os.path.join(self.root, "split.txt")


@dataclass
class ImageDataset:
    ids: list
    images: torch.Tensor  # (N, C, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (N,) long
    class_names: list

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, n: int) -> "ImageDataset":
        return ImageDataset(self.ids[:n], self.images[:n], self.labels[:n], self.class_names)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.contiguous().numpy().tobytes())
        h.update(self.labels.numpy().astype("<i8").tobytes())
        h.update("\n".join(self.ids).encode())
        return h.hexdigest()


def read_split(path: str) -> dict:
    split = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read split file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise IngestionError(f"{path}:{n}: expected '<image id> train|test', got {line!r}")
        if parts[0] in split:
            raise IngestionError(f"{path}:{n}: image {parts[0]} listed twice")
        split[parts[0]] = parts[1]
    return split


def _decode(path: str, size) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    return arr


def load_dataset(spec: DatasetSpec, split: str = "test") -> ImageDataset:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if not os.path.isdir(spec.root):
        raise IngestionError(f"dataset root {spec.root} does not exist")
    classes = sorted(d for d in os.listdir(spec.root) if os.path.isdir(os.path.join(spec.root, d)))
    index = {c: i for i, c in enumerate(classes)}
    assignment = read_split(spec.split_path)
    ids = sorted(i for i, s in assignment.items() if s == split)
    h, w = spec.image_size
    if not ids:
        log.warning("split %r of %s is empty", split, spec.root)
        return ImageDataset([], torch.zeros(0, 3, h, w), torch.zeros(0, dtype=torch.long), classes)
    arrays, labels = [], []
    for image_id in ids:
        cls = image_id.split("/", 1)[0]
        if cls not in index:
            raise IngestionError(f"image {image_id} is not under a class directory of {spec.root}")
        arrays.append(_decode(os.path.join(spec.root, image_id), (h, w)))
        labels.append(index[cls])
    images = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float() / 255.0
    return ImageDataset(ids, images.contiguous(), torch.tensor(labels, dtype=torch.long), classes)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticDatasetSpec:
    """Colored shapes on varied backgrounds; the class is the (color, shape) of one small part.

    Every image also holds a neutral distractor shape, so neither shape nor color alone
    identifies the class.
    """

    num_classes: int = 8
    train_per_class: int = 120
    test_per_class: int = 40
    image_size: int = 64
    part_size: tuple = (12, 16)
    background_grid: int = 3
    noise_sigma: float = 8.0  # in 0..255 units
    seed: int = 0

    def class_names(self) -> list:
        combos = [(c, s) for c in PART_COLORS for s in SHAPES]
        if not 1 <= self.num_classes <= len(combos):
            raise ValueError(f"num_classes must lie in [1, {len(combos)}]")
        return [f"{i:02d}_{c}-{s}" for i, (c, s) in enumerate(combos[:self.num_classes])]


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, r0: int, c0: int, size: int, fill) -> None:
    r1, c1 = r0 + size - 1, c0 + size - 1
    if shape == "square":
        draw.rectangle([c0, r0, c1, r1], fill=fill)
    elif shape == "disk":
        draw.ellipse([c0, r0, c1, r1], fill=fill)
    elif shape == "triangle":
        draw.polygon([(c0 + (size - 1) / 2, r0), (c0, r1), (c1, r1)], fill=fill)
    else:
        t = max(size // 3, 2)
        mid = (size - t) // 2
        draw.rectangle([c0 + mid, r0, c0 + mid + t - 1, r1], fill=fill)
        draw.rectangle([c0, r0 + mid, c1, r0 + mid + t - 1], fill=fill)


def _render(spec: SyntheticDatasetSpec, color: str, shape: str, rng: np.random.Generator) -> Image.Image:
    n, g = spec.image_size, spec.background_grid
    coarse = (rng.random((g, g, 3)) * 0.5 + 0.25) * 255  # desaturated so parts stand out
    bg = Image.fromarray(coarse.astype(np.uint8), mode="RGB").resize((n, n), Image.BILINEAR)
    arr = np.asarray(bg, dtype=np.float64) + rng.standard_normal((n, n, 3)) * spec.noise_sigma
    im = Image.fromarray(np.clip(np.round(arr), 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(im)
    lo, hi = spec.part_size
    size = int(rng.integers(lo, hi + 1))
    r0, c0 = (int(v) for v in rng.integers(0, n - size + 1, size=2))
    # distractor: neutral shade, random shape, not overlapping the class part
    dsize = int(rng.integers(lo, hi + 1))
    dshape = SHAPES[int(rng.integers(len(SHAPES)))]
    shade = int(rng.choice([20, 235]))
    for _ in range(100):
        dr, dc = (int(v) for v in rng.integers(0, n - dsize + 1, size=2))
        if dr >= r0 + size or r0 >= dr + dsize or dc >= c0 + size or c0 >= dc + dsize:
            _draw_shape(draw, dshape, dr, dc, dsize, (shade,) * 3)
            break
    _draw_shape(draw, shape, r0, c0, size, PART_COLORS[color])
    return im


def generate_synthetic(spec: SyntheticDatasetSpec, root: str) -> DatasetSpec:
    """Write the dataset under ``root`` and return a :class:`DatasetSpec` pointing at it."""
    names = spec.class_names()
    rng = np.random.Generator(np.random.Philox(spec.seed))
    lines = []
    for name in names:
        color, shape = name.split("_", 1)[1].split("-")
        os.makedirs(os.path.join(root, name), exist_ok=True)
        for i in range(spec.train_per_class + spec.test_per_class):
            rel = f"{name}/{i:04d}.png"
            _render(spec, color, shape, rng).save(os.path.join(root, rel), format="PNG")
            lines.append(f"{rel} {'train' if i < spec.train_per_class else 'test'}")
    with open(os.path.join(root, "split.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return DatasetSpec(root=root, image_size=(spec.image_size, spec.image_size))


def tree_digest(root: str) -> str:
    """sha256 over relative paths and contents of every file below ``root``."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            path = os.path.join(dirpath, fn)
            h.update(os.path.relpath(path, root).encode() + b"\0")
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
