"""Synthetic scenes, the on-disk dataset format, and dataset statistics.

A dataset directory holds::

    images/        8-bit RGB frames (PNG or PPM)
    labels.csv     image,<class names...>   one 0/1 cell per class
    boxes.csv      image,class,x_min,y_min,x_max,y_max,cx,cy   (optional)
    splits.json    {"train": [...], "val": [...], "test": [...]}

Boxes and centers are evaluation-only ground truth. Training code opens the
dataset with ``annotations=False`` and never sees them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, InputError

CLASS_LIBRARY = (
    # name, head shape, head color
    ("grasper", "disk", (235, 205, 40)),
    ("bipolar", "square", (40, 90, 235)),
    ("hook", "triangle", (40, 200, 70)),
    ("scissors", "cross", (230, 60, 210)),
    ("clipper", "diamond", (40, 225, 225)),
    ("irrigator", "ring", (250, 135, 20)),
    ("specimen_bag", "hexagon", (245, 245, 245)),
)
SHAFT_COLOR = (150, 150, 160)
BOX_HEADER = ["image", "class", "x_min", "y_min", "x_max", "y_max", "cx", "cy"]


@dataclass(frozen=True)
class SpatialAnnotation:
    class_id: int
    bbox: tuple[float, float, float, float]
    center: tuple[float, float]

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise FormatError(f"degenerate box {self.bbox}")
        cx, cy = self.center
        if not (x0 <= cx <= x1 and y0 <= cy <= y1):
            raise FormatError(f"center {self.center} lies outside box {self.bbox}")


@dataclass
class DatasetStats:
    counts: np.ndarray
    mean_pixel: np.ndarray
    image_count: int


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 5
    height: int = 96
    width: int = 160
    split_sizes: tuple[tuple[str, int], ...] = (("train", 2000), ("val", 400), ("test", 600))
    presence_probs: tuple[float, ...] = (0.6, 0.6, 0.6, 0.05, 0.07)
    head_radius: tuple[float, float] = (8.0, 11.0)
    shaft_width: float = 4.0
    texture_cells: int = 8

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_LIBRARY):
            raise ConfigError(f"num_classes must be in 1..{len(CLASS_LIBRARY)}")
        if len(self.presence_probs) != self.num_classes:
            raise ConfigError(
                f"{len(self.presence_probs)} presence probabilities for {self.num_classes} classes"
            )
        if not all(0.0 < p < 1.0 for p in self.presence_probs):
            raise ConfigError("presence probabilities must lie strictly between 0 and 1")
        r_max = self.head_radius[1]
        if min(self.height, self.width) < 4 * r_max:
            raise ConfigError(f"image {self.height}x{self.width} too small for heads of radius {r_max}")

    @property
    def class_names(self) -> list[str]:
        return [CLASS_LIBRARY[c][0] for c in range(self.num_classes)]

    def to_dict(self):
        return {"num_classes": self.num_classes, "height": self.height, "width": self.width,
                "split_sizes": [list(s) for s in self.split_sizes],
                "presence_probs": list(self.presence_probs),
                "head_radius": list(self.head_radius), "shaft_width": self.shaft_width,
                "texture_cells": self.texture_cells}


@dataclass
class Glyph:
    class_id: int
    cx: float
    cy: float
    radius: float
    angle: float
    shaft_angle: float


@dataclass
class SynthSummary:
    """Per-split presence tallies kept by the generator while it writes."""

    class_names: list[str]
    counts: dict[str, np.ndarray] = field(default_factory=dict)
    sizes: dict[str, int] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# rendering

def _head_mask(shape_name, u, v, r):
    if shape_name == "disk":
        return u * u + v * v <= r * r
    if shape_name == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if shape_name == "triangle":
        # upward triangle inscribed in the radius-r circle
        return (v <= 0.5 * r) & (v >= math.sqrt(3) * np.abs(u) - r)
    if shape_name == "cross":
        arm = 0.33 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if shape_name == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if shape_name == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape_name == "hexagon":
        au, av = np.abs(u), np.abs(v)
        return (av <= 0.87 * r) & (0.87 * au + 0.5 * av <= 0.87 * r)
    raise ConfigError(f"unknown head shape {shape_name!r}")


def head_mask(glyph: Glyph, h: int, w: int):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - glyph.cx, yy - glyph.cy
    ca, sa = math.cos(glyph.angle), math.sin(glyph.angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return _head_mask(CLASS_LIBRARY[glyph.class_id][1], u, v, glyph.radius)


def shaft_mask(glyph: Glyph, h: int, w: int, width: float):
    """Bar from the head center straight out to the image border."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - glyph.cx, yy - glyph.cy
    ca, sa = math.cos(glyph.shaft_angle), math.sin(glyph.shaft_angle)
    along = ca * dx + sa * dy
    across = -sa * dx + ca * dy
    return (along >= 0) & (np.abs(across) <= width / 2)


def render_background(spec: SynthSpec, rng: np.random.Generator):
    from .tensor import bilinear_resize

    cells = spec.texture_cells
    coarse = rng.normal(0.0, 1.0, size=(3, cells, max(2, round(cells * spec.width / spec.height))))
    smooth = bilinear_resize(coarse, spec.height, spec.width)
    base = np.array([150.0, 70.0, 65.0])[:, None, None]
    spread = np.array([28.0, 18.0, 16.0])[:, None, None]
    img = base + spread * smooth + rng.normal(0.0, 4.0, size=(3, spec.height, spec.width))
    return img.transpose(1, 2, 0)


def render_scene(spec: SynthSpec, background, glyphs: list[Glyph]):
    """Draw all shafts, then all heads, onto a copy of ``background``."""
    img = np.array(background, dtype=np.float64)
    h, w = spec.height, spec.width
    for g in glyphs:
        img[shaft_mask(g, h, w, spec.shaft_width)] = SHAFT_COLOR
    for g in glyphs:
        img[head_mask(g, h, w)] = CLASS_LIBRARY[g.class_id][2]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def sample_scene(spec: SynthSpec, rng: np.random.Generator):
    """Draw presence bits and one glyph per present class with non-overlapping heads."""
    present = rng.random(spec.num_classes) < np.asarray(spec.presence_probs)
    r_lo, r_hi = spec.head_radius
    glyphs: list[Glyph] = []
    for c in np.flatnonzero(present):
        for _ in range(1000):
            r = rng.uniform(r_lo, r_hi)
            cx = rng.uniform(r + 2, spec.width - r - 3)
            cy = rng.uniform(r + 2, spec.height - r - 3)
            angle = rng.uniform(0, 2 * math.pi)
            shaft = rng.uniform(0, 2 * math.pi)
            if all(math.hypot(cx - g.cx, cy - g.cy) > 1.15 * (r + g.radius) + 2 for g in glyphs):
                glyphs.append(Glyph(int(c), cx, cy, r, angle, shaft))
                break
        else:
            raise ConfigError("could not place glyph; image too small for this many classes")
    background = render_background(spec, rng)
    return present.astype(np.uint8), glyphs, background


def glyph_annotation(glyph: Glyph, spec: SynthSpec) -> SpatialAnnotation:
    ys, xs = np.nonzero(head_mask(glyph, spec.height, spec.width))
    return SpatialAnnotation(glyph.class_id, (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())),
                             (round(glyph.cx, 2), round(glyph.cy, 2)))


def scene_rng(seed: int, split_index: int, image_index: int):
    return np.random.default_rng([int(seed), split_index, image_index])


def synth_generate(spec: SynthSpec, seed: int, out_dir) -> SynthSummary:
    """Write a complete dataset directory; identical (spec, seed) give identical bytes."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    names = spec.class_names
    summary = SynthSummary(class_names=names)
    splits: dict[str, list[str]] = {}
    label_rows, box_rows = [], []
    for s_idx, (split, size) in enumerate(spec.split_sizes):
        counts = np.zeros(spec.num_classes, dtype=np.int64)
        splits[split] = []
        for i in range(size):
            present, glyphs, background = sample_scene(spec, scene_rng(seed, s_idx, i))
            name = f"{split}_{i:05d}.png"
            Image.fromarray(render_scene(spec, background, glyphs)).save(out / "images" / name)
            splits[split].append(name)
            counts += present
            label_rows.append([name, *map(int, present)])
            for g in glyphs:
                a = glyph_annotation(g, spec)
                box_rows.append([name, names[g.class_id], *(f"{v:g}" for v in a.bbox),
                                 f"{a.center[0]:.2f}", f"{a.center[1]:.2f}"])
        summary.counts[split] = counts
        summary.sizes[split] = size
    with open(out / "labels.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["image", *names])
        wr.writerows(label_rows)
    with open(out / "boxes.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(BOX_HEADER)
        wr.writerows(box_rows)
    (out / "splits.json").write_text(json.dumps(splits, indent=1) + "\n")
    (out / "synth.json").write_text(json.dumps({"seed": seed, **spec.to_dict()}, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------------------
# loading

class Dataset:
    """Handle on a dataset directory. Images are read on first use and cached per split."""

    def __init__(self, root, class_names, labels, splits, annotations=None):
        self.root = Path(root)
        self.class_names = list(class_names)
        self._labels = labels
        self.splits = splits
        self.annotations = annotations
        self._cache: dict[str, np.ndarray] = {}

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split_names(self, split: str) -> list[str]:
        if split not in self.splits:
            raise InputError(f"unknown split {split!r}; available: {sorted(self.splits)}")
        return list(self.splits[split])

    def labels(self, split: str) -> np.ndarray:
        return np.array([self._labels[n] for n in self.split_names(split)], dtype=np.uint8)

    def load_image(self, name: str) -> np.ndarray:
        with Image.open(self.root / "images" / name) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)

    def images(self, split: str) -> np.ndarray:
        """All images of a split stacked as (n, h, w, 3) uint8 (all frames must share one size)."""
        if split not in self._cache:
            frames = [self.load_image(n) for n in self.split_names(split)]
            if not frames:
                raise InputError(f"split {split!r} is empty")
            if len({f.shape for f in frames}) != 1:
                raise FormatError(f"split {split!r} mixes image sizes")
            self._cache[split] = np.stack(frames)
        return self._cache[split]

    def boxes(self, name: str) -> list[SpatialAnnotation]:
        if self.annotations is None:
            raise InputError("dataset was opened without annotations")
        return self.annotations.get(name, [])


def load_dataset(directory, annotations: bool = True) -> Dataset:
    root = Path(directory)
    labels_path = root / "labels.csv"
    if not labels_path.is_file():
        raise FormatError(f"missing labels file {labels_path}")
    with open(labels_path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or not rows[0] or rows[0][0] != "image" or len(rows[0]) < 2:
        raise FormatError(f"{labels_path}: header must be 'image,<class names...>'")
    class_names = rows[0][1:]
    image_dir = root / "images"
    labels: dict[str, np.ndarray] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise FormatError(f"{labels_path} row {line_no}: expected {len(rows[0])} cells, got {len(row)}")
        name = row[0]
        if not (image_dir / name).is_file():
            raise FormatError(f"{labels_path} row {line_no}: image {name!r} not found in {image_dir}")
        if any(cell not in ("0", "1") for cell in row[1:]):
            raise FormatError(f"{labels_path} row {line_no}: label cells must be 0 or 1")
        labels[name] = np.array([int(c) for c in row[1:]], dtype=np.uint8)

    splits_path = root / "splits.json"
    if splits_path.is_file():
        try:
            splits = json.loads(splits_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{splits_path}: {exc}") from exc
        for split, names in splits.items():
            for n in names:
                if n not in labels:
                    raise FormatError(f"{splits_path}: split {split!r} lists {n!r}, which has no labels row")
    else:
        splits = {"all": list(labels)}

    annots = None
    boxes_path = root / "boxes.csv"
    if annotations and boxes_path.is_file():
        annots = {}
        index = {c: i for i, c in enumerate(class_names)}
        with open(boxes_path, newline="") as f:
            box_rows = list(csv.reader(f))
        if not box_rows or box_rows[0] != BOX_HEADER:
            raise FormatError(f"{boxes_path}: header must be {','.join(BOX_HEADER)}")
        for line_no, row in enumerate(box_rows[1:], start=2):
            if len(row) != len(BOX_HEADER):
                raise FormatError(f"{boxes_path} row {line_no}: expected {len(BOX_HEADER)} cells")
            name, cls = row[0], row[1]
            if name not in labels:
                raise FormatError(f"{boxes_path} row {line_no}: image {name!r} has no labels row")
            if cls not in index:
                raise FormatError(f"{boxes_path} row {line_no}: unknown class {cls!r}")
            try:
                x0, y0, x1, y1, cx, cy = map(float, row[2:])
            except ValueError as exc:
                raise FormatError(f"{boxes_path} row {line_no}: {exc}") from exc
            try:
                ann = SpatialAnnotation(index[cls], (x0, y0, x1, y1), (cx, cy))
            except FormatError as exc:
                raise FormatError(f"{boxes_path} row {line_no}: {exc}") from exc
            annots.setdefault(name, []).append(ann)
    return Dataset(root, class_names, labels, splits, annots)


def compute_stats(dataset: Dataset, split: str) -> DatasetStats:
    """Per-class positive counts and the per-channel mean pixel of one split."""
    names = dataset.split_names(split)
    if not names:
        raise InputError(f"split {split!r} is empty")
    counts = dataset.labels(split).sum(axis=0).astype(np.int64)
    total = np.zeros(3, dtype=np.float64)
    pixels = 0
    for n in names:
        img = dataset.load_image(n)
        total += img.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        pixels += img.shape[0] * img.shape[1]
    return DatasetStats(counts=counts, mean_pixel=total / pixels, image_count=len(names))
