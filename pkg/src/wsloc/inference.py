"""Turn localization maps into per-class peaks and confidences; render overlays."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .errors import StateError
from .objective import sigmoid
from .wslnet import WSLNet

INPUT_SCALE = 64.0

OVERLAY_COLORS = np.array([
    (255, 230, 0), (0, 120, 255), (0, 255, 80), (255, 0, 200),
    (0, 255, 255), (255, 120, 0), (255, 255, 255),
], dtype=np.float64)


@dataclass(frozen=True)
class Prediction:
    class_id: int
    confidence: float
    peak: tuple[int, int]  # (x, y) in input pixels
    present: bool


def prepare_images(images, mean_pixel) -> np.ndarray:
    """(n, h, w, 3) pixels -> centered, scaled float32 network input."""
    x = np.asarray(images, dtype=np.float32)
    return (x - np.asarray(mean_pixel, dtype=np.float32)) / np.float32(INPUT_SCALE)


def forward_eval(net: WSLNet, images, mean_pixel, batch_size: int = 50):
    """Eval-mode raw maps (n, C, h', w') and scores (n, C), computed in batches."""
    if not isinstance(net, WSLNet):
        raise StateError("predict needs a loaded network")
    maps, scores = [], []
    for start in range(0, len(images), batch_size):
        m, s = net.forward(prepare_images(images[start:start + batch_size], mean_pixel), "eval")
        maps.append(m)
        scores.append(s)
    return np.concatenate(maps), np.concatenate(scores)


def peak_location(raw_map, height: int, width: int) -> tuple[int, int]:
    """Upsample one raw map to the input size and return its argmax as (x, y)."""
    up = T.bilinear_resize(raw_map, height, width)
    _, (row, col), _, _ = T.spatial_extrema(up)
    return col, row


def predict(net: WSLNet, images, mean_pixel, threshold: float = 0.5, batch_size: int = 50):
    """Per-image, per-class predictions plus the raw low-resolution maps.

    Exactly one peak per class per image; confidence is the sigmoid of the
    pooled score.
    """
    images = np.asarray(images)
    maps, scores = forward_eval(net, images, mean_pixel, batch_size)
    h, w = images.shape[1:3]
    conf = sigmoid(scores)
    preds = []
    for i in range(len(images)):
        row = []
        for c in range(maps.shape[1]):
            peak = peak_location(maps[i, c], h, w)
            row.append(Prediction(c, float(conf[i, c]), peak, bool(conf[i, c] >= threshold)))
        preds.append(row)
    return preds, maps


def write_predictions(path, names, preds, class_names):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["image", "class", "confidence", "x", "y"])
        for name, row in zip(names, preds):
            for p in row:
                wr.writerow([name, class_names[p.class_id], repr(p.confidence), p.peak[0], p.peak[1]])


def blend(image, maps, alpha: float = 0.6):
    """Tint ``image`` with each class's evidence.

    The per-pixel weight is ``alpha * max(0, 2*sigmoid(z) - 1)``, so a map of
    zeros (no evidence either way) leaves the image untouched.
    """
    out = np.asarray(image, dtype=np.float64).copy()
    for c, z in enumerate(maps):
        heat = np.maximum(0.0, 2.0 * sigmoid(z) - 1.0)[..., None] * alpha
        out = out * (1.0 - heat) + OVERLAY_COLORS[c % len(OVERLAY_COLORS)] * heat
    return out


def render_overlay(image, maps, predictions, path, alpha: float = 0.6):
    """Write ``image`` blended with upsampled maps (C, H, W) and peak markers.

    Markers are drawn only for classes predicted present.
    """
    out = blend(image, maps, alpha)
    h, w = out.shape[:2]
    for p in predictions or []:
        if not p.present:
            continue
        x, y = p.peak
        color = OVERLAY_COLORS[p.class_id % len(OVERLAY_COLORS)]
        for d in range(-3, 4):
            for yy, xx in ((y + d, x), (y, x + d)):
                if 0 <= yy < h and 0 <= xx < w:
                    out[yy, xx] = 0.0 if abs(d) == 3 else color
    pixels = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return pixels
