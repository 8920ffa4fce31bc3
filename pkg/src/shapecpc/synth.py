"""Synthetic shapes corpus where shape, not texture, carries the label."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import PATTERNS, TextureTransform, load_image, luminance, pattern_field, write_imgf
from .seeding import stream

CLASSES = ("circle", "triangle", "square", "cross")


@dataclass(frozen=True)
class SyntheticShapesSpec:
    classes: tuple = CLASSES
    images_per_class: int = 10
    image_side: int = 64
    texture_randomization: bool = True
    seed: int = 0

    def __post_init__(self):
        unknown = [c for c in self.classes if c not in CLASSES]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}; expected a subset of {CLASSES}")
        if self.images_per_class < 1 or self.image_side < 8:
            raise ValueError("images_per_class must be >= 1 and image_side >= 8")


def shape_mask(kind: str, side: int, cy: float, cx: float, radius: float) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dy, dx = y - cy, x - cx
    if kind == "circle":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        half = radius * 0.85
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if kind == "cross":
        arm = radius * 0.35
        return ((np.abs(dy) <= radius) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= radius) & (np.abs(dy) <= arm))
    if kind == "triangle":
        # upright isosceles: apex at top, base at bottom
        top, bottom = cy - radius, cy + radius
        frac = (y - top) / (bottom - top)
        return (y >= top) & (y <= bottom) & (np.abs(dx) <= frac * radius)
    raise ValueError(f"unknown shape {kind!r}")


def _random_fill(rng: np.random.Generator, side: int, textured: bool) -> np.ndarray:
    low = rng.uniform(0.0, 0.5, size=3)
    high = rng.uniform(0.5, 1.0, size=3)
    if rng.random() < 0.5:
        low, high = high, low
    if not textured:
        return np.broadcast_to((low + high) / 2, (side, side, 3)).copy()
    t = TextureTransform(
        1,
        PATTERNS[rng.integers(len(PATTERNS))],
        period=int(rng.integers(4, 13)),
        radius=float(rng.uniform(1.0, 3.0)),
        seed=int(rng.integers(2**31)),
        phase=(int(rng.integers(0, 12)), int(rng.integers(0, 12))),
        low=tuple(low),
        high=tuple(high),
    )
    field_ = pattern_field(t, side, side)[..., None]
    return low + (high - low) * field_


def render(kind: str, rng: np.random.Generator, side: int, textured: bool) -> np.ndarray:
    radius = rng.uniform(0.22, 0.34) * side
    margin = radius + 1
    cy, cx = rng.uniform(margin, side - margin, size=2)
    mask = shape_mask(kind, side, cy, cx, radius)[..., None]
    while True:
        fg = _random_fill(rng, side, textured)
        bg = _random_fill(rng, side, textured)
        # keep the silhouette visible: foreground and background means must differ
        if abs(luminance(fg).mean() - luminance(bg).mean()) >= 0.25:
            break
    return np.clip(np.where(mask, fg, bg), 0.0, 1.0).astype(np.float32)


def generate(spec: SyntheticShapesSpec) -> tuple[list[np.ndarray], list[int]]:
    """Images in class-major order with integer labels indexing ``spec.classes``."""
    rng = stream(spec.seed, "data")
    images, labels = [], []
    for label, kind in enumerate(spec.classes):
        for _ in range(spec.images_per_class):
            images.append(render(kind, rng, spec.image_side, spec.texture_randomization))
            labels.append(label)
    return images, labels


def histogram_features(images, bins: int = 32) -> np.ndarray:
    feats = [np.histogram(luminance(img), bins=bins, range=(0.0, 1.0))[0] for img in images]
    feats = np.asarray(feats, dtype=np.float64)
    return feats / feats.sum(axis=1, keepdims=True)


def texture_baseline_accuracy(images, labels, bins: int = 32) -> float:
    """Nearest-centroid accuracy on luminance histograms, even/odd split."""
    feats = histogram_features(images, bins)
    labels = np.asarray(labels)
    train = np.arange(len(labels)) % 2 == 0
    classes = np.unique(labels[train])
    centroids = np.stack([feats[train & (labels == c)].mean(axis=0) for c in classes])
    dists = ((feats[~train, None, :] - centroids[None]) ** 2).sum(-1)
    pred = classes[dists.argmin(axis=1)]
    return float((pred == labels[~train]).mean())


def write_corpus(spec: SyntheticShapesSpec, out_dir) -> dict:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, labels = generate(spec)
    rows = []
    counters = {kind: 0 for kind in spec.classes}
    for img, label in zip(images, labels):
        kind = spec.classes[label]
        rel = f"images/{kind}_{counters[kind]:04d}.imgf"
        counters[kind] += 1
        write_imgf(out / rel, img)
        rows.append((rel, kind))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(rows)
    return {
        "images": len(images),
        "classes": list(spec.classes),
        "texture_baseline_accuracy": texture_baseline_accuracy(images, labels),
    }


def read_manifest(path) -> tuple[list[np.ndarray], list[str]]:
    """Load ``path,label`` rows; paths are relative to the manifest's folder."""
    path = Path(path)
    root = path.parent
    images, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(load_image(root / row["path"]))
            labels.append(row["label"])
    return images, labels
