"""Dominant-color extraction and naming for ground-truth color anchors.

The reference image's palette comes from modified median-cut quantization;
each palette color is then snapped to the nearest named anchor in CIELAB and
the top names join into a phrase like "red, blue and green colors" whose
embedding serves as the color ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EvalError
from .vocab import COLOR_ANCHORS


@dataclass(frozen=True)
class Palette:
    """Dominant colors, most frequent first."""

    entries: tuple[tuple[tuple[int, int, int], float], ...]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("palette must contain at least one entry")
        total = sum(freq for _, freq in self.entries)
        if total > 1.0 + 1e-9:
            raise ConfigError(f"palette frequencies sum to {total}, above 1")
        freqs = [freq for _, freq in self.entries]
        if freqs != sorted(freqs, reverse=True):
            raise ConfigError("palette entries must be sorted by descending frequency")

    def colors(self) -> list[tuple[int, int, int]]:
        return [rgb for rgb, _ in self.entries]


def _as_pixels(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.size == 0:
        raise EvalError("cannot extract a palette from an empty image")
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] not in (3, 4):
        raise EvalError(f"expected an RGB image, got shape {arr.shape}")
    pixels = arr.reshape(-1, arr.shape[-1])[:, :3].astype(np.int64)
    if pixels.min() < 0 or pixels.max() > 255:
        raise EvalError("pixel values must lie in [0, 255]")
    return pixels


def extract_palette(image, n: int = 5) -> Palette:
    """Median-cut the image's colors into at most ``n`` boxes.

    Boxes split along their widest channel at the frequency-weighted median
    until ``n`` boxes exist or every box holds a single distinct color, so an
    image with k <= n distinct colors comes back exactly.
    """
    if n < 1:
        raise ConfigError("palette size n must be >= 1")
    pixels = _as_pixels(image)
    total = pixels.shape[0]
    colors, counts = np.unique(pixels, axis=0, return_counts=True)

    boxes = [(colors, counts)]
    while len(boxes) < n:
        # Split the most populous box that still has more than one color.
        candidates = [i for i, (c, _) in enumerate(boxes) if c.shape[0] > 1]
        if not candidates:
            break
        idx = max(candidates, key=lambda i: boxes[i][1].sum())
        box_colors, box_counts = boxes.pop(idx)
        ranges = box_colors.max(axis=0) - box_colors.min(axis=0)
        channel = int(np.argmax(ranges))
        order = np.argsort(box_colors[:, channel], kind="stable")
        box_colors = box_colors[order]
        box_counts = box_counts[order]
        cum = np.cumsum(box_counts)
        half = cum[-1] / 2.0
        cut = int(np.searchsorted(cum, half, side="left")) + 1
        cut = min(max(cut, 1), box_colors.shape[0] - 1)
        boxes.append((box_colors[:cut], box_counts[:cut]))
        boxes.append((box_colors[cut:], box_counts[cut:]))

    entries = []
    for box_colors, box_counts in boxes:
        weight = box_counts.sum()
        mean = (box_colors * box_counts[:, None]).sum(axis=0) / weight
        rgb = tuple(int(v) for v in np.rint(mean))
        entries.append((rgb, float(weight) / float(total)))
    entries.sort(key=lambda e: (-e[1], e[0]))
    return Palette(entries=tuple(entries))


def srgb_to_lab(rgb) -> tuple[float, float, float]:
    """sRGB in [0,255] to CIELAB under the D65 white point."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    linear = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    matrix = np.array([
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ])
    xyz = matrix @ linear
    white = np.array([0.95047, 1.0, 1.08883])
    ratio = xyz / white
    eps = 216.0 / 24389.0
    kappa = 24389.0 / 27.0
    f = np.where(ratio > eps, np.cbrt(ratio), (kappa * ratio + 16.0) / 116.0)
    lightness = 116.0 * f[1] - 16.0
    a = 500.0 * (f[0] - f[1])
    b = 200.0 * (f[1] - f[2])
    return (float(lightness), float(a), float(b))


def name_color(rgb, anchors=COLOR_ANCHORS) -> str:
    """Nearest vocabulary name in CIELAB; ties break by vocabulary order."""
    if not anchors:
        raise ConfigError("color vocabulary must be non-empty")
    target = np.array(srgb_to_lab(rgb))
    best_name = None
    best_dist = None
    for name, anchor in anchors:
        dist = float(np.sum((np.array(srgb_to_lab(anchor)) - target) ** 2))
        if best_dist is None or dist < best_dist:
            best_name, best_dist = name, dist
    return best_name


def palette_phrase(palette: Palette, max_colors: int = 3,
                   anchors=COLOR_ANCHORS) -> str:
    """Named top colors joined as "X, Y and Z colors", deduplicated."""
    names = []
    for rgb, _ in palette.entries[:max_colors]:
        name = name_color(rgb, anchors)
        if name not in names:
            names.append(name)
    if len(names) == 1:
        joined = names[0]
    else:
        joined = ", ".join(names[:-1]) + " and " + names[-1]
    return joined + " colors"
