"""Attribute word lists and color anchors used for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

# Styles sampled during inversion (training pool).
STYLES_TRAIN = (
    "oil painting", "vector art", "pop art style", "3D rendering",
    "impressionism picture", "graffiti", "fuzzy", "shiny", "bright",
    "fluffy", "sparkly", "dull", "smooth", "rough", "jagged", "striped",
    "painting", "retro", "vintage", "modern", "bohemian", "industrial",
    "rustic", "classic", "contemporary", "futuristic",
)

# Sweep lists for quantitative evaluation.
STYLES_EVAL = (
    "watercolor", "oil painting", "vector art", "pop art style",
    "3D rendering", "impressionism picture", "graffiti",
)

OBJECTS = (
    "chair", "dog", "book", "elephant", "guitar", "pillow", "rabbit",
    "umbrella", "yacht", "house", "cube", "sphere", "car",
)

COLORS = (
    "black", "blue", "brown", "gray", "green", "orange", "pink",
    "purple", "red", "white", "yellow",
)

# Standard web-color RGB anchors for the 11 color names, in vocabulary order.
# Ties in nearest-anchor lookups break by this order.
COLOR_ANCHORS: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("black", (0, 0, 0)),
    ("blue", (0, 0, 255)),
    ("brown", (165, 42, 42)),
    ("gray", (128, 128, 128)),
    ("green", (0, 128, 0)),
    ("orange", (255, 165, 0)),
    ("pink", (255, 192, 203)),
    ("purple", (128, 0, 128)),
    ("red", (255, 0, 0)),
    ("white", (255, 255, 255)),
    ("yellow", (255, 255, 0)),
)


@dataclass(frozen=True)
class AttributeLists:
    """Word lists for the four attributes, as used by the eval protocols."""

    objects: tuple[str, ...] = OBJECTS
    colors: tuple[str, ...] = COLORS
    styles_eval: tuple[str, ...] = STYLES_EVAL
    styles_train: tuple[str, ...] = STYLES_TRAIN

    def __post_init__(self):
        for name in ("objects", "colors", "styles_eval", "styles_train"):
            entries = getattr(self, name)
            if not entries:
                raise ValueError(f"{name} list is empty")
            if len(set(entries)) != len(entries):
                raise ValueError(f"{name} list has duplicate entries")


DEFAULT_ATTRIBUTES = AttributeLists()
