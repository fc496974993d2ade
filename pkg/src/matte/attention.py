"""Cross-attention map stacks captured during sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrayio import load_arrays, save_arrays
from .errors import EvalError


def resize_mass_preserving(arr: np.ndarray, size: int) -> np.ndarray:
    """Resample a square map to ``size`` while preserving its total mass.

    Upsampling splits each cell into equal fractions; downsampling sums
    blocks. Only integer resolution ratios are supported, which covers the
    power-of-two attention resolutions used here.
    """
    r = arr.shape[0]
    if arr.shape != (r, r):
        raise ValueError(f"expected square map, got {arr.shape}")
    if size == r:
        return arr.copy()
    if size > r:
        if size % r:
            raise ValueError(f"cannot upsample {r} -> {size} exactly")
        k = size // r
        return np.kron(arr, np.ones((k, k), dtype=arr.dtype)) / (k * k)
    if r % size:
        raise ValueError(f"cannot downsample {r} -> {size} exactly")
    k = r // size
    return arr.reshape(size, k, size, k).sum(axis=(1, 3))


@dataclass
class AttentionMapStack:
    """Per-(layer, timestep, token) 2-D cross-attention maps.

    Values are non-negative attention weights at the layer's native
    resolution, stored in float32. ``normalized`` records whether maps were
    rescaled to [0, 1] per map.
    """

    maps: dict[tuple[int, int, str], np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    normalized: bool = False

    def add(self, layer: int, t: int, token: str, map2d: np.ndarray) -> None:
        arr = np.asarray(map2d, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"attention map must be 2-D, got {arr.shape}")
        if (arr < 0).any():
            raise ValueError("attention map has negative values")
        if "|" in token:
            raise ValueError("token may not contain '|'")
        self.maps[(int(layer), int(t), token)] = arr

    def map_for(self, layer: int, t: int, token: str) -> np.ndarray:
        key = (int(layer), int(t), token)
        if key not in self.maps:
            raise EvalError(f"no attention map for layer={layer} t={t} token={token!r}")
        return self.maps[key]

    def tokens(self) -> tuple[str, ...]:
        return tuple(sorted({token for _, _, token in self.maps}))

    def layers(self) -> tuple[int, ...]:
        return tuple(sorted({layer for layer, _, _ in self.maps}))

    def timesteps(self) -> tuple[int, ...]:
        return tuple(sorted({t for _, t, _ in self.maps}))

    def entries(self, token: str | None = None):
        for (layer, t, tok), arr in sorted(self.maps.items()):
            if token is None or tok == token:
                yield (layer, t, tok), arr

    def normalize(self) -> "AttentionMapStack":
        """Copy with each map rescaled to peak 1 (zero maps stay zero)."""
        out = AttentionMapStack(metadata=dict(self.metadata), normalized=True)
        for key, arr in self.maps.items():
            peak = float(arr.max())
            out.maps[key] = arr / peak if peak > 0 else arr.copy()
        return out

    def save(self, path: str | Path) -> None:
        arrays = {
            f"L{layer:02d}|{t:04d}|{token}": arr
            for (layer, t, token), arr in self.maps.items()
        }
        meta = dict(self.metadata)
        meta["normalized"] = self.normalized
        save_arrays(path, arrays, metadata=meta)

    @classmethod
    def load(cls, path: str | Path) -> "AttentionMapStack":
        arrays, meta = load_arrays(path)
        normalized = bool(meta.pop("normalized", False))
        stack = cls(metadata=meta, normalized=normalized)
        for key, arr in arrays.items():
            layer_s, t_s, token = key.split("|", 2)
            stack.maps[(int(layer_s[1:]), int(t_s), token)] = arr
        return stack

    def concat(self, other: "AttentionMapStack") -> "AttentionMapStack":
        """Union of two stacks with disjoint (layer, t, token) keys."""
        overlap = self.maps.keys() & other.maps.keys()
        if overlap:
            raise ValueError(f"stacks overlap at {sorted(overlap)[0]}")
        out = AttentionMapStack(metadata=dict(self.metadata),
                                normalized=self.normalized)
        out.maps.update(self.maps)
        out.maps.update(other.maps)
        return out
