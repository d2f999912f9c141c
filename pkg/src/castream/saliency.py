"""Saliency map container plus normalization and bilinear upsampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ShapeError


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    span = hi - lo
    if not span > 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(v)
    return (v - lo) / span


def minmax_normalize_batch(values: np.ndarray) -> np.ndarray:
    """Per-map min-max over the trailing two axes of an (N, h, w) stack."""
    return np.stack([minmax_normalize(m) for m in values]) if len(values) else values


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False: source coordinate (o + 0.5) * n_in / n_out - 0.5, clamped at 0
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    R = np.zeros((n_out, n_in))
    R[np.arange(n_out), i0] += 1.0 - lam
    R[np.arange(n_out), i1] += lam
    return R


def upsample_bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an (h, w) map, or an (N, h, w) stack, to (height, width)."""
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape[-2:]
    if h == 0 or w == 0:
        raise ShapeError("cannot upsample an empty map")
    if height < h or width < w:
        raise ShapeError(f"target {height}x{width} is smaller than source {h}x{w}")
    Rh, Rw = _interp_matrix(h, height), _interp_matrix(w, width)
    return Rh @ v @ Rw.T


@dataclass
class SaliencyMap:
    """Spatial attribution at one stage.

    ``values`` are post-activation (non-negative). ``class_index`` is None for
    class-agnostic maps such as raw attention.
    """

    stage: int
    values: np.ndarray
    class_index: Optional[int] = None
    method: str = ""
    normalization: str = "none"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def normalized(self) -> "SaliencyMap":
        if self.normalization == "minmax":
            return self
        return replace(self, values=minmax_normalize(self.values), normalization="minmax")

    def upsampled(self, height: int, width: int) -> np.ndarray:
        return upsample_bilinear(self.values, height, width)
