"""Segments and discriminative patches (one segment on a mean-valued canvas)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .slic import slic_segment


@dataclass(frozen=True)
class Segment:
    image_id: int
    label: int
    mask: np.ndarray
    scale: int = 0

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or not mask.any():
            raise ValueError("segment mask must be a nonempty 2-D boolean array")
        object.__setattr__(self, "mask", mask)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(top, left, bottom, right), bottom/right exclusive."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class DiscriminativePatch:
    """A full-size image holding one segment's pixels; everything else is the mean.

    ``mask`` marks the valid (segment) pixels, so coverage never depends on
    comparing colours with the mean.
    """

    image: np.ndarray
    mask: np.ndarray
    label: int
    source_image_id: int | None = None
    concept: int | None = None
    segment: int | None = None
    tcav: float | None = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())

    def record(self) -> dict:
        rec = {"class": int(self.label), "concept": self.concept, "segment": self.segment,
               "tcav": self.tcav, "coverage": self.coverage, "source_image_id": self.source_image_id}
        rec.update(self.extra)
        return rec


def make_patch(image: np.ndarray, segment: Segment, mean, concept: int | None = None,
               index: int | None = None, tcav: float | None = None) -> DiscriminativePatch:
    """Copy the segment's pixels in place onto a canvas filled with ``mean``."""
    image = np.asarray(image, dtype=np.float64)
    mask = segment.mask
    if mask.shape != image.shape[:2]:
        raise ValueError(f"segment mask {mask.shape} does not fit image {image.shape[:2]}")
    if not mask.any():
        raise ValueError("segment mask is empty")
    canvas = np.empty_like(image)
    canvas[...] = np.asarray(mean, dtype=np.float64)
    canvas[mask] = image[mask]
    return DiscriminativePatch(canvas, mask.copy(), segment.label, segment.image_id, concept, index, tcav)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def segments_of(image: np.ndarray, image_id: int, label: int, scales=(15, 50),
                compactness: float = 0.1, min_pixels: int = 10,
                dedup_iou: float = 0.95) -> list[Segment]:
    """SLIC segments of one image at several resolutions.

    Segments smaller than ``min_pixels`` are dropped, as is any segment whose
    IoU with an already kept one exceeds ``dedup_iou``. If every segment is
    too small the largest one is kept so each image yields at least one.
    """
    kept: list[Segment] = []
    fallback = None
    for scale in scales:
        labels = slic_segment(image, scale, compactness)
        for lab in range(labels.max() + 1):
            mask = labels == lab
            area = mask.sum()
            if area == 0:
                continue
            if fallback is None or area > fallback.sum():
                fallback = mask
            if area < min_pixels:
                continue
            if any(iou(mask, s.mask) > dedup_iou for s in kept):
                continue
            kept.append(Segment(image_id, label, mask, scale))
    if not kept and fallback is not None:
        kept.append(Segment(image_id, label, fallback, scales[0]))
    return kept
