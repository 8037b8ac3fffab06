"""On-disk patch stores.

A store directory holds ``patches.idx`` (float64 IDX tensor of patch images),
``masks.idx`` (uint8 validity masks), ``manifest.jsonl`` (one record per patch,
in store order) and ``store.json`` (kind, fill mean, count).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import read_idx_raw, write_idx


@dataclass(frozen=True)
class PatchStore:
    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    records: tuple[dict, ...]
    mean: np.ndarray
    kind: str = "dop"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.records)
        if not (len(self.images) == len(self.masks) == len(self.labels) == n):
            raise ValueError("images, masks, labels and records must align")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def classes_present(self) -> list[int]:
        return sorted({int(c) for c in self.labels})

    @classmethod
    def from_patches(cls, patches, mean, kind: str = "dop", meta: dict | None = None,
                     image_shape: tuple | None = None) -> "PatchStore":
        patches = list(patches)
        mean = np.asarray(mean, dtype=np.float64)
        if patches:
            images = np.stack([p.image for p in patches])
            masks = np.stack([p.mask for p in patches]).astype(bool)
        else:
            shape = tuple(image_shape) if image_shape else (0, 0, len(mean))
            images = np.zeros((0, *shape))
            masks = np.zeros((0, *shape[:2]), dtype=bool)
        labels = np.array([p.label for p in patches], dtype=np.int64)
        records = tuple(p.record() for p in patches)
        return cls(images, masks, labels, records, mean, kind, dict(meta or {}))

    def subset(self, idx) -> "PatchStore":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchStore(self.images[idx], self.masks[idx], self.labels[idx],
                          tuple(self.records[i] for i in idx), self.mean, self.kind, dict(self.meta))

    def select(self, **match) -> np.ndarray:
        """Indices of records whose fields equal every ``match`` item."""
        return np.array([i for i, r in enumerate(self.records)
                         if all(r.get(k) == v for k, v in match.items())], dtype=np.int64)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.masks).tobytes())
        h.update(json.dumps(list(self.records), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_idx(d / "patches.idx", self.images.astype(np.float64))
        write_idx(d / "masks.idx", self.masks.astype(np.uint8))
        with open(d / "manifest.jsonl", "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        header = {"kind": self.kind, "mean": self.mean.tolist(), "count": len(self), "meta": self.meta}
        (d / "store.json").write_text(json.dumps(header, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "PatchStore":
        d = Path(directory)
        header = json.loads((d / "store.json").read_text())
        images = read_idx_raw(d / "patches.idx").astype(np.float64)
        masks = read_idx_raw(d / "masks.idx").astype(bool)
        lines = (d / "manifest.jsonl").read_text().splitlines()
        records = tuple(json.loads(line) for line in lines if line.strip())
        labels = np.array([r["class"] for r in records], dtype=np.int64)
        if len(records) != header["count"]:
            raise ValueError(f"{d}: manifest has {len(records)} records, header says {header['count']}")
        return cls(images, masks, labels, records, np.asarray(header["mean"]), header["kind"],
                   header.get("meta", {}))
