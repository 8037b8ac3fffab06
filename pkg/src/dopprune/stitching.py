"""Super Stitching: many concept segments of one class composed on one canvas.

Concepts are visited in ascending TCAV order and later writes overwrite
earlier ones, so the most important concepts end up on top.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .concepts.patches import DiscriminativePatch
from .store import PatchStore

log = logging.getLogger(__name__)

SIGMA_CHOICES = (0.5, 0.75)


class StitchingError(RuntimeError):
    pass


def coverage(image: np.ndarray, mean=None, valid: np.ndarray | None = None) -> float:
    """Fraction of valid pixels.

    With an explicit ``valid`` mask that mask is authoritative. Otherwise a
    pixel is valid when any channel differs from ``mean``.
    """
    if valid is not None:
        return float(np.asarray(valid, dtype=bool).mean())
    image = np.asarray(image, dtype=np.float64)
    diff = np.any(image != np.asarray(mean, dtype=np.float64), axis=-1)
    return float(diff.mean())


@dataclass
class ConceptPool:
    """Segments of one concept, each a patch carrying its validity mask."""

    concept: int
    tcav: float
    patches: list[DiscriminativePatch]


@dataclass
class StitchedPatch:
    image: np.ndarray
    label: int
    contributors: list[tuple[int, int]]
    valid: np.ndarray
    owner: np.ndarray
    sweeps: int = 0
    sigma: float = 0.0

    @property
    def coverage(self) -> float:
        return float(self.valid.mean())

    @property
    def mask(self) -> np.ndarray:
        return self.valid

    def record(self) -> dict:
        return {"class": int(self.label), "concept": "stitched", "segment": None, "tcav": None,
                "coverage": self.coverage, "source_image_id": None, "sigma": self.sigma,
                "contributors": [list(c) for c in self.contributors]}


def super_stitch(concepts: list[ConceptPool], sigma: float, rng, mean,
                 max_sweeps: int = 50) -> StitchedPatch:
    """Stitch segments until at least ``sigma`` of the canvas is covered.

    Each sweep pops one unused segment uniformly at random from every concept,
    lowest TCAV first. A concept whose segments are all used refills from its
    full list. Coverage is checked only between sweeps.
    """
    if not 0.0 <= sigma < 1.0:
        raise ValueError(f"sigma {sigma} outside [0, 1)")
    concepts = [c for c in concepts if c.patches]
    if not concepts:
        raise ValueError("need at least one concept with one segment")
    rng = np.random.default_rng(rng)
    order = sorted(concepts, key=lambda c: (c.tcav, c.concept))
    first = order[0].patches[0]
    h, w = first.mask.shape
    canvas = np.empty_like(first.image)
    canvas[...] = np.asarray(mean, dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    owner = np.full((h, w), -1, dtype=np.int64)
    labels = {p.label for c in order for p in c.patches}
    if len(labels) != 1:
        raise ValueError(f"segments from several classes: {sorted(labels)}")
    waiting: dict[int, list[int]] = {id(c): [] for c in order}
    contributors: list[tuple[int, int]] = []
    sweeps = 0
    while valid.mean() < sigma:
        if sweeps >= max_sweeps:
            raise StitchingError(f"coverage {valid.mean():.3f} still below sigma={sigma} "
                                 f"after {max_sweeps} sweeps")
        for c in order:
            pool = waiting[id(c)]
            if not pool:
                pool.extend(range(len(c.patches)))
            j = pool.pop(int(rng.integers(len(pool))))
            patch = c.patches[j]
            m = patch.mask
            canvas[m] = patch.image[m]
            valid |= m
            owner[m] = len(contributors)
            q = patch.segment if patch.segment is not None else j
            contributors.append((c.concept, int(q)))
        sweeps += 1
    return StitchedPatch(canvas, labels.pop(), contributors, valid, owner, sweeps, sigma)


def concept_pools(store: PatchStore, k: int) -> list[ConceptPool]:
    """Group a DOP store's class-k records by concept."""
    pools: dict[int, ConceptPool] = {}
    for i in store.select(**{"class": k}):
        rec = store.records[i]
        p = rec["concept"]
        patch = DiscriminativePatch(store.images[i], store.masks[i], k, rec.get("source_image_id"),
                                    p, rec.get("segment"), rec.get("tcav"))
        if p not in pools:
            pools[p] = ConceptPool(p, float(rec["tcav"]), [])
        pools[p].patches.append(patch)
    return [pools[p] for p in sorted(pools)]


def build_stitch_set(store: PatchStore, sigma, per_class_count: int, seed, classes=None,
                     max_sweeps: int = 50) -> PatchStore:
    """``per_class_count`` stitched patches for every class in the store.

    ``sigma`` is a float, or ``"mixed"`` to draw it per patch from
    {0.5, 0.75}. Classes requested via ``classes`` but absent from the store
    are skipped with a warning.
    """
    if len(store) == 0:
        raise ValueError("patch store is empty")
    present = store.classes_present
    wanted = present if classes is None else list(classes)
    out = []
    skipped = []
    for k in wanted:
        if k not in present:
            msg = f"class {k} absent from store; skipped"
            log.warning(msg)
            skipped.append(msg)
            continue
        pools = concept_pools(store, k)
        rng = np.random.default_rng([int(seed), int(k)])
        for _ in range(per_class_count):
            s = float(rng.choice(SIGMA_CHOICES)) if sigma == "mixed" else float(sigma)
            out.append(super_stitch(pools, s, rng, store.mean, max_sweeps))
    return PatchStore.from_patches(out, store.mean, kind="stitched",
                                   meta={"sigma": sigma, "warnings": skipped},
                                   image_shape=store.images.shape[1:])
