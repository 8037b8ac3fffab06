"""Concept-based extraction of discriminative patches.

For every class: segment its images with SLIC at several scales, put each
segment on a mean canvas, embed the canvases at the classifier's bottleneck,
cluster them with k-means, fit a CAV per cluster against segments from other
classes, score clusters by TCAV and keep the best few.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..store import PatchStore
from .cav import CAV, directional_derivatives, tcav_score, train_cav
from .kmeans import cluster_segments
from .patches import DiscriminativePatch, make_patch, segments_of

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractConfig:
    images_per_class: int = 40
    scales: tuple[int, ...] = (15, 50)
    compactness: float = 0.1
    min_pixels: int = 10
    dedup_iou: float = 0.95
    n_clusters: int = 10
    min_members: int = 5
    max_members: int = 40
    n_random: int = 200
    top_n: int = 5
    cav_steps: int = 500
    cav_lr: float = 0.1
    cav_l2: float = 1e-4
    seed: int = 0


@dataclass
class ConceptCluster:
    cls: int
    concept: int
    members: list[int]
    centroid: np.ndarray
    tcav: float
    cav: CAV
    mean_derivative: float


@dataclass
class ExtractionResult:
    store: PatchStore
    concepts: dict[int, list[ConceptCluster]]
    warnings: list[str] = field(default_factory=list)


@dataclass
class _ClassPool:
    patches: list[DiscriminativePatch]
    activations: np.ndarray


def _class_pool(classifier, dataset, k: int, cfg: ExtractConfig) -> _ClassPool:
    rng = np.random.default_rng([cfg.seed, k, 0])
    idx = rng.permutation(dataset.of_class(k))[:cfg.images_per_class]
    patches = []
    for i in sorted(int(j) for j in idx):
        for seg in segments_of(dataset.images[i], i, k, cfg.scales, cfg.compactness,
                               cfg.min_pixels, cfg.dedup_iou):
            p = make_patch(dataset.images[i], seg, dataset.mean)
            p.extra["scale"] = seg.scale
            patches.append(p)
    acts = classifier.activations(np.stack([p.image for p in patches])) if patches else np.zeros((0, 0))
    return _ClassPool(patches, acts)


def _concepts_for_class(classifier, k: int, pools: dict[int, _ClassPool],
                        cfg: ExtractConfig) -> list[ConceptCluster]:
    pool = pools[k]
    if len(pool.patches) == 0:
        return []
    rng = np.random.default_rng([cfg.seed, k, 1])
    others = [pools[j].activations for j in sorted(pools) if j != k and len(pools[j].patches)]
    if not others:
        return []
    other = np.concatenate(others)
    pick = rng.choice(len(other), size=cfg.n_random, replace=len(other) < cfg.n_random)
    random_acts = other[pick]

    n_clusters = min(cfg.n_clusters, len(pool.patches))
    km = cluster_segments(pool.activations, n_clusters, seed=[cfg.seed, k, 2])
    found = []
    for c in range(n_clusters):
        members = np.flatnonzero(km.labels == c)
        if len(members) < cfg.min_members:
            continue
        dist = ((pool.activations[members] - km.centroids[c]) ** 2).sum(axis=1)
        members = members[np.argsort(dist, kind="stable")][:cfg.max_members]
        cav = train_cav(pool.activations[members], random_acts, seed=[cfg.seed, k, 3, c],
                        steps=cfg.cav_steps, lr=cfg.cav_lr, l2=cfg.cav_l2, concept=c)
        concept_patches = [pool.patches[m] for m in members]
        score = tcav_score(classifier, k, concept_patches, cav)
        images = np.stack([p.image for p in concept_patches])
        mean_dd = float(directional_derivatives(classifier, k, images, cav).mean())
        found.append(ConceptCluster(k, c, [int(m) for m in members], km.centroids[c], score, cav, mean_dd))
    # ties in TCAV are common at small scale; the mean directional derivative breaks them
    found.sort(key=lambda cc: (-cc.tcav, -cc.mean_derivative, cc.concept))
    kept = found[:cfg.top_n]
    for rank, cc in enumerate(kept):
        cc.concept = rank
    return kept


def extract_discriminative_patches(classifier, dataset, config: ExtractConfig | None = None,
                                   classes=None) -> ExtractionResult:
    """Ranked patch store: for each class, the top concepts by TCAV with all their members.

    Records carry (class, concept rank, segment rank within concept, TCAV,
    coverage, source image index). Concept 0 is the most important.
    """
    cfg = config or ExtractConfig()
    classes = list(range(dataset.classes)) if classes is None else list(classes)
    pools = {k: _class_pool(classifier, dataset, k, cfg) for k in range(dataset.classes)}
    result: dict[int, list[ConceptCluster]] = {}
    warnings = []
    out: list[DiscriminativePatch] = []
    for k in classes:
        concepts = _concepts_for_class(classifier, k, pools, cfg)
        if not concepts:
            msg = f"class {k}: no viable concept clusters; class excluded"
            log.warning(msg)
            warnings.append(msg)
            continue
        result[k] = concepts
        for cc in concepts:
            for q, m in enumerate(cc.members):
                src = pools[k].patches[m]
                out.append(DiscriminativePatch(src.image, src.mask, k, src.source_image_id,
                                               cc.concept, q, cc.tcav, dict(src.extra)))
    meta = {"config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()},
            "warnings": warnings}
    store = PatchStore.from_patches(out, dataset.mean, kind="dop", meta=meta,
                                    image_shape=dataset.image_shape)
    return ExtractionResult(store, result, warnings)
