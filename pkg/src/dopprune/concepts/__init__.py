"""Concept extraction: superpixels, activation-space clustering, CAVs and TCAV."""
from .cav import CAV, directional_derivatives, tcav_score, train_cav
from .extract import ConceptCluster, ExtractConfig, ExtractionResult, extract_discriminative_patches
from .kmeans import KMeansResult, cluster_segments
from .patches import DiscriminativePatch, Segment, iou, make_patch, segments_of
from .slic import slic_segment

__all__ = [
    "CAV", "ConceptCluster", "DiscriminativePatch", "ExtractConfig", "ExtractionResult",
    "KMeansResult", "Segment", "cluster_segments", "directional_derivatives",
    "extract_discriminative_patches", "iou", "make_patch", "segments_of", "slic_segment",
    "tcav_score", "train_cav",
]
