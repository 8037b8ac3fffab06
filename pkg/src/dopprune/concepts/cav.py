"""Concept activation vectors and TCAV scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOW_ACCURACY = 0.6


@dataclass(frozen=True)
class CAV:
    vector: np.ndarray
    accuracy: float
    concept: int | None = None
    degenerate: bool = False

    @property
    def low_accuracy(self) -> bool:
        return self.degenerate or self.accuracy < LOW_ACCURACY


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def train_cav(concept_acts: np.ndarray, random_acts: np.ndarray, seed=None, steps: int = 500,
              lr: float = 0.1, l2: float = 1e-4, concept: int | None = None) -> CAV:
    """Logistic regression separating concept from random activations.

    Full-batch gradient descent from zero weights, with class-balanced sample
    weights. Features are shifted by the midpoint of the two class means
    and divided by one global RMS scale; the transform is isotropic, so the learned normal is a
    valid direction in the original space. The solver is deterministic and
    ``seed`` is accepted only for interface symmetry with stochastic solvers.
    The returned vector has unit norm and points toward the concept side.
    """
    pos = np.asarray(concept_acts, dtype=np.float64)
    neg = np.asarray(random_acts, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both activation sets must be nonempty")
    x = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    sw = np.concatenate([np.full(len(pos), 0.5 / len(pos)), np.full(len(neg), 0.5 / len(neg))])
    center = 0.5 * (pos.mean(axis=0) + neg.mean(axis=0))
    xc = x - center
    rms = np.sqrt((xc ** 2).sum(axis=1).mean())
    if rms > 0:
        xc = xc / rms
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(steps):
        err = (_sigmoid(xc @ w + b) - y) * sw
        w -= lr * (xc.T @ err + l2 * w)
        b -= lr * err.sum()
    pred = (xc @ w + b) > 0
    acc = float(np.mean(pred == (y > 0.5)))
    norm = np.linalg.norm(w)
    if norm == 0 or not np.isfinite(norm):
        e = np.zeros_like(w)
        e[0] = 1.0
        return CAV(e, acc, concept, degenerate=True)
    return CAV(w / norm, acc, concept)


def directional_derivatives(classifier, k: int, images: np.ndarray, cav: CAV) -> np.ndarray:
    """Gradient of the class-k logit at each image's bottleneck activation, dotted with the CAV."""
    grads = classifier.logit_gradient(images, k)
    return grads @ cav.vector


def tcav_score(classifier, k: int, patches, cav: CAV) -> float:
    """Fraction of patches whose class-k directional derivative along the CAV is positive.

    Zero derivatives count as not positive.
    """
    patches = list(patches)
    if not patches:
        raise ValueError("no patches to score")
    if any(p.label != k for p in patches):
        raise ValueError(f"all patches must be labeled {k}")
    images = np.stack([p.image for p in patches])
    return float(np.mean(directional_derivatives(classifier, k, images, cav) > 0))
