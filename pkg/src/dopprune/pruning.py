"""One-shot pruning at initialization: SNIP and GraSP scores, top-k masks,
and masked fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import (
    LabeledBatch,
    ParameterSet,
    default_hvp_eps,
    evaluate,
    finite_difference_hvp,
    gradients,
    loss_and_gradients,
)
from .model_zoo import Mask, NetworkSpec, apply_mask

log = logging.getLogger(__name__)

CRITERIA = ("snip", "grasp")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class ScoreMap:
    """Per-weight importance scores in flat-view order."""

    scores: np.ndarray
    criterion: str

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.scores.size

    def __add__(self, other: "ScoreMap") -> "ScoreMap":
        if other.criterion != self.criterion:
            raise ValueError("cannot add scores from different criteria")
        return ScoreMap(self.scores + other.scores, self.criterion)


@dataclass(frozen=True)
class SparsityTarget:
    """Either a sparsity fraction or a kept count, resolved against ``total``."""

    total: int
    sparsity: float | None = None
    kappa: int | None = None

    def __post_init__(self):
        if (self.sparsity is None) == (self.kappa is None):
            raise ValueError("give exactly one of sparsity or kappa")
        if self.sparsity is not None and not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity {self.sparsity} outside [0, 1)")
        k = self.kept
        if not 1 <= k <= self.total:
            raise ValueError(f"kept count {k} outside [1, {self.total}]")

    @property
    def kept(self) -> int:
        if self.kappa is not None:
            return int(self.kappa)
        return int(round((1.0 - self.sparsity) * self.total))


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


def snip_scores(spec: NetworkSpec, params: ParameterSet, batch: LabeledBatch,
                loss_scale: float = 1.0) -> ScoreMap:
    """Connection sensitivity |dL/dw * w| of the batch-mean loss."""
    g = gradients(spec, params, batch)
    return ScoreMap(np.abs(loss_scale * g.flat_weights() * params.flat_weights()), "snip")


def gradient_flow_scores(theta: np.ndarray, grad_fn: Callable[[np.ndarray], np.ndarray],
                         eps: float | None = None) -> np.ndarray:
    """-theta * (H g) for any differentiable loss given by its gradient function."""
    theta = np.asarray(theta, dtype=np.float64)
    g = grad_fn(theta)
    hg = finite_difference_hvp(grad_fn, theta, g, eps)
    return -theta * hg


def grasp_scores(spec: NetworkSpec, params: ParameterSet, batch: LabeledBatch,
                 temperature: float = 1.0, eps: float | None = None) -> ScoreMap:
    """GraSP score -w * (H g)_w; higher is kept.

    ``temperature`` divides the logits before the loss (1 disables it).
    """
    theta = params.vector()

    def grad_fn(t):
        return gradients(spec, params.from_vector(t), batch, temperature).vector()

    s = gradient_flow_scores(theta, grad_fn, eps if eps is not None else default_hvp_eps(theta))
    return ScoreMap(s[:params.n_weights], "grasp")


def compute_scores(criterion: str, spec: NetworkSpec, params: ParameterSet,
                   batches: LabeledBatch | Iterable[LabeledBatch], temperature: float = 1.0) -> ScoreMap:
    """Scores for one batch, or the sum of per-batch scores over several."""
    if isinstance(batches, LabeledBatch):
        batches = [batches]
    total = None
    for batch in batches:
        if criterion == "snip":
            s = snip_scores(spec, params, batch)
        elif criterion == "grasp":
            s = grasp_scores(spec, params, batch, temperature=temperature)
        else:
            raise ValueError(f"unknown criterion {criterion!r}")
        total = s if total is None else total + s
    if total is None:
        raise ValueError("no scoring batches")
    return total


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def top_kappa_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def top_kappa_mask(scores: ScoreMap, target: SparsityTarget | int,
                   like: ParameterSet | None = None) -> Mask:
    """Keep exactly the kappa highest-scoring weights.

    With ``like`` the mask is split into per-layer tensors; otherwise it is one
    flat tensor. The score of the last kept weight is stored as ``threshold``.
    """
    n = len(scores)
    kappa = target if isinstance(target, (int, np.integer)) else target.kept
    if isinstance(target, SparsityTarget) and target.total != n:
        raise ValueError(f"target counts {target.total} weights, scores have {n}")
    if not 1 <= kappa <= n:
        raise ValueError(f"kappa {kappa} outside [1, {n}]")
    order = top_kappa_order(scores.scores)
    flat = np.zeros(n)
    flat[order[:kappa]] = 1.0
    tensors = Mask.from_flat(flat, like).tensors if like is not None else (flat,)
    return Mask(tensors, threshold=float(scores.scores[order[kappa - 1]]))


def layer_stats(mask: Mask, spec: NetworkSpec) -> dict:
    """Per-layer kept/total counts; a layer with nothing kept is collapsed."""
    layers = []
    for t, idx in zip(mask.tensors, spec.prunable_layers()):
        kept = int(t.sum())
        layers.append({"layer": idx, "kind": spec.layers[idx].kind, "kept": kept,
                       "total": int(t.size), "collapsed": kept == 0})
    return {"layers": layers,
            "collapsed": [row["layer"] for row in layers if row["collapsed"]],
            "kept": mask.kept, "total": mask.total}


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.1
    milestones: tuple[int, ...] = (20, 30)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = True

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)


def _check_masked(params: ParameterSet, mask: Mask, epoch: int) -> None:
    for w, m in zip(params.weights, mask.tensors):
        if np.any(w[m == 0] != 0.0):
            raise AssertionError(f"masked weight became nonzero in epoch {epoch}")


def finetune(spec: NetworkSpec, params: ParameterSet, mask: Mask, images: np.ndarray,
             labels: np.ndarray, schedule: TrainSchedule, seed: int,
             augment_fn: Callable | None = None,
             on_epoch: Callable[[int, ParameterSet], None] | None = None) -> ParameterSet:
    """SGD with momentum on the masked network.

    Gradients of masked weights are zeroed every step and the mask is
    re-applied after each update, so pruned weights stay exactly zero.
    ``images`` are network inputs (already centered).
    """
    from .datasets import augment as default_augment

    augment_fn = augment_fn or default_augment
    rng = np.random.default_rng(seed)
    theta = apply_mask(params, mask)
    masks = mask.tensors
    vel_w = [np.zeros_like(w) for w in theta.weights]
    vel_b = [np.zeros_like(b) for b in theta.biases]
    weights = [w.copy() for w in theta.weights]
    biases = [b.copy() for b in theta.biases]
    n = len(labels)
    step = 0
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            x = images[idx]
            if schedule.augment:
                x = augment_fn(x, rng)
            current = ParameterSet(tuple(weights), tuple(biases))
            loss, g = loss_and_gradients(spec, current, LabeledBatch(x, labels[idx]))
            if not np.isfinite(loss):
                raise TrainingDiverged(step, loss)
            for i, m in enumerate(masks):
                gw = (g.weights[i] + schedule.weight_decay * weights[i]) * m
                vel_w[i] = schedule.momentum * vel_w[i] + gw
                weights[i] = (weights[i] - lr * vel_w[i]) * m
                gb = g.biases[i] + schedule.weight_decay * biases[i]
                vel_b[i] = schedule.momentum * vel_b[i] + gb
                biases[i] = biases[i] - lr * vel_b[i]
            step += 1
        current = ParameterSet(tuple(weights), tuple(biases))
        _check_masked(current, mask, epoch)
        if on_epoch is not None:
            on_epoch(epoch, current)
    return ParameterSet(tuple(w.copy() for w in weights), tuple(b.copy() for b in biases))


def predict(spec: NetworkSpec, params: ParameterSet, images: np.ndarray,
            batch_size: int = 256) -> np.ndarray:
    from .autodiff import forward_graph

    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward_graph(spec, params, images[start:start + batch_size])[-1].value)
    return np.concatenate(out)


def accuracy(spec: NetworkSpec, params: ParameterSet, images: np.ndarray,
             labels: np.ndarray, batch_size: int = 256) -> float:
    logits = predict(spec, params, images, batch_size)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))


def mean_loss(spec: NetworkSpec, params: ParameterSet, batch: LabeledBatch) -> float:
    return evaluate(spec, params, batch)[0]
