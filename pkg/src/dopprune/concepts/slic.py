"""SLIC superpixels on small float images."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def _grid(h: int, w: int, n_segments: int) -> tuple[int, int]:
    """Largest ny x nx center grid with ny * nx <= n_segments and cells no
    more elongated than 2:1; ties go to the squarest cells."""
    best, best_key = (1, 1), None
    for ny in range(1, min(h, n_segments) + 1):
        for nx in range(1, min(w, n_segments // ny) + 1):
            ratio = (h / ny) / (w / nx)
            if max(ratio, 1 / ratio) > 2.0 and (ny, nx) != (1, 1):
                continue
            key = (ny * nx, -abs(np.log(ratio)))
            if best_key is None or key > best_key:
                best, best_key = (ny, nx), key
    return best


def slic_segment(image: np.ndarray, n_segments: int, compactness: float = 0.1,
                 max_iter: int = 10, tol: float = 1e-3) -> np.ndarray:
    """Label map ``(H, W)`` with labels ``0..L-1`` where ``1 <= L <= n_segments``.

    Clustering runs over (color, y * m / S, x * m / S) with S the grid step and
    m the compactness, each center searching a 2S x 2S window. Iteration stops
    when no center moves more than ``tol`` or after ``max_iter`` rounds.
    Disconnected fragments are merged into a neighbouring superpixel, so the
    label count never exceeds the number of grid centers.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in (1, 3) or min(image.shape[:2]) < 1:
        raise ValueError(f"expected an HxWxC image with C in (1, 3), got shape {image.shape}")
    if n_segments < 1:
        raise ValueError("n_segments must be at least 1")
    h, w, c = image.shape
    if n_segments == 1:
        return np.zeros((h, w), dtype=np.int64)

    ny, nx = _grid(h, w, n_segments)
    step = np.sqrt(h * w / (ny * nx))
    scale = compactness / step
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    feats = np.concatenate([image.reshape(-1, c), (yy.reshape(-1, 1)) * scale,
                            (xx.reshape(-1, 1)) * scale], axis=1)
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1)

    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    cpos = np.array([(y, x) for y in cy for x in cx])
    iy = np.clip(cpos[:, 0].astype(int), 0, h - 1)
    ix = np.clip(cpos[:, 1].astype(int), 0, w - 1)
    centers = np.concatenate([image[iy, ix], cpos * scale], axis=1)

    labels = np.zeros(h * w, dtype=np.int64)
    for _ in range(max_iter):
        cpos = centers[:, c:] / scale if scale > 0 else cpos
        d = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        outside = ((np.abs(pos[:, None, 0] - cpos[None, :, 0]) > step)
                   | (np.abs(pos[:, None, 1] - cpos[None, :, 1]) > step))
        windowed = np.where(outside, np.inf, d)
        orphan = np.isinf(windowed).all(axis=1)
        windowed[orphan] = d[orphan]
        labels = windowed.argmin(axis=1)
        new = centers.copy()
        for k in range(len(centers)):
            members = labels == k
            if members.any():
                new[k] = feats[members].mean(axis=0)
        move = np.abs(new - centers).max()
        centers = new
        if move < tol:
            break

    return _enforce_connectivity(labels.reshape(h, w))


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    out = labels.copy()
    for lab in np.unique(labels):
        comp, n = ndimage.label(out == lab)
        if n <= 1:
            continue
        sizes = ndimage.sum(np.ones_like(comp), comp, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        for j in range(1, n + 1):
            if j == keep:
                continue
            frag = comp == j
            ring = ndimage.binary_dilation(frag) & ~frag
            neighbours = out[ring]
            neighbours = neighbours[neighbours != lab]
            if neighbours.size:
                out[frag] = np.bincount(neighbours).argmax()
    _, relabeled = np.unique(out, return_inverse=True)
    return relabeled.reshape(labels.shape)
