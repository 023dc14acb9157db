"""Slow, obviously-correct reference implementations used by the test suite and ``selftest``.

Nothing here shares code with the fast paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def brute_boundary(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    out = np.zeros_like(m)
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if not (0 <= y < h and 0 <= x < w) or not m[y, x]:
                    out[i, j] = True
                    break
    return out


def _min_dist(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """For each point, the Euclidean distance to the nearest target, by all pairs."""
    if len(points) == 0:
        return np.zeros(0)
    out = np.empty(len(points))
    for start in range(0, len(points), 256):
        chunk = points[start : start + 256, None, :] - targets[None, :, :]
        out[start : start + 256] = np.sqrt((chunk**2).sum(-1).min(axis=1))
    return out


def brute_signed_distance(mask, normalize: bool = True) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    values = np.zeros(m.shape)
    if m.all() or not m.any():
        return values
    edge = brute_boundary(m)
    interior = m & ~edge
    fg = np.argwhere(m).astype(np.float64)
    not_interior = np.argwhere(~interior).astype(np.float64)
    bg_pts = np.argwhere(~m)
    in_pts = np.argwhere(interior)
    values[tuple(bg_pts.T)] = _min_dist(bg_pts.astype(np.float64), fg)
    values[tuple(in_pts.T)] = -_min_dist(in_pts.astype(np.float64), not_interior)
    if normalize:
        pos, neg = values.max(), -values.min()
        if pos > 0:
            values = np.where(values > 0, values / pos, values)
        if neg > 0:
            values = np.where(values < 0, values / neg, values)
    return values


def brute_surface_distances(pred_mask, gt_mask) -> tuple[float, float]:
    """(asd, hd95) from all surface-point pairs; assumes both surfaces are non-empty."""
    sp = np.argwhere(brute_boundary(pred_mask)).astype(np.float64)
    sg = np.argwhere(brute_boundary(gt_mask)).astype(np.float64)
    pooled = sorted(list(_min_dist(sp, sg)) + list(_min_dist(sg, sp)))
    rank = math.ceil(0.95 * len(pooled))
    return sum(pooled) / len(pooled), pooled[max(rank, 1) - 1]
