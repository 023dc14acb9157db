"""Mask <-> level-set conversions.

``signed_distance`` turns a binary mask into a signed Euclidean distance map
(negative inside, zero on the contour, positive outside). ``inverse_transform``
is the smooth, differentiable map back to a foreground probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

DEFAULT_K = 1500.0

_INF = float("inf")


@dataclass
class LevelSetMap:
    values: np.ndarray
    pos_max: float
    neg_max: float

    def __eq__(self, other):
        if not isinstance(other, LevelSetMap):
            return NotImplemented
        return (
            self.pos_max == other.pos_max
            and self.neg_max == other.neg_max
            and np.array_equal(self.values, other.values)
        )


def _envelope_1d(f: list[float]) -> list[float]:
    """Squared-distance transform of one line (lower envelope of parabolas)."""
    n = len(f)
    finite = [q for q in range(n) if f[q] < _INF]
    if not finite:
        return [_INF] * n
    v = [finite[0]]
    z = [-_INF, _INF]
    for q in finite[1:]:
        fq = f[q] + q * q
        # z[0] is -inf, so the envelope never empties
        while True:
            p = v[-1]
            s = (fq - (f[p] + p * p)) / (2.0 * (q - p))
            if s > z[-2]:
                break
            v.pop()
            z.pop()
        z[-1] = s
        v.append(q)
        z.append(_INF)
    out = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]
    return out


def squared_distance_to(seeds: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from every pixel to the nearest ``True`` seed.

    Separable: one exact 1D pass down the columns, then one along the rows.
    Pixels are at +inf when there are no seeds at all.
    """
    seeds = np.asarray(seeds, dtype=bool)
    h, w = seeds.shape
    grid = np.where(seeds, 0.0, _INF)
    cols = [_envelope_1d(grid[:, j].tolist()) for j in range(w)]
    grid = np.array(cols, dtype=np.float64).T
    rows = [_envelope_1d(grid[i].tolist()) for i in range(h)]
    return np.array(rows, dtype=np.float64).reshape(h, w)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; outside the image counts as background."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    all_fg_nbrs = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~all_fg_nbrs


def _check_binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (values in {0, 1})")
    return m.astype(bool)


def signed_distance(mask, normalize: bool = True) -> LevelSetMap:
    """Signed distance map of a binary mask.

    Boundary pixels get 0, interior foreground pixels minus the distance to the
    nearest boundary-or-background pixel, background pixels plus the distance
    to the nearest foreground pixel. With ``normalize`` each sign is divided by
    its own largest magnitude, so values land in [-1, 1].

    A mask with no foreground or no background has no contour; the result is
    all zeros with both maxima 0.
    """
    m = _check_binary(mask)
    values = np.zeros(m.shape)
    if m.all() or not m.any():
        return LevelSetMap(values, 0.0, 0.0)
    edge = boundary(m)
    interior = m & ~edge
    outside = np.sqrt(squared_distance_to(m))
    inside = np.sqrt(squared_distance_to(~interior))
    values[~m] = outside[~m]
    values[interior] = -inside[interior]
    pos_max = float(values.max())
    neg_max = max(0.0, float(-values.min()))
    if normalize:
        if pos_max > 0:
            values[values > 0] /= pos_max
        if neg_max > 0:
            values[values < 0] /= neg_max
    return LevelSetMap(values, pos_max, neg_max)


def inverse_transform(z: T.Tensor, k: float = DEFAULT_K) -> T.Tensor:
    """Smooth Heaviside ``sigmoid(-k * z)``: inside (z < 0) -> 1, outside -> 0."""
    if k <= 0:
        raise ValueError("sharpness k must be positive")
    return T.sigmoid(T.scale(T.as_tensor(z), -k))


def inverse_gradient(z, k: float = DEFAULT_K) -> np.ndarray:
    """Closed-form derivative of :func:`inverse_transform`: ``-k s (1 - s)`` with ``s = sigmoid(-k z)``."""
    u = -k * np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(u))
    return -k * e / ((1.0 + e) ** 2)

