"""Dice, Jaccard, average surface distance and 95% Hausdorff distance."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .lsf import DEFAULT_K, boundary, inverse_transform, squared_distance_to

CSV_HEADER = "id,dice,jaccard,asd,hd95,degenerate"


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)


def overlap_metrics(pred_mask, gt_mask) -> tuple[float, float]:
    """(dice %, jaccard %); both 100 when both masks are empty."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 100.0, 100.0
    return 200.0 * inter / total, 100.0 * inter / union


def surface(mask) -> np.ndarray:
    """Boundary pixel coordinates, shape (n, 2), same 4-neighbour convention as the level-set transform."""
    return np.argwhere(boundary(np.asarray(mask, dtype=bool)))


def nearest_rank(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return float(ordered[rank - 1])


def surface_distances(pred_mask, gt_mask) -> tuple[float, float, bool]:
    """(asd, hd95, degenerate) over the pooled pred->gt and gt->pred surface distances.

    If exactly one surface is empty both distances are the image diagonal and
    the degenerate flag is set; if both are empty they are 0.
    """
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"surface_distances: shape mismatch {p.shape} vs {g.shape}")
    sp, sg = boundary(p), boundary(g)
    has_p, has_g = sp.any(), sg.any()
    if not has_p and not has_g:
        return 0.0, 0.0, False
    if not has_p or not has_g:
        diag = float(math.hypot(*p.shape))
        return diag, diag, True
    to_gt = np.sqrt(squared_distance_to(sg))[sp]
    to_pred = np.sqrt(squared_distance_to(sp))[sg]
    pooled = np.concatenate([to_gt, to_pred])
    return float(pooled.mean()), nearest_rank(pooled, 0.95), False


@dataclass
class MetricsRow:
    id: int
    dice: float
    jaccard: float
    asd: float
    hd95: float
    degenerate: bool


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def mean(self) -> dict[str, float]:
        return {k: float(self._column(k).mean()) for k in ("dice", "jaccard", "asd", "hd95")}

    def std(self) -> dict[str, float]:
        return {k: float(self._column(k).std()) for k in ("dice", "jaccard", "asd", "hd95")}

    @property
    def degenerate_count(self) -> int:
        return sum(r.degenerate for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(f"{r.id},{r.dice:.6f},{r.jaccard:.6f},{r.asd:.6f},{r.hd95:.6f},{int(r.degenerate)}\n")
        m, s = self.mean(), self.std()
        for tag, agg in (("mean", m), ("std", s)):
            buf.write(f"# {tag},{agg['dice']:.6f},{agg['jaccard']:.6f},{agg['asd']:.6f},{agg['hd95']:.6f},{self.degenerate_count}\n")
        return buf.getvalue()

    def markdown_row(self, label: str) -> str:
        m, s = self.mean(), self.std()
        cells = [f"{m[k]:.2f} ± {s[k]:.2f}" for k in ("dice", "jaccard", "asd", "hd95")]
        return f"| {label} | " + " | ".join(cells) + f" | {self.degenerate_count} |"


def predict_prob(net, images, source: str = "seg", k: float = DEFAULT_K, chunk: int = 8) -> np.ndarray:
    """Foreground probabilities: the seg head, or the transformed level-set head for ``source='lsf'``."""
    images = np.asarray(images, dtype=np.float64)
    outs = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            seg, lsf = net(images[i : i + chunk])
            outs.append(seg.data if source == "seg" else inverse_transform(lsf, k).data)
    return np.concatenate(outs)[:, 0]


def score(pred_mask, gt_mask, sample_id: int = 0) -> MetricsRow:
    dice, jac = overlap_metrics(pred_mask, gt_mask)
    asd, hd95, degenerate = surface_distances(pred_mask, gt_mask)
    return MetricsRow(sample_id, dice, jac, asd, hd95, degenerate)


def evaluate(net, samples, threshold: float = 0.5, source: str = "seg", k: float = DEFAULT_K) -> MetricsReport:
    samples = sorted(samples, key=lambda s: s.id)
    if not samples:
        raise ValueError("evaluate: empty test set")
    for s in samples:
        if s.mask is None:
            raise ValueError(f"evaluate: test sample {s.id} has no mask")
    probs = predict_prob(net, np.stack([s.image for s in samples])[:, None], source, k)
    return MetricsReport([score(binarize(p, threshold), s.mask, s.id) for p, s in zip(probs, samples)])
