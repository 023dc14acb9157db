"""Training objectives: Dice, level-set regression, dual-task consistency, warm-up weight."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .lsf import DEFAULT_K, inverse_transform

DICE_EPS = 1e-5

MODES = ("seg", "lsf", "seg+lsf", "seg+lsf+dtc")


def _same_shape(op: str, a: T.Tensor, b: T.Tensor) -> None:
    if a.shape != b.shape:
        raise T.ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def dice_loss(pred, target) -> T.Tensor:
    """Mean over images of ``1 - 2 sum(p y) / (sum p + sum y + eps)``."""
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    _same_shape("dice_loss", pred, target)
    axes = tuple(range(1, pred.data.ndim))
    inter = T.sum(T.multiply(pred, target), axis=axes)
    denom = T.add(T.add(T.sum(pred, axis=axes), T.sum(target, axis=axes)), DICE_EPS)
    return T.subtract(1.0, T.mean(T.scale(T.divide(inter, denom), 2.0)))


def mse(a, b) -> T.Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    _same_shape("mse", a, b)
    return T.mean(T.square(T.subtract(a, b)))


def lsf_loss(pred_lsf, target_lsf) -> T.Tensor:
    """Per-pixel mean squared error against the signed-distance target."""
    return mse(pred_lsf, target_lsf)


def dtc_loss(seg_prob, lsf_pred, k: float = DEFAULT_K) -> T.Tensor:
    """Mean squared disagreement between the seg head and the transformed level-set head."""
    seg_prob, lsf_pred = T.as_tensor(seg_prob), T.as_tensor(lsf_pred)
    _same_shape("dtc_loss", seg_prob, lsf_pred)
    return mse(seg_prob, inverse_transform(lsf_pred, k))


def ramp_weight(t: float, t_max: float) -> float:
    """Gaussian warm-up ``exp(-5 (1 - t / t_max)^2)``; 1 for ``t >= t_max``."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    if t >= t_max:
        return 1.0
    return math.exp(-5.0 * (1.0 - t / t_max) ** 2)


@dataclass
class LossBreakdown:
    seg: float
    lsf: float
    dtc: float
    lambda_d: float
    total: float


def total_loss(
    seg_prob: T.Tensor,
    lsf_pred: T.Tensor,
    masks,
    lsf_targets,
    n_labeled: int,
    t: int,
    t_max: int,
    k: float = DEFAULT_K,
    mode: str = "seg+lsf+dtc",
) -> tuple[T.Tensor, LossBreakdown]:
    """Combine the objectives for one batch.

    The first ``n_labeled`` images of ``seg_prob``/``lsf_pred`` are the labeled
    sub-batch and line up with ``masks``/``lsf_targets``; the rest are unlabeled.
    Supervised terms see the labeled part, the consistency term the whole batch.
    ``mode`` gates the terms; ``"dtc"`` alone is the unlabeled-only objective.
    Terms a mode does not use are reported as 0.
    """
    if mode not in MODES + ("dtc",):
        raise ValueError(f"unknown mode {mode!r}")
    use_seg = mode in ("seg", "seg+lsf", "seg+lsf+dtc")
    use_lsf = mode in ("lsf", "seg+lsf", "seg+lsf+dtc")
    use_dtc = mode in ("seg+lsf+dtc", "dtc")
    if (use_seg or use_lsf) and n_labeled < 1:
        raise ValueError(f"mode {mode!r} needs a non-empty labeled sub-batch")
    lam = ramp_weight(t, t_max)
    terms: list[T.Tensor] = []
    seg_v = lsf_v = dtc_v = 0.0
    if use_seg:
        l_seg = dice_loss(seg_prob[:n_labeled], masks)
        terms.append(l_seg)
        seg_v = l_seg.item()
    if use_lsf:
        l_lsf = lsf_loss(lsf_pred[:n_labeled], lsf_targets)
        terms.append(l_lsf)
        lsf_v = l_lsf.item()
    if use_dtc:
        l_dtc = dtc_loss(seg_prob, lsf_pred, k)
        terms.append(T.scale(l_dtc, lam))
        dtc_v = l_dtc.item()
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    breakdown = LossBreakdown(seg=seg_v, lsf=lsf_v, dtc=dtc_v, lambda_d=lam, total=total.item())
    return total, breakdown
