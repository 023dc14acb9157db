"""Oracle self-checks: autodiff against finite differences, the distance transform and
surface metrics against brute force, and the mask -> level set -> mask round trip."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import lsf
from . import metrics as M
from . import tensor as T
from .nn import DualTaskNet, NetConfig
from .oracles import brute_boundary, brute_signed_distance, brute_surface_distances


@dataclass
class Check:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max_err={self.max_error:.3e}  tol={self.tolerance:.0e}"


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    def r(*shape):
        return rng.normal(size=shape)

    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    up_weight = r(1, 2, 4, 4)
    return {
        "add": (lambda a, b: T.sum(T.add(a, b) * a), [r(3, 4), r(1, 4)]),
        "subtract": (lambda a, b: T.sum(T.subtract(a, b) * a), [r(3, 4), r(3, 1)]),
        "multiply": (lambda a, b: T.sum(T.multiply(a, b)), [r(3, 4), r(3, 4)]),
        "divide": (lambda a, b: T.sum(T.divide(a, b)), [r(3, 4), pos]),
        "scale": (lambda a: T.sum(T.scale(a, -2.5) * a), [r(5)]),
        "square": (lambda a: T.sum(T.square(a)), [r(2, 3)]),
        "sum": (lambda a: T.sum(T.square(T.sum(a, axis=1, keepdims=True))), [r(3, 4)]),
        "mean": (lambda a: T.sum(T.square(T.mean(a, axis=0))), [r(3, 4)]),
        "leaky_relu": (lambda a: T.sum(T.leaky_relu(a, 0.1) * a), [r(4, 4)]),
        "sigmoid": (lambda a: T.sum(T.sigmoid(a) * a), [r(4, 4) * 3]),
        "tanh": (lambda a: T.sum(T.tanh(a) * a), [r(4, 4)]),
        "take": (lambda a: T.sum(T.square(a[1:, ::2])), [r(3, 4)]),
        "reshape": (lambda a: T.sum(T.reshape(a, (4, 3)) * np.arange(12.0).reshape(4, 3)), [r(3, 4)]),
        "channel_concat": (
            lambda a, b: T.sum(T.square(T.channel_concat([a, b])) * np.arange(3.0).reshape(1, 3, 1, 1)),
            [r(2, 1, 2, 2), r(2, 2, 2, 2)],
        ),
        "max_pool2d": (lambda a: T.sum(T.max_pool2d(a) * a[:, :, ::2, ::2]), [r(1, 2, 4, 4)]),
        "nearest_upsample2x": (lambda a: T.sum(T.square(T.nearest_upsample2x(a)) * up_weight), [r(1, 2, 2, 2)]),
        "conv2d": (lambda x, w: T.sum(T.square(T.conv2d(x, w))), [r(2, 2, 5, 5), r(3, 2, 3, 3)]),
        "conv2d_stride2": (lambda x, w: T.sum(T.square(T.conv2d(x, w, stride=2, padding=0))), [r(1, 2, 7, 7), r(2, 2, 3, 3)]),
    }


def gradient_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = [Check(f"grad.{name}", T.grad_check(fn, inputs), 1e-4) for name, (fn, inputs) in _primitive_cases(rng).items()]

    images = rng.normal(size=(4, 1, 8, 8))
    masks = np.zeros((2, 1, 8, 8))
    masks[0, 0, 2:6, 1:5] = 1
    masks[1, 0, 3:7, 3:8] = 1
    targets = np.stack([lsf.signed_distance(m[0]).values for m in masks])[:, None]
    net = DualTaskNet.init(NetConfig(base_channels=2, depth=1, seed=seed))
    names = list(net.params)

    def total(*params):
        net.params = dict(zip(names, params))
        seg, out = net(images)
        return L.total_loss(seg, out, masks, targets, 2, 7, 10, k=lsf.DEFAULT_K)[0]

    checks.append(Check("grad.total_loss_8x8", T.grad_check(total, [p.data.copy() for p in net.params.values()]), 1e-4))

    z = rng.uniform(-0.01, 0.01, size=(6, 6))
    leaf = T.Tensor(z, requires_grad=True)
    (auto,) = T.backward(T.sum(lsf.inverse_transform(leaf, lsf.DEFAULT_K)), [leaf])
    exact = lsf.inverse_gradient(z, lsf.DEFAULT_K)
    rel = np.abs(auto - exact) / np.maximum(np.abs(exact), 1e-300)
    checks.append(Check("grad.inverse_derivative", float(rel.max()), 1e-10))
    return checks


def _random_mask(rng: np.random.Generator, max_side: int) -> np.ndarray:
    h, w = rng.integers(1, max_side + 1, size=2)
    return (rng.random((h, w)) < rng.uniform(0.1, 0.9)).astype(np.uint8)


def distance_checks(seed: int = 0, count: int = 100) -> list[Check]:
    rng = np.random.default_rng(seed)
    oracle_err = 0.0
    trip_err = 0.0
    for _ in range(count):
        mask = _random_mask(rng, 16)
        oracle_err = max(oracle_err, float(np.abs(lsf.signed_distance(mask).values - brute_signed_distance(mask)).max()))
        if mask.all() or not mask.any():
            continue
        prob = lsf.inverse_transform(T.Tensor(lsf.signed_distance(mask).values)).data
        edge = brute_boundary(mask)
        wrong = np.count_nonzero((prob > 0.5)[~edge] != mask.astype(bool)[~edge])
        trip_err = max(trip_err, float(wrong), float(np.abs(prob[edge] - 0.5).max(initial=0.0)))
    return [Check("edt.brute_force_oracle", oracle_err, 1e-12), Check("edt.round_trip", trip_err, 0.0)]


def metric_checks(seed: int = 0, count: int = 100) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < count:
        n = int(rng.integers(2, 17))
        p = (rng.random((n, n)) < 0.4).astype(np.uint8)
        g = (rng.random((n, n)) < 0.4).astype(np.uint8)
        if not p.any() or not g.any():
            continue
        asd, hd, _ = M.surface_distances(p, g)
        ref_asd, ref_hd = brute_surface_distances(p, g)
        worst = max(worst, abs(asd - ref_asd), abs(hd - ref_hd))
        done += 1
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[1:3, 0:2] = 1
    b[1:3, 1:3] = 1
    dice, jac = M.overlap_metrics(a, b)
    return [
        Check("metric.surface_oracle", worst, 1e-9),
        Check("metric.overlap_hand_case", max(abs(dice - 50.0), abs(jac - 100 / 3)), 1e-12),
    ]


def run_all(seed: int = 0) -> list[Check]:
    return gradient_checks(seed) + distance_checks(seed) + metric_checks(seed)
