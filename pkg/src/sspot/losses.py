"""Reconstruction and anchor-grid detection losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TargetMap
from .model import Heads
from .tensor import Tensor, clamped_log, mean, mul, smooth_l1, square, sub, tsum

LOG_EPS = 1e-12

# Channel layout of the objectness head.
NOOBJ, OBJ = 0, 1


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0
    beta: float = 7.0
    gamma: float = 0.5
    lam: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossBreakdown:
    total: Tensor
    l_rec: Tensor
    l_sup: Tensor
    l_box: Tensor
    l_conf: Tensor
    l_cls: Tensor

    FIELDS = ("total", "l_rec", "l_sup", "l_box", "l_conf", "l_cls")

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in self.FIELDS}


def reconstruction_loss(x: Tensor, x_star: Tensor) -> Tensor:
    """Mean squared difference over every element."""
    if x.shape != x_star.shape:
        raise ValueError(f"reconstruction_loss: shape mismatch {list(x.shape)} vs {list(x_star.shape)}")
    return mean(square(sub(x, x_star)))


def _check_grid(pred: Tensor, target: TargetMap, channels: int, what: str) -> None:
    expected = (channels,) + target.obj.shape
    if tuple(pred.shape) != expected:
        raise ValueError(f"{what}: prediction {list(pred.shape)} does not align with targets {list(expected)}")


def box_loss(pred_params: Tensor, target: TargetMap, weights: LossWeights) -> Tensor:
    _check_grid(pred_params, target, 4, "box_loss")
    per_coord = np.array([weights.alpha, weights.alpha, weights.beta, weights.beta])[:, None, None, None]
    gate = per_coord * target.obj[None]
    return tsum(mul(smooth_l1(sub(pred_params, target.params)), gate))


def confidence_loss(obj_probs: Tensor, target: TargetMap, weights: LossWeights) -> Tensor:
    _check_grid(obj_probs, target, 2, "confidence_loss")
    gate = np.empty(obj_probs.shape)
    gate[OBJ] = target.obj
    gate[NOOBJ] = weights.gamma * target.noobj
    return tsum(mul(clamped_log(obj_probs, LOG_EPS), -gate))


def class_loss(class_probs: Tensor, target: TargetMap) -> Tensor:
    _check_grid(class_probs, target, target.class_onehot.shape[0], "class_loss")
    gate = target.class_onehot * target.obj[None]
    return tsum(mul(clamped_log(class_probs, LOG_EPS), -gate))


def total_loss(
    x: Tensor | None,
    x_star: Tensor | None,
    heads: Heads,
    target: TargetMap,
    weights: LossWeights,
    n_frames: int,
    l_rec: Tensor | None = None,
) -> LossBreakdown:
    """Supervised loss over N time steps plus lambda-weighted reconstruction.

    ``l_rec`` may be passed precomputed (e.g. evaluated without a graph
    when lambda is zero); otherwise it is computed from ``x`` and ``x_star``.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if l_rec is None:
        l_rec = reconstruction_loss(x, x_star)
    lb = box_loss(heads.box_params, target, weights)
    lc = confidence_loss(heads.obj_probs, target, weights)
    lk = class_loss(heads.class_probs, target)
    l_sup = (lb + lc + lk) / n_frames
    total = l_sup + mul(l_rec, weights.lam)
    return LossBreakdown(total, l_rec, l_sup, lb, lc, lk)
