"""Set-to-set distances between point clouds and the hybrid training loss.

All functions take ``(n, 3)`` point sets, or batches ``(B, n, 3)``. Plain
numpy inputs give plain float (or per-batch array) results; if either
argument is a :class:`~particle_world.autodiff.Tensor` the result is a
Tensor that can be differentiated.

Nearest neighbours come from an exhaustive scan. When several neighbours
are equidistant the lowest index wins, which also fixes the subgradient.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError

DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 50.0
DEFAULT_TAU = 0.02


@dataclass(frozen=True)
class LossConfig:
    """Weighting of the hybrid loss and smooth-Hausdorff temperatures."""

    alpha: float = DEFAULT_ALPHA
    beta_max: float = DEFAULT_BETA
    tau_min: float = DEFAULT_TAU

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta_max > 0 or not self.tau_min > 0:
            raise InvalidInputError(
                f"temperatures must be positive, got beta={self.beta_max}, tau={self.tau_min}"
            )


def validate_points(points, name: str = "points") -> None:
    data = points.data if isinstance(points, Tensor) else np.asarray(points)
    if data.ndim < 2 or data.shape[-1] != 3:
        raise InvalidInputError(f"{name} must have shape (..., n, 3), got {data.shape}")
    if data.shape[-2] < 1:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(data)):
        raise InvalidInputError(f"{name} contains non-finite coordinates")


def _prepare(a, b):
    validate_points(a, "a")
    validate_points(b, "b")
    differentiable = isinstance(a, Tensor) or isinstance(b, Tensor)
    a, b = ad.tensor(a), ad.tensor(b)
    if a.shape[:-2] != b.shape[:-2]:
        raise InvalidInputError(f"batch shapes differ: {a.shape} vs {b.shape}")
    return a, b, differentiable


def _finish(value: Tensor, differentiable: bool):
    if differentiable:
        return value
    return float(value.data) if value.data.ndim == 0 else value.data


def _chamfer(a: Tensor, b: Tensor, squared: bool = False) -> Tensor:
    dist = ad.pairwise_distance(a, b)
    if squared:
        dist = dist * dist
    forward = ad.min_reduce(dist, axis=-1).mean(axis=-1)
    reverse = ad.min_reduce(dist, axis=-2).mean(axis=-1)
    return forward + reverse


def chamfer_distance(a, b, squared: bool = False):
    """Mean nearest-neighbour distance from ``a`` to ``b`` plus from ``b`` to ``a``."""
    a, b, diff = _prepare(a, b)
    with _grad_scope(diff):
        return _finish(_chamfer(a, b, squared), diff)


def hausdorff_distance(a, b):
    """Symmetric Hausdorff distance: the larger of the two directed max-min distances."""
    a, b, diff = _prepare(a, b)
    with _grad_scope(diff):
        dist = ad.pairwise_distance(a, b)
        ab = ad.max_reduce(ad.min_reduce(dist, axis=-1), axis=-1)
        ba = ad.max_reduce(ad.min_reduce(dist, axis=-2), axis=-1)
        out = ad.max_reduce(ad.stack([ab, ba], axis=-1), axis=-1)
        return _finish(out, diff)


def _soft_directed(dist: Tensor, axis: int, beta: float, tau: float) -> Tensor:
    # soft-min over neighbours: Boltzmann-weighted mean distance (>= hard min)
    weights = ad.softmax(dist * (-1.0 / tau), axis=axis)
    inner = (weights * dist).sum(axis=axis)
    # soft-max over points: log-sum-exp (>= hard max)
    return ad.logsumexp(inner * beta, axis=-1) * (1.0 / beta)


def _soft_hausdorff(a: Tensor, b: Tensor, beta: float, tau: float) -> Tensor:
    dist = ad.pairwise_distance(a, b)
    ab = _soft_directed(dist, -1, beta, tau)
    ba = _soft_directed(dist, -2, beta, tau)
    return ad.max_reduce(ad.stack([ab, ba], axis=-1), axis=-1)


def soft_hausdorff(a, b, beta: float = DEFAULT_BETA, tau: float = DEFAULT_TAU):
    """Differentiable upper surrogate of :func:`hausdorff_distance`.

    The inner minimum becomes a temperature-``tau`` Boltzmann-weighted mean of
    neighbour distances, the outer maximum a temperature-``1/beta``
    log-sum-exp. Both sit above their hard counterparts and tighten
    monotonically as ``beta`` grows and ``tau`` shrinks, so the surrogate
    decreases monotonically to the exact distance.
    """
    if not beta > 0 or not tau > 0:
        raise InvalidInputError(f"temperatures must be positive, got beta={beta}, tau={tau}")
    a, b, diff = _prepare(a, b)
    with _grad_scope(diff):
        return _finish(_soft_hausdorff(a, b, beta, tau), diff)


def hybrid_components(pred, gt, cfg: LossConfig = LossConfig()):
    """Return ``(loss, chamfer, soft_hausdorff)`` in one pass over the distance matrix."""
    a, b, diff = _prepare(pred, gt)
    with _grad_scope(diff):
        dist = ad.pairwise_distance(a, b)
        cd = ad.min_reduce(dist, axis=-1).mean(axis=-1) + ad.min_reduce(dist, axis=-2).mean(axis=-1)
        ab = _soft_directed(dist, -1, cfg.beta_max, cfg.tau_min)
        ba = _soft_directed(dist, -2, cfg.beta_max, cfg.tau_min)
        hd = ad.max_reduce(ad.stack([ab, ba], axis=-1), axis=-1)
        if cfg.alpha == 1.0:
            loss = cd
        elif cfg.alpha == 0.0:
            loss = hd
        else:
            loss = cd * cfg.alpha + hd * (1.0 - cfg.alpha)
        return _finish(loss, diff), _finish(cd, diff), _finish(hd, diff)


def hybrid_loss(pred, gt, cfg: LossConfig = LossConfig()):
    """``alpha * chamfer + (1 - alpha) * soft_hausdorff``."""
    return hybrid_components(pred, gt, cfg)[0]


def tracked_mse(pred, gt):
    """Mean squared distance between corresponding points (row order defines pairs)."""
    validate_points(pred, "pred")
    validate_points(gt, "gt")
    differentiable = isinstance(pred, Tensor) or isinstance(gt, Tensor)
    pred, gt = ad.tensor(pred), ad.tensor(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"tracked_mse needs matching shapes, got {pred.shape} and {gt.shape}")
    with _grad_scope(differentiable):
        d = pred - gt
        return _finish((d * d).sum(axis=-1).mean(axis=-1), differentiable)


def chamfer_plus_hausdorff(pred, gt) -> float:
    """The evaluation score: chamfer distance plus exact Hausdorff distance."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    return chamfer_distance(pred, gt) + hausdorff_distance(pred, gt)


def _grad_scope(enabled: bool):
    return contextlib.nullcontext() if enabled else ad.no_grad()
