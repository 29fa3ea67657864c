"""Photometric, depth and depth-gradient losses plus weighted aggregation."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError, TrainingAborted

LOSS_NAMES = ("rgb", "depth", "weight", "density", "grad")
DEFAULT_LAMBDAS = (1.0, 0.1, 0.1, 0.01, 0.1)


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape {a.shape} vs {b.shape}")
    return a, b


def rgb_loss(pred, target):
    """Mean over rays of the squared L2 colour error."""
    pred, target = _pair(pred, target)
    pred = pred.reshape(-1, 3)
    diff = pred - target.reshape(-1, 3)
    n = pred.shape[0]
    return float(np.sum(diff**2) / n), 2.0 * diff / n


def depth_loss(pred_depth, gt_depth):
    pred, gt = _pair(pred_depth, gt_depth)
    diff = pred.reshape(-1) - gt.reshape(-1)
    n = diff.shape[0]
    return float(np.sum(diff**2) / n), 2.0 * diff / n


def depth_diff(d1, d2):
    return abs(float(d1) - float(d2))


def grad_loss(pred_depths, gt_depths):
    """Mean over consecutive pairs of | |dp| - |dg| |; subgradient 0 at ties."""
    pred, gt = _pair(pred_depths, gt_depths)
    pred = pred.reshape(-1)
    gt = gt.reshape(-1)
    n = pred.shape[0]
    if n < 2:
        raise ValueError("grad_loss needs at least two rays")
    dp = pred[1:] - pred[:-1]
    dg = np.abs(gt[1:] - gt[:-1])
    r = np.abs(dp) - dg
    loss = float(np.sum(np.abs(r)) / (n - 1))
    coef = np.sign(r) * np.sign(dp) / (n - 1)
    grad = np.zeros(n)
    grad[1:] += coef
    grad[:-1] -= coef
    return loss, grad


def grad_loss_runs(pred_depths, gt_depths, run_length):
    """``grad_loss`` applied to each run of adjacent pixels, averaged over runs."""
    pred, gt = _pair(pred_depths, gt_depths)
    pred = pred.reshape(-1, run_length)
    gt = gt.reshape(-1, run_length)
    total = 0.0
    grad = np.zeros_like(pred)
    for k in range(pred.shape[0]):
        l, g = grad_loss(pred[k], gt[k])
        total += l
        grad[k] = g
    runs = pred.shape[0]
    return total / runs, (grad / runs).reshape(-1)


@dataclass
class LossBundle:
    rgb: float = 0.0
    depth: float = 0.0
    weight: float = 0.0
    density: float = 0.0
    grad: float = 0.0
    lambdas: tuple = DEFAULT_LAMBDAS
    total: float = 0.0
    gradients: dict = field(default_factory=dict, repr=False)

    def components(self):
        return tuple(getattr(self, k) for k in LOSS_NAMES)

    def as_row(self):
        return dict(zip(LOSS_NAMES, self.components()), total=self.total)


def aggregate(losses, lambdas=DEFAULT_LAMBDAS):
    """Weighted sum of the five terms.  A non-finite term aborts training."""
    if isinstance(losses, dict):
        losses = [losses.get(k, 0.0) for k in LOSS_NAMES]
    losses = [float(x) for x in losses]
    lambdas = tuple(float(x) for x in lambdas)
    if len(losses) != 5 or len(lambdas) != 5:
        raise ShapeMismatchError("expected five losses and five lambdas")
    if any(l < 0 for l in lambdas):
        raise ValueError("mixing coefficients must be nonnegative")
    for name, val in zip(LOSS_NAMES, losses):
        if not np.isfinite(val):
            raise TrainingAborted(f"loss component {name!r} is {val}", component=name)
    total = sum(l * v for l, v in zip(lambdas, losses))
    return LossBundle(*losses, lambdas=lambdas, total=total)
