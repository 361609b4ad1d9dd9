"""Loss kernels with closed-form gradients and a finite-difference checker.

All kernels take probabilities (not logits) and return the loss together with
its gradient with respect to the first argument.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

EPS = 1e-7
DICE_SMOOTH = 1e-3


class LossValueGrad(NamedTuple):
    value: float
    grad: np.ndarray


def _same_shape(a, b, what="inputs"):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch between {what}: {a.shape} vs {b.shape}")


def cross_entropy(probs, targets) -> LossValueGrad:
    """Mean negative log-likelihood of integer ``targets`` under rows of ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise ValueError(f"expected probs (N, K) and targets (N,), got {probs.shape}, {targets.shape}")
    n = probs.shape[0]
    rows = np.arange(n)
    picked = probs[rows, targets]
    clamped = np.maximum(picked, EPS)
    value = float(np.mean(-np.log(clamped)))
    grad = np.zeros_like(probs)
    grad[rows, targets] = np.where(picked > EPS, -1.0 / (n * clamped), 0.0)
    return LossValueGrad(value, grad)


def dice_loss(probs, target, smooth: float = DICE_SMOOTH) -> LossValueGrad:
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _same_shape(p, t)
    inter = float(np.sum(p * t))
    denom = float(np.sum(p) + np.sum(t)) + smooth
    num = 2.0 * inter + smooth
    value = 1.0 - num / denom
    grad = -(2.0 * t * denom - num) / denom**2
    return LossValueGrad(value, grad)


@dataclass(frozen=True)
class EflParams:
    """Equalized focal loss factors: class c focuses with ``gamma_b + gamma_v[c]``
    and is weighted by ``(gamma_b + gamma_v[c]) / gamma_b``."""

    gamma_b: float = 2.0
    gamma_v: Sequence[float] = (0.0,)

    def __post_init__(self):
        gv = np.asarray(self.gamma_v, dtype=np.float64)
        if self.gamma_b < 0 or (gv < 0).any() or not np.isfinite(gv).all() or not np.isfinite(self.gamma_b):
            raise ValueError("focusing factors must be finite and non-negative")
        if self.gamma_b == 0 and (gv > 0).any():
            raise ValueError("gamma_b must be positive when any gamma_v is positive")
        object.__setattr__(self, "gamma_v", tuple(float(g) for g in gv))

    @property
    def gammas(self) -> np.ndarray:
        return self.gamma_b + np.asarray(self.gamma_v)

    @property
    def weights(self) -> np.ndarray:
        if self.gamma_b == 0:
            return np.ones(len(self.gamma_v))
        return self.gammas / self.gamma_b


def _focal_terms(p, targets, gamma, weight):
    """Elementwise ``-w (1 - p_t)^g log p_t`` and its derivative in ``p``."""
    p = np.clip(p, EPS, 1 - EPS)
    pos = targets > 0.5
    pt = np.where(pos, p, 1.0 - p)
    q = 1.0 - pt
    log_pt = np.log(pt)
    mod = q**gamma
    loss = -weight * mod * log_pt
    # d/dpt of -(q^g) log pt = g q^(g-1) log pt - q^g / pt
    dq = np.where(gamma > 0, gamma * q ** np.maximum(gamma - 1.0, 0.0), 0.0)
    d_pt = weight * (dq * log_pt - mod / pt)
    return loss, np.where(pos, d_pt, -d_pt)


def efl(probs, targets, params: EflParams) -> LossValueGrad:
    """Equalized focal loss over (N, C) per-class probabilities and binary targets.

    The per-class factors are supplied constants; the gradient-driven update
    of ``gamma_v`` used during training is left to the caller.
    """
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    _same_shape(p, t)
    if p.ndim != 2 or p.shape[1] != len(params.gamma_v):
        raise ValueError(f"probs must be (N, {len(params.gamma_v)}) to match gamma_v")
    gamma = np.ascontiguousarray(np.broadcast_to(params.gammas, p.shape))
    loss, grad = _focal_terms(p, t, gamma, params.weights[None, :])
    return LossValueGrad(float(loss.mean()), grad / p.size)


def focal_loss(probs, targets, gamma: float) -> LossValueGrad:
    """Binary focal loss with a single focusing factor."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    _same_shape(p, t)
    # a full-shape exponent keeps the power on the same code path as efl,
    # so the two agree bit for bit when the variable factors are zero
    loss, grad = _focal_terms(p, t, np.full(p.shape, float(gamma)), 1.0)
    return LossValueGrad(float(loss.mean()), grad / p.size)


def binary_cross_entropy(probs, targets) -> LossValueGrad:
    return focal_loss(probs, targets, 0.0)


def ciou_loss(pred, gt, alpha: Optional[float] = None) -> LossValueGrad:
    """Complete-IoU loss between two ``(cx, cy, w, h)`` boxes; gradient w.r.t. ``pred``.

    The aspect-ratio trade-off ``alpha`` is held constant when differentiating.
    Passing ``alpha`` pins it, which makes the value consistent with the
    returned gradient under finite differences.
    """
    cx, cy, w, h = (float(v) for v in pred)
    gcx, gcy, gw, gh = (float(v) for v in gt)
    if min(w, h, gw, gh) <= 0:
        raise ValueError("box widths and heights must be positive")

    x1, x2, y1, y2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    X1, X2, Y1, Y2 = gcx - gw / 2, gcx + gw / 2, gcy - gh / 2, gcy + gh / 2

    iw = min(x2, X2) - max(x1, X1)
    ih = min(y2, Y2) - max(y1, Y1)
    overlapping = iw > 0 and ih > 0
    inter = iw * ih if overlapping else 0.0
    union = w * h + gw * gh - inter
    iou = inter / union

    cw = max(x2, X2) - min(x1, X1)
    ch = max(y2, Y2) - min(y1, Y1)
    c2 = cw**2 + ch**2
    rho2 = (cx - gcx) ** 2 + (cy - gcy) ** 2

    k = 4.0 / np.pi**2
    dtheta = np.arctan(gw / gh) - np.arctan(w / h)
    v = k * dtheta**2
    if alpha is None:
        alpha = v / ((1.0 - iou) + v) if v > 0 else 0.0

    value = 1.0 - iou + rho2 / c2 + alpha * v

    # partials w.r.t. the pred box edges (x1, x2, y1, y2)
    if overlapping:
        d_iw = np.array([-(x1 > X1), float(x2 < X2), 0.0, 0.0], dtype=float)
        d_ih = np.array([0.0, 0.0, -(y1 > Y1), float(y2 < Y2)], dtype=float)
        d_inter = d_iw * ih + d_ih * iw
    else:
        d_inter = np.zeros(4)
    d_cw = np.array([-(x1 < X1), float(x2 > X2), 0.0, 0.0], dtype=float)
    d_ch = np.array([0.0, 0.0, -(y1 < Y1), float(y2 > Y2)], dtype=float)
    d_c2 = 2 * cw * d_cw + 2 * ch * d_ch

    # edges -> (cx, cy, w, h)
    J = np.array(
        [
            [1.0, 0.0, -0.5, 0.0],  # x1
            [1.0, 0.0, 0.5, 0.0],  # x2
            [0.0, 1.0, 0.0, -0.5],  # y1
            [0.0, 1.0, 0.0, 0.5],  # y2
        ]
    )
    g_inter = d_inter @ J
    g_c2 = d_c2 @ J
    g_area = np.array([0.0, 0.0, h, w])
    g_iou = g_inter * (1.0 / union + inter / union**2) - (inter / union**2) * g_area
    g_rho2 = np.array([2 * (cx - gcx), 2 * (cy - gcy), 0.0, 0.0])
    g_dist = g_rho2 / c2 - rho2 * g_c2 / c2**2
    r2 = w**2 + h**2
    g_v = k * 2 * dtheta * -np.array([0.0, 0.0, h / r2, -w / r2])
    grad = -g_iou + g_dist + alpha * g_v
    return LossValueGrad(float(value), grad)


def box_iou(a, b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes."""
    ax1, ax2, ay1, ay2 = a[0] - a[2] / 2, a[0] + a[2] / 2, a[1] - a[3] / 2, a[1] + a[3] / 2
    bx1, bx2, by1, by2 = b[0] - b[2] / 2, b[0] + b[2] / 2, b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def ciou_alpha(pred, gt) -> float:
    """The aspect-ratio trade-off weight of the CIoU loss at ``pred``."""
    v = 4.0 / np.pi**2 * (np.arctan(gt[2] / gt[3]) - np.arctan(pred[2] / pred[3])) ** 2
    return float(v / ((1.0 - box_iou(pred, gt)) + v)) if v > 0 else 0.0


def grad_check(
    fn: Callable[[np.ndarray], LossValueGrad],
    point,
    step: float = 1e-5,
    lower: Optional[float] = None,
    upper: Optional[float] = None,
) -> float:
    """Max per-coordinate relative error between the analytic and central-difference gradients.

    ``lower``/``upper`` are the domain bounds of ``fn``; the point must stay
    ``10 * step`` inside them.
    """
    x = np.array(point, dtype=np.float64)
    margin = 10 * step
    if lower is not None and (x - lower < margin).any():
        raise ValueError(f"point within {margin:g} of the lower bound {lower}")
    if upper is not None and (upper - x < margin).any():
        raise ValueError(f"point within {margin:g} of the upper bound {upper}")
    analytic = np.asarray(fn(x).grad, dtype=np.float64).reshape(x.shape)
    numeric = np.zeros_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x).value
        flat[i] = orig - step
        f_minus = fn(x).value
        flat[i] = orig
        nflat[i] = (f_plus - f_minus) / (2 * step)
    rel = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0


def sample_box_pair(rng: np.random.Generator, margin: float, min_grad: float = 1e-6):
    """A random (pred, gt) pair in (cx, cy, w, h) suitable for gradient checks.

    Rejects pairs with any two parallel edges closer than ``100 * margin``
    (the loss is not differentiable there) and pairs where some gradient
    component is below ``min_grad``, where a relative error only measures
    floating-point noise.
    """
    while True:
        pred = np.concatenate([rng.uniform(0, 20, 2), rng.uniform(1, 20, 2)])
        gt = np.concatenate([rng.uniform(0, 20, 2), rng.uniform(1, 20, 2)])
        xs = [pred[0] - pred[2] / 2, pred[0] + pred[2] / 2, gt[0] - gt[2] / 2, gt[0] + gt[2] / 2]
        ys = [pred[1] - pred[3] / 2, pred[1] + pred[3] / 2, gt[1] - gt[3] / 2, gt[1] + gt[3] / 2]
        gaps = [abs(a - b) for e in (xs, ys) for i, a in enumerate(e) for b in e[i + 1 :]]
        if min(gaps) <= 100 * margin:
            continue
        if np.abs(ciou_loss(pred, gt).grad).min() < min_grad:
            continue
        return pred, gt
