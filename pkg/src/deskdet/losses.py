"""Focal, smooth-L1 and scale-aware margin losses.

Two flavours are provided: plain float functions evaluated in 64-bit (used
as references and in reports), and fused tensor ops that sum a masked
per-element loss and carry a hand-derived backward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, make_op

GAMMA = 2.0
BALANCE = 0.25


@dataclass
class LossReport:
    str_loss: float = 0.0
    stc_loss: float = 0.0
    fsm_loss: float = 0.0
    positives: dict[str, int] = field(default_factory=lambda: {"s1": 0, "s2": 0, "s3": 0, "s4": 0})

    @property
    def total(self) -> float:
        return self.str_loss + self.stc_loss + self.fsm_loss


def _softplus(z):
    return np.logaddexp(0.0, z)


def _focal_terms(logit, label, gamma, balance):
    """Per-element focal loss and d(loss)/d(logit), float64 arrays."""
    x = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    sign = 2.0 * y - 1.0
    z = sign * x
    log_pt = -_softplus(-z)
    pt = np.exp(log_pt)
    one_m = -np.expm1(log_pt)  # 1 - p_t without cancellation
    if balance is None:
        alpha = np.ones_like(x)
    else:
        alpha = np.where(y > 0.5, balance, 1.0 - balance)
    mod = one_m ** gamma
    loss = -alpha * mod * log_pt
    dz = mod * (gamma * pt * log_pt - one_m)
    return loss, alpha * sign * dz


def sigmoid_focal_loss(logit: float, label: int, gamma: float = GAMMA,
                       balance: float | None = BALANCE) -> float:
    loss, _ = _focal_terms(logit, label, gamma, balance)
    return float(loss)


def smooth_l1(pred, target) -> float:
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum())


def scale_margin(w, h, alpha: float = 15.0):
    """Margin alpha / sqrt(w*h); vectorised over w and h."""
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("scale_margin: width and height must be positive")
    m = alpha / np.sqrt(w * h)
    return float(m) if m.ndim == 0 else m


def shift_logit(logit, label, margin):
    """Logit seen by the loss: x - m for faces, x + m for background."""
    label = np.asarray(label)
    return np.asarray(logit, dtype=np.float64) - np.where(label > 0.5, margin, -margin)


def margined_focal_loss(logit: float, label: int, box_w: float, box_h: float,
                        alpha: float = 15.0, gamma: float = GAMMA,
                        balance: float | None = BALANCE) -> float:
    m = scale_margin(box_w, box_h, alpha)
    return sigmoid_focal_loss(float(shift_logit(logit, label, m)), label, gamma, balance)


# ---------------------------------------------------------------------------
# fused tensor ops
# ---------------------------------------------------------------------------

def focal_loss_sum(logits: Tensor, labels: np.ndarray, weights: np.ndarray,
                   margins: np.ndarray | None = None, gamma: float = GAMMA,
                   balance: float | None = BALANCE) -> Tensor:
    """sum_i weights_i * FL(shift(logit_i), label_i) as a scalar tensor.

    ``margins`` (same shape, may be None) are applied as in ``shift_logit``.
    Elements with weight 0 contribute neither loss nor gradient.
    """
    if labels.shape != logits.shape or weights.shape != logits.shape:
        raise ValueError(f"focal_loss_sum: label/weight shapes {labels.shape}/{weights.shape} "
                         f"must equal logits shape {logits.shape}")
    x = logits.data.astype(np.float64)
    if margins is not None:
        x = shift_logit(x, labels, margins)
    loss, dx = _focal_terms(x, labels, gamma, balance)
    w = np.asarray(weights, dtype=np.float64)
    total = float((loss * w).sum())
    grad = (dx * w).astype(logits.data.dtype)
    return make_op(np.asarray(total), (logits,), lambda g: (grad * g,))


def smooth_l1_sum(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum over rows of weights_r * smooth_l1(pred_r, target_r); pred is [...,4]."""
    if target.shape != pred.shape or weights.shape != pred.shape[:-1]:
        raise ValueError(f"smooth_l1_sum: target {target.shape} / weights {weights.shape} "
                         f"do not fit predictions {pred.shape}")
    d = pred.data.astype(np.float64) - target
    ad = np.abs(d)
    w = np.asarray(weights, dtype=np.float64)[..., None]
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    total = float((per * w).sum())
    grad = (np.where(ad < 1.0, d, np.sign(d)) * w).astype(pred.data.dtype)
    return make_op(np.asarray(total), (pred,), lambda g: (grad * g,))


def binary_cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean sigmoid cross-entropy; gamma=0 focal loss without balance weighting."""
    n = max(logits.size, 1)
    return focal_loss_sum(logits, labels.astype(np.float64), np.full(logits.shape, 1.0 / n),
                          gamma=0.0, balance=None)

