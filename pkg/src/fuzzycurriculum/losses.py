"""Losses and their analytic derivatives.

All array functions take the class axis last. Probabilities are clamped to
``[P_MIN, P_MAX]`` before any logarithm or division; the per-voxel loss is a
sum over classes and the scalar loss is the mean over voxels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidParameter, InvalidTarget, NonFiniteInput, ShapeMismatch
from .volume import FuzzyLabelVolume, LabelVolume, LogitField, ProbField, ScalarField

P_MIN = 1e-7
P_MAX = 1.0 - 1e-7
DICE_SMOOTH = 1e-5
# sigma(+-30) is within 1e-13 of the limit, and keeps rho strictly inside (0, 1).
RAW_LIMIT = 30.0


def sigmoid(x):
    x = min(max(float(x), -RAW_LIMIT), RAW_LIMIT)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def logit(q):
    return math.log(q) - math.log1p(-q)


@dataclass(frozen=True)
class RhoPair:
    """Learnable (rho1, rho2), stored as unconstrained raw values."""

    rho1_raw: float
    rho2_raw: float

    @property
    def rho1(self):
        return sigmoid(self.rho1_raw)

    @property
    def rho2(self):
        return sigmoid(self.rho2_raw)

    @classmethod
    def from_values(cls, rho1, rho2):
        for name, v in (("rho1", rho1), ("rho2", rho2)):
            if not 0.0 < v < 1.0:
                raise InvalidParameter(f"{name} must lie strictly inside (0, 1), got {v}")
        return cls(logit(rho1), logit(rho2))

    def step(self, d_raw1, d_raw2, lr):
        return RhoPair(self.rho1_raw - lr * d_raw1, self.rho2_raw - lr * d_raw2)


@dataclass(frozen=True)
class FixedRho:
    """Non-learnable (rho1, rho2); unlike :class:`RhoPair` it may hold 1.0."""

    rho1: float
    rho2: float

    def __post_init__(self):
        for name in ("rho1", "rho2"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidParameter(f"{name} must lie in (0, 1], got {v}")

    def step(self, d_raw1, d_raw2, lr):
        return self


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    dice: float
    fuzzy: float
    lam: float
    per_voxel_fuzzy: Optional[np.ndarray] = None

    def per_voxel_field(self):
        return None if self.per_voxel_fuzzy is None else ScalarField(self.per_voxel_fuzzy)


@dataclass(frozen=True)
class FuzzyGrads:
    d_p: np.ndarray
    d_rho1: float
    d_rho2: float
    d_logits: np.ndarray


@dataclass(frozen=True)
class TotalGrads:
    """Gradient of the curriculum objective.

    ``d_logits`` is the gradient of ``dice + lam * fuzzy``; the two branch
    gradients are kept unweighted for interaction analysis.
    """

    d_logits: np.ndarray
    d_logits_dice: np.ndarray
    d_logits_fuzzy: np.ndarray
    d_rho1_raw: float
    d_rho2_raw: float


def _arr(x):
    if isinstance(x, (LogitField, ProbField, ScalarField)):
        return x.data.astype(np.float64)
    if isinstance(x, FuzzyLabelVolume):
        return x.mu.astype(np.float64)
    if isinstance(x, LabelVolume):
        return x.one_hot()
    return np.asarray(x, dtype=np.float64)


def _pair(p, mu):
    p, mu = _arr(p), _arr(mu)
    if p.shape != mu.shape:
        raise ShapeMismatch(f"probabilities {p.shape} and targets {mu.shape} differ")
    return p, mu


def clamp_prob(p):
    return np.clip(p, P_MIN, P_MAX)


def _mean_over_voxels(per_voxel):
    return float(np.mean(per_voxel)) if np.ndim(per_voxel) else float(per_voxel)


# ---------------------------------------------------------------------------
# softmax


def softmax(z):
    z = _arr(z)
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("logits contain NaN or Inf")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_field(z: LogitField) -> ProbField:
    return ProbField(softmax(z))


def softmax_backward(p, g):
    """Pull a gradient w.r.t. probabilities back to the logits."""
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# fuzzy auxiliary loss


def fuzzy_terms(p, mu, rho1, rho2):
    """Elementwise fuzzy loss terms (one per voxel and class)."""
    p, mu = _pair(p, mu)
    pc = clamp_prob(p)
    # log(rho1 * (1 - p)) split to avoid cancellation
    return -(mu * np.log(pc) + rho2 * (1.0 - mu) * (math.log(rho1) + np.log1p(-pc)))


def fuzzy_loss(p, mu, rho1, rho2):
    """Mean-over-voxels fuzzy loss and the per-voxel loss field."""
    per_voxel = fuzzy_terms(p, mu, rho1, rho2).sum(axis=-1)
    return _mean_over_voxels(per_voxel), per_voxel


def fuzzy_loss_grad_p(p, mu, rho1, rho2):
    p, mu = _pair(p, mu)
    pc = clamp_prob(p)
    return -mu / pc + rho2 * (1.0 - mu) / (1.0 - pc)


def fuzzy_loss_grad_rho(p, mu, rho1, rho2):
    """Derivatives of :func:`fuzzy_loss` w.r.t. the constrained rho1, rho2."""
    p, mu = _pair(p, mu)
    pc = clamp_prob(p)
    om = 1.0 - mu
    d1 = -(rho2 / rho1) * om.sum(axis=-1)
    d2 = -(om * (math.log(rho1) + np.log1p(-pc))).sum(axis=-1)
    return _mean_over_voxels(d1), _mean_over_voxels(d2)


def fuzzy_loss_curvature(p, mu, rho1, rho2):
    p, mu = _pair(p, mu)
    pc = clamp_prob(p)
    return mu / pc**2 + rho2 * (1.0 - mu) / (1.0 - pc) ** 2


def equilibrium_prob(mu, rho2):
    """Root of the per-class gradient, ``mu / (mu + rho2 (1 - mu))``."""
    mu = np.asarray(mu, dtype=np.float64)
    if rho2 == 1.0:
        # mu + (1 - mu) can round away from 1
        return mu.copy()
    return mu / (mu + rho2 * (1.0 - mu))


def _clamp_mask(p):
    return ((p >= P_MIN) & (p <= P_MAX)).astype(np.float64)


def fuzzy_grads(z, mu, rho1, rho2) -> FuzzyGrads:
    """All fuzzy-loss gradients, including the softmax chain to the logits."""
    p = softmax(z)
    _, mu = _pair(p, mu)
    d_p = fuzzy_loss_grad_p(p, mu, rho1, rho2)
    n_vox = max(1, int(np.prod(p.shape[:-1])))
    d_logits = softmax_backward(p, d_p * _clamp_mask(p) / n_vox)
    d1, d2 = fuzzy_loss_grad_rho(p, mu, rho1, rho2)
    return FuzzyGrads(d_p=d_p, d_rho1=d1, d_rho2=d2, d_logits=d_logits)


# ---------------------------------------------------------------------------
# cross-entropy baseline


def _check_one_hot(y):
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidTarget("cross-entropy targets must be 0 or 1")
    if y.shape[-1] > 1 and not np.all(y.sum(axis=-1) == 1.0):
        raise InvalidTarget("cross-entropy targets must be one-hot per voxel")


def ce_loss(p, y):
    """Per-class binary cross-entropy summed over classes, mean over voxels."""
    p, y = _pair(p, y)
    _check_one_hot(y)
    pc = clamp_prob(p)
    per_voxel = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum(axis=-1)
    return _mean_over_voxels(per_voxel), per_voxel


def ce_grad(p, y):
    p, y = _pair(p, y)
    _check_one_hot(y)
    pc = clamp_prob(p)
    return -y / pc + (1.0 - y) / (1.0 - pc)


def ce_curvature(p, y):
    p, y = _pair(p, y)
    _check_one_hot(y)
    pc = clamp_prob(p)
    return y / pc**2 + (1.0 - y) / (1.0 - pc) ** 2


# ---------------------------------------------------------------------------
# soft Dice


def dice_classes(num_classes):
    return list(range(1, num_classes)) if num_classes > 1 else [0]


def dice_loss(p, target, smooth=DICE_SMOOTH):
    """Squared-denominator soft Dice over foreground classes.

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``p``. Sums run
    over every voxel; the loss is averaged over classes ``1..C-1``.
    """
    p, t = _pair(p, target)
    flat_p = p.reshape(-1, p.shape[-1])
    flat_t = t.reshape(-1, t.shape[-1])
    classes = dice_classes(p.shape[-1])
    grad = np.zeros_like(flat_p)
    total = 0.0
    for c in classes:
        pc, tc = flat_p[:, c], flat_t[:, c]
        num = 2.0 * np.dot(pc, tc) + smooth
        den = np.dot(pc, pc) + np.dot(tc, tc) + smooth
        total += 1.0 - num / den
        grad[:, c] = -(2.0 * tc * den - 2.0 * pc * num) / den**2
    k = len(classes)
    return total / k, (grad / k).reshape(p.shape)


def dice_value(p, target, smooth=DICE_SMOOTH):
    """Loss half of :func:`dice_loss`, without the gradient."""
    p, t = _pair(p, target)
    flat_p = p.reshape(-1, p.shape[-1])
    flat_t = t.reshape(-1, t.shape[-1])
    classes = dice_classes(p.shape[-1])
    pc, tc = flat_p[:, classes], flat_t[:, classes]
    num = 2.0 * np.einsum("ij,ij->j", pc, tc) + smooth
    den = np.einsum("ij,ij->j", pc, pc) + np.einsum("ij,ij->j", tc, tc) + smooth
    return float(np.mean(1.0 - num / den))


def dice_logit_grad(z, target, smooth=DICE_SMOOTH):
    p = softmax(z)
    loss, g = dice_loss(p, target, smooth)
    return loss, softmax_backward(p, g)


# ---------------------------------------------------------------------------
# curriculum objective


def total_loss(z, mu, dice_target, rho: RhoPair, lam, dice_weight=1.0):
    """``dice_weight * dice + lam * fuzzy`` and its full gradient.

    ``z`` are logits, ``mu`` memberships, ``dice_target`` the (usually
    one-hot) Dice target; all share shape ``(..., C)``.
    """
    if lam < 0:
        raise InvalidParameter(f"lambda must be >= 0, got {lam}")
    z = _arr(z)
    p = softmax(z)
    _, mu = _pair(p, mu)
    rho1, rho2 = rho.rho1, rho.rho2

    fuzzy, per_voxel = fuzzy_loss(p, mu, rho1, rho2)
    dice, g_dice_p = dice_loss(p, dice_target)

    n_vox = max(1, int(np.prod(p.shape[:-1])))
    g_fuzzy_p = fuzzy_loss_grad_p(p, mu, rho1, rho2) * _clamp_mask(p) / n_vox
    d_dice = softmax_backward(p, g_dice_p)
    d_fuzzy = softmax_backward(p, g_fuzzy_p)
    d1, d2 = fuzzy_loss_grad_rho(p, mu, rho1, rho2)

    breakdown = LossBreakdown(
        total=dice_weight * dice + lam * fuzzy,
        dice=dice,
        fuzzy=fuzzy,
        lam=float(lam),
        per_voxel_fuzzy=per_voxel,
    )
    grads = TotalGrads(
        d_logits=dice_weight * d_dice + lam * d_fuzzy,
        d_logits_dice=d_dice,
        d_logits_fuzzy=d_fuzzy,
        d_rho1_raw=lam * d1 * rho1 * (1.0 - rho1),
        d_rho2_raw=lam * d2 * rho2 * (1.0 - rho2),
    )
    return breakdown, grads


def total_value(z, mu, dice_target, rho1, rho2, lam, dice_weight=1.0):
    """Scalar objective of :func:`total_loss` for constrained ``rho1, rho2``."""
    p = softmax(z)
    fuzzy, _ = fuzzy_loss(p, mu, rho1, rho2)
    return dice_weight * dice_value(p, dice_target) + lam * fuzzy


def total_loss_ce(z, y, dice_target, lam, dice_weight=1.0):
    """Same as :func:`total_loss` with cross-entropy on ``y`` as the auxiliary term."""
    if lam < 0:
        raise InvalidParameter(f"lambda must be >= 0, got {lam}")
    z = _arr(z)
    p = softmax(z)
    _, y = _pair(p, y)
    ce, per_voxel = ce_loss(p, y)
    dice, g_dice_p = dice_loss(p, dice_target)
    n_vox = max(1, int(np.prod(p.shape[:-1])))
    d_dice = softmax_backward(p, g_dice_p)
    d_ce = softmax_backward(p, ce_grad(p, y) * _clamp_mask(p) / n_vox)
    breakdown = LossBreakdown(
        total=dice_weight * dice + lam * ce, dice=dice, fuzzy=ce, lam=float(lam), per_voxel_fuzzy=per_voxel
    )
    grads = TotalGrads(
        d_logits=dice_weight * d_dice + lam * d_ce,
        d_logits_dice=d_dice,
        d_logits_fuzzy=d_ce,
        d_rho1_raw=0.0,
        d_rho2_raw=0.0,
    )
    return breakdown, grads
