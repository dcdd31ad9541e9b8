"""Finite-difference verification of every analytic derivative in :mod:`losses`.

Each family compares an analytic derivative against central differences on
seeded random instances and reports the worst relative error. Scalar
families use ``|a - n| / max(|a|, |n|, REL_FLOOR)``; array families use the
max-norm error divided by the max-norm of the numeric gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import losses
from .errors import InsufficientData
from .losses import RhoPair

FIRST_ORDER_TOL = 1e-5
SECOND_ORDER_TOL = 1e-4
REL_FLOOR = 1e-4

FAMILIES = (
    "grad_p",
    "grad_rho1",
    "grad_rho2",
    "curvature",
    "ce_grad",
    "ce_curvature",
    "dice_grad",
    "logit_chain",
)
SECOND_ORDER = {"curvature", "ce_curvature"}


@dataclass
class FamilyReport:
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_rel_error <= self.tolerance)


def _rel(a, n):
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def _norm_rel(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n)) / max(float(np.max(np.abs(n))), REL_FLOOR))


def _d1(f, x, h):
    return (f(x + h) - f(x - h)) / (2.0 * h)


def _d2(f, x, h):
    return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)


def _numeric_grad(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def _scalar_loss(p, mu, r1, r2):
    return losses.fuzzy_loss(np.array([p]), np.array([mu]), r1, r2)[0]


def _check_scalar_sample(rng, perturb):
    p = rng.uniform(0.01, 0.99)
    mu = rng.uniform(0.0, 1.0)
    r1, r2 = rng.uniform(0.05, 0.95, size=2)
    y = float(rng.integers(0, 2))
    h1 = 1e-5 * min(p, 1.0 - p)
    h2 = 1e-3 * min(p, 1.0 - p)

    out = {}
    a = losses.fuzzy_loss_grad_p(np.array([p]), np.array([mu]), r1, r2)[0] + perturb.get("grad_p", 0.0)
    out["grad_p"] = _rel(a, _d1(lambda q: _scalar_loss(q, mu, r1, r2), p, h1))

    a1, a2 = losses.fuzzy_loss_grad_rho(np.array([p]), np.array([mu]), r1, r2)
    a1 += perturb.get("grad_rho1", 0.0)
    a2 += perturb.get("grad_rho2", 0.0)
    out["grad_rho1"] = _rel(a1, _d1(lambda q: _scalar_loss(p, mu, q, r2), r1, 1e-6 * r1))
    out["grad_rho2"] = _rel(a2, _d1(lambda q: _scalar_loss(p, mu, r1, q), r2, 1e-6))

    a = losses.fuzzy_loss_curvature(np.array([p]), np.array([mu]), r1, r2)[0] + perturb.get("curvature", 0.0)
    out["curvature"] = _rel(a, _d2(lambda q: _scalar_loss(q, mu, r1, r2), p, h2))

    ce = lambda q: losses.ce_loss(np.array([q]), np.array([y]))[0]  # noqa: E731
    a = losses.ce_grad(np.array([p]), np.array([y]))[0] + perturb.get("ce_grad", 0.0)
    out["ce_grad"] = _rel(a, _d1(ce, p, h1))
    a = losses.ce_curvature(np.array([p]), np.array([y]))[0] + perturb.get("ce_curvature", 0.0)
    out["ce_curvature"] = _rel(a, _d2(ce, p, h2))
    return out


def _check_dice_sample(rng, perturb):
    p = rng.uniform(0.01, 0.99, size=(3, 3, 3, 2))
    t = np.eye(2)[rng.integers(0, 2, size=(3, 3, 3))]
    _, g = losses.dice_loss(p, t)
    g = g + perturb.get("dice_grad", 0.0)
    return _norm_rel(g, _numeric_grad(lambda q: losses.dice_value(q, t), p))


def _check_chain_sample(rng, perturb):
    z = rng.normal(scale=1.5, size=(3, 3, 3, 3))
    mu = rng.dirichlet(np.ones(3), size=(3, 3, 3))
    target = np.eye(3)[rng.integers(0, 3, size=(3, 3, 3))]
    raw = rng.uniform(-2.5, 2.5, size=2)
    lam = rng.uniform(0.1, 2.0)

    def objective(zz, r1=raw[0], r2=raw[1]):
        return losses.total_value(zz, mu, target, losses.sigmoid(r1), losses.sigmoid(r2), lam)

    _, grads = losses.total_loss(z, mu, target, RhoPair(*raw), lam)
    d_logits = grads.d_logits + perturb.get("logit_chain", 0.0)
    err = _norm_rel(d_logits, _numeric_grad(objective, z))
    n1 = _d1(lambda q: objective(z, r1=q), raw[0], 1e-6)
    n2 = _d1(lambda q: objective(z, r2=q), raw[1], 1e-6)
    return max(err, _rel(grads.d_rho1_raw, n1), _rel(grads.d_rho2_raw, n2))


def run_gradcheck(samples=200, seed=0, perturb: Optional[Dict[str, float]] = None) -> Dict[str, FamilyReport]:
    """Worst relative error per derivative family over ``samples`` instances.

    ``perturb`` adds a constant to the named analytic derivatives; it exists
    so the negative control (a deliberately wrong gradient) can be exercised.
    """
    if samples < 1:
        raise InsufficientData("gradcheck needs at least one sample")
    perturb = perturb or {}
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in FAMILIES}
    for _ in range(samples):
        for name, err in _check_scalar_sample(rng, perturb).items():
            worst[name] = max(worst[name], err)
        worst["dice_grad"] = max(worst["dice_grad"], _check_dice_sample(rng, perturb))
        worst["logit_chain"] = max(worst["logit_chain"], _check_chain_sample(rng, perturb))
    return {
        name: FamilyReport(float(worst[name]), SECOND_ORDER_TOL if name in SECOND_ORDER else FIRST_ORDER_TOL)
        for name in FAMILIES
    }
