"""Dual-objective loss: dot-product maximization vs. adaptive robust distance.

The distance term is a scale/shape family over the summed per-channel
activation distance: quadratic at shape 2, logarithmic at 0, Welsch in the
negative-infinity limit, and a smooth power-law interpolation elsewhere.
Scale and shape are trainable through positivity/boundedness-preserving
latent parameterizations so plain gradient steps keep them feasible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

# dispatch half-width around the removable singularities of the general branch
BRANCH_TOL = 1e-6
B_LO, B_HI = 0.01, 2.99


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


class RobustLossParams:
    """Scale r > 0 and shape b of the adaptive distance.

    Fixed mode stores raw values and accepts any finite b (the Welsch
    limit is a separate mode flag). Trainable mode keeps r behind a
    softplus latent and b behind a sigmoid latent bounded to
    (B_LO, B_HI), so gradient steps can never leave the feasible region
    or land on a singular dispatch point.
    """

    def __init__(self, r: float = 1.0, b: float = 1.0,
                 welsch: bool = False, trainable: bool = False):
        if not np.isfinite(r) or r <= 0:
            raise ValidationError(f"scale r must be positive and finite, got {r}")
        if not welsch and not np.isfinite(b):
            raise ValidationError("shape b must be finite (use welsch=True for the limit)")
        self.welsch = bool(welsch)
        self.trainable = bool(trainable)
        if self.trainable:
            self._r_latent = _softplus_inv(r)
            if self.welsch:
                self._b_latent = None
            else:
                if not (B_LO < b < B_HI):
                    raise ConfigError(
                        f"trainable shape b must lie in ({B_LO}, {B_HI}), got {b}"
                    )
                self._b_latent = math.log((b - B_LO) / (B_HI - b))
            self._r_fixed = None
            self._b_fixed = None
        else:
            self._r_fixed = float(r)
            self._b_fixed = float(b)
            self._r_latent = None
            self._b_latent = None

    @property
    def r(self) -> float:
        if self.trainable:
            return _softplus(self._r_latent)
        return self._r_fixed

    @property
    def b(self) -> float:
        if self.welsch:
            return float("-inf")
        if self.trainable:
            return B_LO + (B_HI - B_LO) * _sigmoid(self._b_latent)
        return self._b_fixed

    def b_latent_chain(self) -> float:
        """db / d(b_latent); zero whenever b is not latent-backed."""
        if not self.trainable or self.welsch:
            return 0.0
        s = _sigmoid(self._b_latent)
        return (B_HI - B_LO) * s * (1.0 - s)

    def gradient_step(self, d_r: float, d_b_latent: float, lr: float):
        """One descent step on the latents; no-op for fixed params."""
        if not self.trainable:
            return
        self._r_latent -= lr * d_r * _sigmoid(self._r_latent)
        if self._b_latent is not None:
            # cap where the sigmoid saturates so b stays strictly interior
            self._b_latent = float(np.clip(self._b_latent - lr * d_b_latent,
                                           -30.0, 30.0))


def dot_maximization(a: np.ndarray, target: np.ndarray, top_k) -> float:
    """Sum over selected channels of the flattened activation dot product."""
    a, target, top_k = _check_pair(a, target, top_k)
    return float(sum(np.vdot(a[j], target[j]) for j in top_k))


def mdist(a: np.ndarray, target: np.ndarray, top_k) -> float:
    """Sum over selected channels of the Euclidean norm of the difference."""
    a, target, top_k = _check_pair(a, target, top_k)
    return float(sum(np.linalg.norm(a[j] - target[j]) for j in top_k))


def _check_pair(a, target, top_k):
    a = np.asarray(a, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if a.shape != target.shape:
        raise ValidationError(
            f"activation shape {a.shape} != target shape {target.shape}"
        )
    top_k = np.asarray(top_k, dtype=int)
    if top_k.size == 0 or top_k.size != np.unique(top_k).size:
        raise ValidationError("top_k must be a non-empty list of distinct channels")
    if top_k.min() < 0 or top_k.max() >= a.shape[0]:
        raise ValidationError(f"top_k indices out of range [0, {a.shape[0]})")
    return a, target, top_k


def _validate_distance(value: float, params: RobustLossParams) -> float:
    if not np.isfinite(value) or value < 0:
        raise ValidationError(f"mdist must be finite and non-negative, got {value}")
    if params.r <= 0:
        raise ValidationError("scale r must be positive")
    return float(value)


def adaptive_distance(distance: float, params: RobustLossParams,
                      strict_paper: bool = False) -> float:
    """Robust distance value for the dispatched shape branch.

    The general branch uses the "- 1" constant so that every branch is 0
    at zero residual and the shape limits agree; `strict_paper` restores
    the "+ 1" variant for side-by-side comparison.
    """
    x = _validate_distance(distance, params) / params.r
    u = x * x
    if params.welsch:
        return 1.0 - math.exp(-0.5 * u)
    b = params.b
    if abs(b - 2.0) < BRANCH_TOL:
        return 0.5 * u
    if abs(b) < BRANCH_TOL:
        return math.log1p(0.5 * u)
    a = abs(b - 2.0)
    tail = 1.0 if strict_paper else -1.0
    return (a / b) * ((u / a + 1.0) ** (b / 2.0) + tail)


def ad_gradients(distance: float, params: RobustLossParams,
                 strict_paper: bool = False):
    """Partials of the dispatched branch: (d/d mdist, d/d r, d/d b_latent).

    The shape partial is branch-local: the quadratic, log and Welsch
    branches do not depend on b, so their shape partial is 0. The latent
    chain factor comes from the bounded shape mapping and is 0 for fixed
    params.
    """
    md = _validate_distance(distance, params)
    r = params.r
    x = md / r
    u = x * x
    if params.welsch:
        e = math.exp(-0.5 * u)
        return e * md / r**2, -e * md**2 / r**3, 0.0
    b = params.b
    if abs(b - 2.0) < BRANCH_TOL:
        return md / r**2, -md**2 / r**3, 0.0
    if abs(b) < BRANCH_TOL:
        denom = 0.5 * u + 1.0
        return (md / r**2) / denom, -(md**2 / r**3) / denom, 0.0
    a = abs(b - 2.0)
    s = 1.0 if b > 2.0 else -1.0
    g = u / a + 1.0
    gp = g ** (b / 2.0 - 1.0)
    d_md = gp * md / r**2
    d_r = -gp * md**2 / r**3
    tail = 1.0 if strict_paper else -1.0
    gb = g ** (b / 2.0)
    d_b = (2.0 * s / b**2) * (gb + tail) + (a / b) * gb * (
        0.5 * math.log(g) - s * b * u / (2.0 * a**2 * g)
    )
    return d_md, d_r, d_b * params.b_latent_chain()


def l1_previous(prev: np.ndarray) -> float:
    """Absolute-value sum over all channels and positions."""
    prev = np.asarray(prev, dtype=np.float64)
    if not np.all(np.isfinite(prev)):
        raise ValidationError("previous-layer activation contains non-finite entries")
    return float(np.abs(prev).sum())


@dataclass(frozen=True)
class LossBreakdown:
    dm: float
    ad: float
    l1_prev: float
    lam: float
    total: float


def total_loss(dm: float, ad: float, l1: float, lam: float) -> LossBreakdown:
    """total = ad - dm + lam * l1, with the terms echoed back."""
    for name, v in (("dm", dm), ("ad", ad), ("l1", l1), ("lambda", lam)):
        if not np.isfinite(v):
            raise ValidationError(f"total_loss input '{name}' is non-finite: {v}")
    if lam < 0:
        raise ValidationError(f"lambda must be non-negative, got {lam}")
    return LossBreakdown(dm=dm, ad=ad, l1_prev=l1, lam=lam,
                         total=ad - dm + lam * l1)


@dataclass(frozen=True)
class ObjectiveEval:
    """One loss evaluation plus every gradient the optimizer consumes."""

    breakdown: LossBreakdown
    mdist: float
    grad_prev: np.ndarray
    grad_curr: np.ndarray
    d_r: float
    d_b_latent: float


def evaluate_objective(prev: np.ndarray, curr: np.ndarray, target: np.ndarray,
                       top_k, params: RobustLossParams, lam: float,
                       strict_paper: bool = False) -> ObjectiveEval:
    """Loss breakdown and analytic gradients for one optimizer step."""
    curr, target, top_k = _check_pair(curr, target, top_k)
    prev = np.asarray(prev, dtype=np.float64)
    dm = dot_maximization(curr, target, top_k)
    md = mdist(curr, target, top_k)
    ad = adaptive_distance(md, params, strict_paper)
    l1 = l1_previous(prev)
    breakdown = total_loss(dm, ad, l1, lam)

    d_md, d_r, d_b_latent = ad_gradients(md, params, strict_paper)
    grad_curr = np.zeros_like(curr)
    for j in top_k:
        grad_curr[j] = -target[j]
        diff = curr[j] - target[j]
        norm = np.linalg.norm(diff)
        if norm > 0.0:
            grad_curr[j] += d_md * diff / norm
    grad_prev = lam * np.sign(prev)
    return ObjectiveEval(breakdown=breakdown, mdist=md, grad_prev=grad_prev,
                         grad_curr=grad_curr, d_r=d_r, d_b_latent=d_b_latent)
