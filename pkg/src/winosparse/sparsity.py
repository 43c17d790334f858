"""Partial-L2 regularizers over the smallest-magnitude weights, nearest-rank
percentile thresholds, and the learnable-coefficient cost.

Both regularizers penalize the mean square of the weights whose magnitude
falls at or below the threshold for the target sparsity percentile; the
threshold is recomputed from the current weights on every evaluation. The
indicator (threshold membership) is held constant during backprop.

The combined training cost is

    C = E + exp(zeta_wd) * R_wd + exp(zeta_sd) * R_sd - alpha * (zeta_wd + zeta_sd)

so dC/dzeta = exp(zeta) * R - alpha: while the weighted penalty is below
alpha the coefficient keeps growing, which ramps regularization up as the
regularized weights shrink. L2 (not L1) is used on purpose: the goal is
many small-magnitude weights that survive pruning in either domain, not
literal zeros before pruning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .winograd import WinogradPlan, filter_gradient_from_transform, transform_filters

__all__ = [
    "SparsityConfig",
    "TrainState",
    "PartialL2",
    "percentile_threshold",
    "winograd_partial_l2",
    "spatial_partial_l2",
    "joint_cost",
]

NOTHING_REGULARIZED = float("-inf")  # threshold sentinel for s=0

_EXP_CAP = 700.0  # exp(700) ~ 1e304; beyond this a coefficient is as good as inf


def coefficient(zeta: float) -> float:
    """exp(zeta), saturating instead of overflowing for runaway zeta."""
    return math.exp(min(zeta, _EXP_CAP))


@dataclass
class SparsityConfig:
    """Target sparsities in percent, penalty strength and threshold scope."""

    s_wd: float = 0.0
    s_sd: float = 0.0
    alpha: float = 1.0
    threshold_scope: str = "global"  # global | per-layer

    def __post_init__(self):
        if not 0.0 <= self.s_wd <= 100.0:
            raise ValueError(f"s_wd must be in [0,100], got {self.s_wd}")
        if not 0.0 <= self.s_sd <= 100.0:
            raise ValueError(f"s_sd must be in [0,100], got {self.s_sd}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.threshold_scope not in ("global", "per-layer"):
            raise ValueError(f"unknown threshold scope {self.threshold_scope!r}")


@dataclass
class TrainState:
    """Learnable log-coefficients and the current thresholds."""

    zeta_wd: float
    zeta_sd: float
    theta_wd: float = 0.0
    theta_sd: float = 0.0
    iteration: int = 0


def percentile_threshold(magnitudes, s: float) -> float:
    """Nearest-rank s-th percentile: the ceil(s*N/100)-th smallest value.

    s=0 returns -inf (nothing regularized); s=100 returns the maximum.
    """
    mags = np.asarray(magnitudes, dtype=np.float64).ravel()
    if mags.size == 0:
        raise ValueError("percentile_threshold: empty magnitude list")
    if not 0.0 <= s <= 100.0:
        raise ValueError(f"percentile_threshold: s must be in [0,100], got {s}")
    if s == 0.0:
        return NOTHING_REGULARIZED
    # the tiny epsilon keeps exactly-integral ranks from rounding up in float
    k = math.ceil(s * mags.size / 100.0 - 1e-9)
    k = min(max(k, 1), mags.size)
    return float(np.partition(mags, k - 1)[k - 1])


class PartialL2(NamedTuple):
    value: float
    grads: dict[str, np.ndarray]  # d(value)/d(spatial weights), per layer
    theta: float | dict[str, float]


def _masked_mean_square(values: dict[str, np.ndarray], s: float, scope: str):
    """Shared core: threshold over |values|, masked mean square, and the
    gradient w.r.t. the (domain) values with the mask held constant."""
    total = sum(v.size for v in values.values())
    if total == 0:
        raise ValueError("partial L2 over an empty weight set")
    if scope == "global":
        flat = np.concatenate([np.abs(v).ravel() for v in values.values()])
        theta = percentile_threshold(flat, s)
        thetas = {name: theta for name in values}
    else:
        thetas = {name: percentile_threshold(np.abs(v), s) for name, v in values.items()}
        theta = thetas
    value = 0.0
    grads = {}
    for name, v in values.items():
        mask = np.abs(v) <= thetas[name]
        masked = np.where(mask, v, 0.0)
        value += float((masked**2).sum())
        grads[name] = (2.0 / total) * masked
    return value / total, grads, theta


def winograd_partial_l2(
    weights, plans: dict[str, WinogradPlan], s_wd: float, scope: str = "global"
) -> PartialL2:
    """Mean square of the sub-threshold transform-domain weights.

    ``weights`` maps layer name -> spatial conv tensor [D,C,r,r]; every
    layer appearing in ``plans`` is regularized. The returned gradients are
    w.r.t. the spatial weights, pulled back through W = G w G^T with the
    indicator fixed.
    """
    if not plans:
        raise ValueError("winograd_partial_l2: no layers with plans")
    wd = {}
    for name, plan in plans.items():
        if name not in weights:
            raise ValueError(f"winograd_partial_l2: no weights for layer {name!r}")
        wd[name] = transform_filters(weights[name], plan)
    value, wd_grads, theta = _masked_mean_square(wd, s_wd, scope)
    grads = {
        name: filter_gradient_from_transform(wd_grads[name], plans[name])
        for name in plans
    }
    return PartialL2(value, grads, theta)


def spatial_partial_l2(weights, s_sd: float, scope: str = "global") -> PartialL2:
    """Mean square of the sub-threshold spatial weights, over every conv
    and fc layer in ``weights``."""
    values = {name: np.asarray(v, dtype=np.float64) for name, v in weights.items()}
    value, grads, theta = _masked_mean_square(values, s_sd, scope)
    return PartialL2(value, grads, theta)


class JointCost(NamedTuple):
    value: float
    dzeta_wd: float
    dzeta_sd: float


def joint_cost(
    E: float, R_wd: float, R_sd: float, zeta_wd: float, zeta_sd: float, alpha: float
) -> JointCost:
    """Total cost and the zeta gradients; weight gradients are assembled by
    the caller as dE/dw + exp(zeta)*dR/dw summed over both regularizers."""
    if alpha <= 0:
        raise ValueError(f"joint_cost: alpha must be positive, got {alpha}")
    cwd, csd = coefficient(zeta_wd), coefficient(zeta_sd)
    c = E + cwd * R_wd + csd * R_sd - alpha * (zeta_wd + zeta_sd)
    return JointCost(c, cwd * R_wd - alpha, csd * R_sd - alpha)
