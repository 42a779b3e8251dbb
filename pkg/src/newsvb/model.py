"""Exponential-demand newsvendor model.

Demand is exponentially distributed with unknown rate theta > 0. Stocking
``a`` units against a realized demand ``xi`` costs ``h`` per leftover unit
and ``b`` per unit of unmet demand. The expected cost of an action under
rate theta has the closed form

    G(a, theta) = h*a - h/theta + (b + h) * exp(-a*theta) / theta,

which is convex in ``a`` with unique minimizer log((b + h) / h) / theta.
The rate carries a (deliberately non-conjugate) inverse-gamma prior with
shape ``alpha`` and rate ``beta``.

All functions here are pure; random draws consume an explicit generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "Observations",
    "NewsvendorModel",
    "loss",
    "risk",
    "true_optimal_action",
    "log_likelihood",
    "log_prior",
    "log_posterior_unnormalized",
    "sample_demand",
    "fisher_information",
    "validate_action",
]


class Observations:
    """A demand sample with cached sufficient statistics (n, sum)."""

    __slots__ = ("values", "n", "sum_s")

    def __init__(self, values):
        arr = np.array(values, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("observations must form a non-empty 1-D sequence")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("demand observations must be finite and nonnegative")
        arr.setflags(write=False)
        self.values = arr
        self.n = int(arr.size)
        self.sum_s = float(arr.sum())

    def prefix(self, n: int) -> "Observations":
        """First ``n`` observations as a fresh sample (nested-sample design)."""
        if not 1 <= n <= self.n:
            raise ValueError(f"prefix length {n} outside [1, {self.n}]")
        return Observations(self.values[:n])

    def __repr__(self):
        return f"Observations(n={self.n}, sum_s={self.sum_s:.6g})"


@dataclass(frozen=True)
class NewsvendorModel:
    """Cost/prior configuration for one newsvendor instance.

    ``theta0`` is the data-generating rate when known; decisions can be
    computed without it, but gap metrics and demand synthesis need it.
    ``action_interval`` is the compact decision interval [a_lo, a_hi].
    """

    h: float
    b: float
    theta0: float | None
    alpha: float
    beta: float
    action_interval: tuple[float, float] = (0.0, 50.0)

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("holding cost h must be positive")
        if not self.b > 0:
            raise ValueError("backorder cost b must be positive")
        if not self.alpha > 0:
            raise ValueError("prior shape alpha must be positive")
        if not self.beta > 0:
            raise ValueError("prior rate beta must be positive")
        lo, hi = self.action_interval
        if not (0 <= lo < hi):
            raise ValueError("action interval must satisfy 0 <= a_lo < a_hi")
        if self.theta0 is not None:
            if not self.theta0 > 0:
                raise ValueError("true rate theta0 must be positive")
            a_star = math.log((self.b + self.h) / self.h) / self.theta0
            if not lo < a_star < hi:
                raise ValueError(
                    f"optimal action {a_star:.6g} lies outside the action "
                    f"interval [{lo:.6g}, {hi:.6g}]"
                )

    @property
    def action_lo(self) -> float:
        return self.action_interval[0]

    @property
    def action_hi(self) -> float:
        return self.action_interval[1]


def _as_positive_theta(theta):
    arr = np.asarray(theta, dtype=float)
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("theta must be positive and finite")
    return arr


def validate_action(a: float, model: NewsvendorModel):
    """Reject actions outside the model's decision interval."""
    lo, hi = model.action_interval
    if not lo <= a <= hi:
        raise ValueError(f"action {a:.6g} outside the decision interval [{lo:.6g}, {hi:.6g}]")


def loss(a: float, xi, model: NewsvendorModel):
    """Realized newsvendor cost h*(a - xi)^+ + b*(xi - a)^+.

    ``xi`` may be a scalar or an array of demands.
    """
    if a < 0:
        raise ValueError("action a must be nonnegative")
    xi_arr = np.asarray(xi, dtype=float)
    if np.any(xi_arr < 0):
        raise ValueError("demand xi must be nonnegative")
    out = model.h * np.maximum(a - xi_arr, 0.0) + model.b * np.maximum(xi_arr - a, 0.0)
    return float(out) if np.ndim(xi) == 0 else out


def risk(a: float, theta, model: NewsvendorModel):
    """Expected cost G(a, theta) = h*a - h/theta + (b+h)*exp(-a*theta)/theta.

    The exponential tail is evaluated in log space, which keeps the term
    well-behaved for extreme a*theta and tiny theta.
    """
    if a < 0:
        raise ValueError("action a must be nonnegative")
    theta_arr = _as_positive_theta(theta)
    log_theta = np.log(theta_arr)
    tail = np.exp(math.log(model.b + model.h) - a * theta_arr - log_theta)
    out = model.h * a - model.h / theta_arr + tail
    return float(out) if np.ndim(theta) == 0 else out


def true_optimal_action(model: NewsvendorModel) -> float:
    """Unique minimizer log((b + h)/h) / theta0 of the convex map a -> G(a, theta0)."""
    if model.theta0 is None:
        raise ValueError("model has no known true rate theta0")
    return math.log((model.b + model.h) / model.h) / model.theta0


def log_likelihood(theta, data: Observations):
    """Exponential i.i.d. log likelihood n*log(theta) - theta*sum(x)."""
    theta_arr = _as_positive_theta(theta)
    out = data.n * np.log(theta_arr) - theta_arr * data.sum_s
    return float(out) if np.ndim(theta) == 0 else out


def log_prior(theta, model: NewsvendorModel):
    """Inverse-gamma(alpha, beta) log density over the rate."""
    theta_arr = _as_positive_theta(theta)
    out = (
        model.alpha * math.log(model.beta)
        - gammaln(model.alpha)
        - (model.alpha + 1.0) * np.log(theta_arr)
        - model.beta / theta_arr
    )
    return float(out) if np.ndim(theta) == 0 else out


def log_posterior_unnormalized(theta, data: Observations, model: NewsvendorModel):
    """log p(X | theta) + log pi(theta), the posterior up to its constant."""
    return log_likelihood(theta, data) + log_prior(theta, model)


def sample_demand(theta: float, count: int, rng) -> Observations:
    """Draw ``count`` i.i.d. Exp(theta) demands by inverse CDF -log(U)/theta.

    Deterministic given the generator state; ``rng`` only needs a
    ``random(count)`` method returning uniforms in [0, 1).
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    if count < 1:
        raise ValueError("count must be at least 1")
    u = np.asarray(rng.random(count), dtype=float)
    # random() can return exactly 0; nudge to keep -log(U) finite.
    u = np.maximum(u, np.finfo(float).tiny)
    return Observations(-np.log(u) / theta)


def fisher_information(theta):
    """Fisher information 1/theta^2 of the exponential rate."""
    theta_arr = _as_positive_theta(theta)
    out = 1.0 / (theta_arr * theta_arr)
    return float(out) if np.ndim(theta) == 0 else out
