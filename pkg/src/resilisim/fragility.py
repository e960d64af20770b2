"""Hourly line failure probabilities from wind speed and tree canopy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class FragilityCurve:
    """Clamped logistic in wind speed.

    Zero below ``v_min``, ``p_cap`` above ``v_max``, and in between
    ``p_cap * logistic(shape * (v - v_mid))`` with ``v_mid`` the midpoint.
    The defaults are calibration knobs, not measured values.
    """

    v_min: float = 10.0
    v_max: float = 40.0
    p_cap: float = 0.15
    shape: float = 0.35

    def __post_init__(self):
        if not 0.0 <= self.p_cap <= 1.0:
            raise ValueError("p_cap must lie in [0, 1]")
        if self.v_max < self.v_min:
            raise ValueError("v_max must not be below v_min")
        if self.shape < 0:
            raise ValueError("shape must be non-negative")

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        mid = 0.5 * (self.v_min + self.v_max)
        p = self.p_cap / (1.0 + np.exp(-self.shape * (v - mid)))
        p = np.where(v < self.v_min, 0.0, p)
        return np.where(v > self.v_max, self.p_cap, p)


@dataclass(frozen=True)
class TreeFragilityModel:
    alpha: float = 1.0
    curve: FragilityCurve = field(default_factory=lambda: FragilityCurve(8.0, 35.0, 0.10, 0.4))

    def __post_init__(self):
        if self.alpha < 0 or self.alpha * self.curve.p_cap > 1.0:
            raise ValueError("tree mode probability alpha * p_cap must lie in [0, 1]")


def p_wind(c: FragilityCurve, v):
    out = c(v)
    return float(out) if out.ndim == 0 else out


def p_joint(m: TreeFragilityModel, c: FragilityCurve, v, t):
    """Failure probability with wind and falling trees as independent modes."""
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("tree cover must lie in [0, 1]")
    out = 1.0 - (1.0 - c(v)) * (1.0 - t * m.alpha * m.curve(v))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Fragility:
    wind: FragilityCurve = field(default_factory=FragilityCurve)
    tree: TreeFragilityModel = field(default_factory=TreeFragilityModel)

    def probability(self, v, t):
        return p_joint(self.tree, self.wind, v, t)


def failure_probabilities(g, field_speeds, frag: Fragility) -> np.ndarray:
    v = np.asarray(field_speeds)[g.patch]
    return np.asarray(frag.probability(v, g.tree_cover))


def sample_failures(g, field_speeds, intact, frag: Fragility, rng) -> np.ndarray:
    """Edge ids that fail this hour among the ``intact`` mask.

    One uniform draw is consumed per edge regardless of state so the stream
    position does not depend on earlier damage.
    """
    p = failure_probabilities(g, field_speeds, frag)
    u = rng.random(len(p))
    return np.flatnonzero(intact & (u < p))
