"""Stochastic thunderstorm scenarios as hourly wind-speed fields over a patch grid."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .geo import PatchGrid, PlanarPoint


@dataclass(frozen=True)
class WindDistribution:
    """Log-normal wind speed model (parameters of ln(speed in m/s))."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def sample(self, rng, size=None):
        return rng.lognormal(self.mu, self.sigma, size)


@dataclass
class WeatherConfig:
    gust_hour_fraction: float = 0.25
    min_duration_h: int = 4
    max_duration_h: int = 12
    idw_power: float = 2.0


def fit_lognormal(samples) -> WindDistribution:
    """Maximum-likelihood log-normal fit (population std of the logs)."""
    s = np.asarray(samples, dtype=float)
    if s.size < 2:
        raise ValueError("need at least two samples")
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("wind speeds must be positive and finite")
    logs = np.log(s)
    sigma = float(logs.std())
    if sigma == 0.0:
        raise ValueError("degenerate samples: zero spread in log space")
    return WindDistribution(float(logs.mean()), sigma)


def read_wind_samples(path=None):
    """Return ``(gust_speeds, sustained_speeds)`` from a ``speed_mps,is_gust`` CSV.

    Without a path, the bundled sample file is used.
    """
    if path is None:
        fh = resources.files("resilisim.data").joinpath("wind_samples.csv").open()
    else:
        fh = open(path, newline="")
    gust, sustained = [], []
    with fh:
        for row in csv.DictReader(fh):
            (gust if row["is_gust"].strip() == "1" else sustained).append(float(row["speed_mps"]))
    return np.array(gust), np.array(sustained)


def default_distributions(path=None) -> tuple[WindDistribution, WindDistribution]:
    gust, sustained = read_wind_samples(path)
    return fit_lognormal(gust), fit_lognormal(sustained)


@dataclass(frozen=True)
class StormScenario:
    duration: int
    hourly_fields: np.ndarray  # (duration, n_patches) m/s
    sample_xy: np.ndarray  # (duration, n_areas, 2)
    sample_speed: np.ndarray  # (duration, n_areas)
    sample_gust: np.ndarray  # (duration, n_areas) bool
    gust_events: tuple  # ((patch, hour), ...)

    @property
    def area_gust(self) -> np.ndarray:
        return self.sample_gust.any(axis=0)

    @property
    def sample_points(self):
        """Per hour, the sparse samples as ``(PlanarPoint, speed, is_gust)``."""
        return [[(PlanarPoint(*map(float, self.sample_xy[h, a])), float(self.sample_speed[h, a]),
                  bool(self.sample_gust[h, a])) for a in range(self.sample_speed.shape[1])]
                for h in range(self.duration)]


def sample_storm(area_positions, grid: PatchGrid, gust: WindDistribution,
                 sustained: WindDistribution, cfg: WeatherConfig | None, rng) -> StormScenario:
    """Draw one storm.

    ``area_positions`` lists, per substation area, the candidate points a
    sample location is drawn from (one uniformly chosen point per area and
    hour). A stochastically rounded ``gust_hour_fraction`` share of the
    (area, hour) cells is flagged as gust, placed uniformly at random.
    """
    cfg = cfg or WeatherConfig()
    n_areas = len(area_positions)
    duration = int(rng.integers(cfg.min_duration_h, cfg.max_duration_h + 1))
    cells = n_areas * duration
    expected = cfg.gust_hour_fraction * cells
    k = int(math.floor(expected))
    if rng.random() < expected - k:
        k += 1
    flagged = np.zeros(cells, dtype=bool)
    if k:
        flagged[rng.choice(cells, size=k, replace=False)] = True
    flagged = flagged.reshape(duration, n_areas)

    xy = np.empty((duration, n_areas, 2))
    for h in range(duration):
        for a, pos in enumerate(area_positions):
            xy[h, a] = pos[rng.integers(len(pos))]
    speed = np.where(flagged, gust.sample(rng, flagged.shape), sustained.sample(rng, flagged.shape))

    fields = np.empty((duration, grid.n_patches))
    for h in range(duration):
        fields[h] = interpolate(xy[h], speed[h], grid, cfg.idw_power)
    events = []
    for h, a in zip(*np.nonzero(flagged)):
        p = int(grid.patches_of(xy[h, a, 0], xy[h, a, 1]))
        events.append((p, int(h)))
    return StormScenario(duration, fields, xy, speed, flagged, tuple(events))


def interpolate(points, speeds, grid: PatchGrid, power: float = 2.0) -> np.ndarray:
    """Inverse-distance-weighted speed at every patch centre.

    A patch that contains sample points takes their (mean) value exactly.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    v = np.asarray(speeds, dtype=float).ravel()
    if len(v) == 0:
        raise ValueError("need at least one sample point")
    centers = grid.centers()
    d2 = ((centers[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(divide="ignore"):
        w = d2 ** (-power / 2.0)
    home = grid.patches_of(pts[:, 0], pts[:, 1])
    # sample-holding patches are overwritten below; keep their weights finite
    w[~np.isfinite(w)] = 0.0
    total = w.sum(axis=1)
    out = np.divide(w @ v, total, out=np.full(len(centers), v.mean()), where=total > 0)
    sums = np.bincount(home, weights=v, minlength=grid.n_patches)
    counts = np.bincount(home, minlength=grid.n_patches)
    hit = counts > 0
    out[hit] = sums[hit] / counts[hit]
    # rounding guard; the weighted mean is already a convex combination
    return np.clip(out, v.min(), v.max())


def wind_at(s: StormScenario, patch: int, hour: int) -> float:
    if not 0 <= hour < s.duration:
        raise IndexError(f"hour {hour} outside storm of {s.duration} h")
    return float(s.hourly_fields[hour, patch])
