"""Point sensors, the empirical inner product and measurement noise."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import IncompatibleOperandsError, InvalidArgumentError


@dataclass(eq=False)
class SensorSet:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise InvalidArgumentError("sensor points must have shape (n, 2)")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(eq=False)
class Observation:
    values: np.ndarray
    sigma: float
    seed: Optional[int]

    @property
    def n(self) -> int:
        return self.values.shape[0]


def make_sensor_grid(k: int) -> SensorSet:
    """``k * k`` cell-centred sensors ``((i - 1/2)/k, (j - 1/2)/k)``, x1 varying fastest."""
    if int(k) != k or k < 2:
        raise InvalidArgumentError(f"sensor grid size must be an integer >= 2, got {k!r}")
    k = int(k)
    ticks = (np.arange(k) + 0.5) / k
    x1, x2 = np.meshgrid(ticks, ticks)
    return SensorSet(np.column_stack([x1.ravel(), x2.ravel()]))


def uniformity_ratio(sensors: SensorSet, probe_resolution: int = 200) -> float:
    """Return ``d_max / d_min`` for the sensor cloud.

    ``d_min`` is the exact smallest pairwise distance. ``d_max``, the largest
    distance from a point of the domain to its nearest sensor, is taken as a
    maximum over a ``(probe_resolution + 1)^2`` grid that includes the
    boundary. Coincident sensors give ``inf``.
    """
    if sensors.n < 2:
        raise InvalidArgumentError("uniformity ratio needs at least two sensors")
    tree = cKDTree(sensors.points)
    dist, _ = tree.query(sensors.points, k=2)
    d_min = float(dist[:, 1].min())
    ticks = np.linspace(0.0, 1.0, int(probe_resolution) + 1)
    p1, p2 = np.meshgrid(ticks, ticks)
    probes = np.column_stack([p1.ravel(), p2.ravel()])
    d_max = float(tree.query(probes, k=1)[0].max())
    if d_min == 0.0:
        return float("inf")
    return d_max / d_min


def empirical_inner(u_vals: np.ndarray, v_vals: np.ndarray) -> float:
    u = np.asarray(u_vals, dtype=float)
    v = np.asarray(v_vals, dtype=float)
    if u.shape != v.shape or u.ndim != 1:
        raise IncompatibleOperandsError(f"sensor vectors differ in shape: {u.shape} vs {v.shape}")
    return float(u @ v) / u.shape[0]


def empirical_norm(u_vals: np.ndarray) -> float:
    return float(np.sqrt(empirical_inner(u_vals, u_vals)))


def add_noise(
    clean: np.ndarray,
    sigma: float,
    seed: Optional[int] = None,
    distribution: str = "gaussian",
) -> Observation:
    """Add i.i.d. zero-mean noise of standard deviation ``sigma``.

    Draws come from ``numpy.random.default_rng(seed)`` (PCG64). ``"uniform"``
    noise is supported on ``[-sqrt(3) sigma, sqrt(3) sigma]``, which has the same
    variance.
    """
    if sigma < 0:
        raise InvalidArgumentError("sigma must be non-negative")
    clean = np.asarray(clean, dtype=float)
    rng = np.random.default_rng(seed)
    if distribution == "gaussian":
        e = rng.normal(0.0, 1.0, size=clean.shape)
    elif distribution == "uniform":
        e = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=clean.shape)
    else:
        raise InvalidArgumentError(f"unknown noise distribution {distribution!r}")
    return Observation(values=clean + sigma * e, sigma=float(sigma), seed=seed)


def noise_to_signal(obs: Observation, clean: np.ndarray) -> float:
    """Diagnostic ``sigma / ||clean||_n``."""
    return obs.sigma / empirical_norm(clean)


def write_observation_csv(path, sensors: SensorSet, obs: Observation) -> None:
    if sensors.n != obs.n:
        raise IncompatibleOperandsError("observation length does not match sensor count")
    with open(path, "w", newline="") as fh:
        fh.write(f"# n={obs.n},sigma={obs.sigma!r},seed={obs.seed}\n")
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "value"])
        for (x1, x2), val in zip(sensors.points, obs.values):
            w.writerow([repr(float(x1)), repr(float(x2)), repr(float(val))])


def read_observation_csv(path) -> tuple[SensorSet, Observation]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise InvalidArgumentError(f"{path}: missing '# n=...,sigma=...,seed=...' header")
    meta = dict(item.split("=", 1) for item in text[0][1:].strip().split(","))
    rows = list(csv.DictReader(text[1:]))
    pts = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
    vals = np.array([float(r["value"]) for r in rows])
    if len(rows) != int(meta["n"]):
        raise InvalidArgumentError(f"{path}: header says n={meta['n']} but found {len(rows)} rows")
    seed = None if meta["seed"] == "None" else int(meta["seed"])
    return SensorSet(pts), Observation(values=vals, sigma=float(meta["sigma"]), seed=seed)
