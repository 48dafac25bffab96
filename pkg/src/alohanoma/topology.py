"""Device deployments, base-station placement, and nearest-BS association.

Coordinates are meters. Point sets are float64 arrays of shape (n, 2), one
(x, y) row per point. All generators are pure functions of their arguments
and seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def generate_uniform_deployment(n: int, half_side: float, seed) -> np.ndarray:
    """Draw n points i.i.d. uniform on the square [-half_side, half_side]^2."""
    if n < 1:
        raise ValueError(f"need at least one device, got n={n}")
    if half_side <= 0:
        raise ValueError(f"half_side must be positive, got {half_side}")
    rng = np.random.default_rng(seed)
    return rng.uniform(-half_side, half_side, size=(n, 2))


def generate_mesh_deployment(n: int, half_side: float) -> np.ndarray:
    """Place n devices on a cell-centered sqrt(n) x sqrt(n) grid.

    Grid coordinates along each axis are (2k + 1 - sqrt(n)) * half_side / sqrt(n)
    for k = 0..sqrt(n)-1, so no device sits on the square boundary and the grid
    is symmetric about the origin.
    """
    if n < 1:
        raise ValueError(f"need at least one device, got n={n}")
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"mesh deployment needs a perfect square, got n={n}")
    if half_side <= 0:
        raise ValueError(f"half_side must be positive, got {half_side}")
    k = np.arange(side)
    axis = (2 * k + 1 - side) * (half_side / side)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()]).astype(float)


def _assign_clusters(devices: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((devices[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)  # argmin takes the lowest index on ties


def place_bs_lloyd(
    devices: np.ndarray,
    m: int,
    seed,
    max_iters: int = 100,
    return_objectives: bool = False,
):
    """Place m base stations at Lloyd (k-means) centroids of the devices.

    Centroids start at m distinct devices chosen uniformly by seed and iterate
    until assignments stabilize or max_iters is reached. An empty cluster is
    reseeded to the device farthest from that cluster's current centroid,
    keeping exactly m clusters.

    With return_objectives=True also returns the per-iteration sum of squared
    distances to the assigned centroid (non-increasing).
    """
    devices = np.asarray(devices, dtype=float)
    n = devices.shape[0]
    if m < 1:
        raise ValueError(f"need at least one base station, got m={m}")
    if m > n:
        raise ValueError(f"cannot place m={m} base stations for {n} devices")
    rng = np.random.default_rng(seed)
    centroids = devices[rng.choice(n, size=m, replace=False)].copy()

    objectives = []
    assignment = None
    for _ in range(max_iters):
        new_assignment = _assign_clusters(devices, centroids)
        for c in range(m):
            members = devices[new_assignment == c]
            if len(members) == 0:
                far = ((devices - centroids[c]) ** 2).sum(axis=1).argmax()
                centroids[c] = devices[far]
                new_assignment = _assign_clusters(devices, centroids)
                members = devices[new_assignment == c]
            centroids[c] = members.mean(axis=0)
        objectives.append(
            float(((devices - centroids[new_assignment]) ** 2).sum())
        )
        if assignment is not None and np.array_equal(assignment, new_assignment):
            break
        assignment = new_assignment

    if return_objectives:
        return centroids, objectives
    return centroids


def associate_nearest(devices: np.ndarray, base_stations: np.ndarray) -> np.ndarray:
    """Index of the nearest base station per device, lowest index on ties."""
    devices = np.asarray(devices, dtype=float)
    base_stations = np.asarray(base_stations, dtype=float)
    if devices.size == 0:
        raise ValueError("device list is empty")
    if base_stations.size == 0:
        raise ValueError("base station list is empty")
    return _assign_clusters(devices, base_stations)


@dataclass
class Topology:
    """A deployment: device and BS coordinates plus nearest-BS association."""

    devices: np.ndarray
    base_stations: np.ndarray
    association: np.ndarray = field(default=None)

    def __post_init__(self):
        self.devices = np.asarray(self.devices, dtype=float)
        self.base_stations = np.asarray(self.base_stations, dtype=float)
        if not np.isfinite(self.devices).all() or not np.isfinite(self.base_stations).all():
            raise ValueError("coordinates must be finite")
        if self.association is None:
            self.association = associate_nearest(self.devices, self.base_stations)
        else:
            self.association = np.asarray(self.association, dtype=int)
            if self.association.shape != (len(self.devices),):
                raise ValueError("association length must match device count")

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def n_base_stations(self) -> int:
        return len(self.base_stations)

    def distances(self) -> np.ndarray:
        """Device-to-BS Euclidean distance matrix, shape (N, M)."""
        diff = self.devices[:, None, :] - self.base_stations[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))

    def to_json(self) -> str:
        return json.dumps(
            {
                "devices": self.devices.tolist(),
                "base_stations": self.base_stations.tolist(),
                "association": self.association.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        doc = json.loads(text)
        return cls(
            devices=np.array(doc["devices"], dtype=float),
            base_stations=np.array(doc["base_stations"], dtype=float),
            association=np.array(doc["association"], dtype=int),
        )
