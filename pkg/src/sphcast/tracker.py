"""Minimum-pressure storm tracking on forecast sequences."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .spherical import Grid, grid_for

THRESHOLD_HPA = 998.0
DEFAULT_RADIUS_DEG = 4.5


@dataclasses.dataclass
class TrackPoint:
    valid_time: int
    lat: float
    lon: float
    pressure: float  # hPa
    i: int
    j: int
    terminated: bool = False
    reason: str = ""

    def __post_init__(self):
        if not self.pressure > 0:
            raise ValueError(f"nonpositive central pressure {self.pressure}")

    def line(self) -> str:
        return f"{self.valid_time}, {self.lat!r}, {self.lon!r}, {self.pressure!r}"


def great_circle_deg(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Central angle in degrees (haversine form)."""
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dlat, dlon = p2 - p1, np.deg2rad(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dlat / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlon / 2) ** 2
    return np.rad2deg(2 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0))))


def grid_index(grid: Grid, lat: float, lon: float, tol: float = 1e-6) -> tuple[int, int]:
    """Indices of the grid point at (lat, lon); raises if it is not a cell center."""
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} outside the grid")
    lon = lon % 360.0
    i = int(np.argmin(np.abs(grid.lat_centers - lat)))
    dl = np.abs((grid.lon_centers - lon + 180.0) % 360.0 - 180.0)
    j = int(np.argmin(dl))
    if abs(grid.lat_centers[i] - lat) > tol or dl[j] > tol:
        raise ValueError(f"({lat}, {lon}) is not a grid point")
    return i, j


def min_radius(grid: Grid) -> float:
    """One cell in latitude, the smallest admissible search radius."""
    return 180.0 / grid.n_lat


def track(fields, start: tuple[float, float], radius: float = DEFAULT_RADIUS_DEG, grid: Grid | None = None,
          times: Sequence[int] | None = None, threshold: float = THRESHOLD_HPA) -> list[TrackPoint]:
    """Follow the pressure minimum through (K, H, W) fields in hPa.

    At step k the center is the minimum within ``radius`` degrees of the
    previous center (the start position for k = 0). The track stops before
    the first step whose minimum exceeds ``threshold``.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 3:
        raise ValueError("expected a (steps, n_lat, n_lon) pressure sequence")
    grid = grid or grid_for(fields)
    grid.check_field(fields)
    if radius < min_radius(grid) - 1e-12:
        raise ValueError(f"search radius {radius} deg is below one cell ({min_radius(grid)} deg)")
    times = list(range(len(fields))) if times is None else list(times)
    if len(times) != len(fields):
        raise ValueError("one valid time per field required")
    lat2d = np.broadcast_to(grid.lat_centers[:, None], grid.shape)
    lon2d = np.broadcast_to(grid.lon_centers[None, :], grid.shape)
    ii, jj = np.indices(grid.shape)
    pi, pj = grid_index(grid, *start)
    points: list[TrackPoint] = []
    for k, field in enumerate(fields):
        dist = great_circle_deg(grid.lat_centers[pi], grid.lon_centers[pj], lat2d, lon2d)
        inside = dist <= radius + 1e-9
        p = field[inside]
        best = p.min()
        cand = np.flatnonzero(p == best)
        # ties: nearest to the previous center, then lowest row, then lowest column
        key = np.lexsort((jj[inside][cand], ii[inside][cand], dist[inside][cand]))
        c = cand[key[0]]
        ci, cj = int(ii[inside][c]), int(jj[inside][c])
        if best > threshold:
            if points:
                points[-1].terminated = True
                points[-1].reason = f"central pressure {best:.2f} hPa above {threshold} hPa at next step"
            return points
        points.append(TrackPoint(times[k], float(grid.lat_centers[ci]), float(grid.lon_centers[cj]),
                                 float(best), ci, cj))
        pi, pj = ci, cj
    if points:
        points[-1].terminated = True
        points[-1].reason = "end of sequence"
    return points


def write_track(path, points: Sequence[TrackPoint]) -> None:
    with open(path, "w") as fh:
        for p in points:
            fh.write(p.line() + "\n")
