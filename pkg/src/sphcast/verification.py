"""Forecast verification: area-weighted RMSE, ACC, relative quantile error."""

from __future__ import annotations

import dataclasses
import math
import os
from typing import Sequence

import numpy as np

from .spherical import Grid, degree_spectrum, grid_for

STANDARD_PRESSURE_HPA = 1013.25
HIGH_QUANTILES = (0.90, 0.95, 0.99, 0.995, 0.999)
MASK_LAT = 60.0


def _weights(grid: Grid, shape) -> np.ndarray:
    w = np.broadcast_to(grid.area_weights[:, None], grid.shape)
    return np.broadcast_to(w / w.sum(), shape)


def _check(forecast, truth):
    f = np.asarray(forecast, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if f.shape != t.shape:
        raise ValueError(f"forecast shape {f.shape} does not match truth shape {t.shape}")
    return f, t


def rmse(forecast, truth, grid: Grid | None = None) -> float:
    """sqrt of the area-weighted mean squared difference of one field."""
    f, t = _check(forecast, truth)
    grid = grid or grid_for(f)
    grid.check_field(f)
    w = _weights(grid, f.shape)
    return math.sqrt(float((w * (f - t) ** 2).sum()))


def acc(forecast, truth, climatology, grid: Grid | None = None) -> float | None:
    """Area-weighted anomaly correlation; ``None`` when either anomaly has zero variance."""
    f, t = _check(forecast, truth)
    c = np.broadcast_to(np.asarray(climatology, dtype=np.float64), f.shape)
    grid = grid or grid_for(f)
    grid.check_field(f)
    w = _weights(grid, f.shape)
    fa, ta = f - c, t - c
    den = float((w * fa * fa).sum()) * float((w * ta * ta).sum())
    if den <= 0.0:
        return None
    return float(np.clip((w * fa * ta).sum() / math.sqrt(den), -1.0, 1.0))


def latitude_mask(grid: Grid, limit: float = MASK_LAT) -> np.ndarray:
    """Boolean (H, W) mask of cells whose center satisfies |lat| <= limit."""
    rows = np.abs(grid.lat_centers) <= limit
    return np.broadcast_to(rows[:, None], grid.shape)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    """Quantiles of weighted samples, interpolating between cumulative-weight midpoints."""
    values = np.asarray(values, dtype=np.float64).ravel()
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("quantile undefined on an empty sample")
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cum = np.cumsum(w)
    pos = (cum - 0.5 * w) / cum[-1]
    return np.interp(np.asarray(q, dtype=np.float64), pos, v)


def _tail_score(f, t, w, quantiles, low: bool) -> float | None:
    qs = np.asarray(quantiles, dtype=np.float64)
    if low:
        qs = 1.0 - qs
    qf = weighted_quantile(f, w, qs)
    qt = weighted_quantile(t, w, qs)
    keep = qt != 0.0
    if not keep.any():
        return None
    diff = (qt - qf) if low else (qf - qt)
    return float(np.mean(diff[keep] / np.abs(qt[keep])))


def rqe(forecast, truth, grid: Grid | None = None, tail: str = "high",
        quantiles: Sequence[float] = HIGH_QUANTILES, mask_lat: float = MASK_LAT) -> float | None:
    """Relative quantile error over cells with |lat| <= ``mask_lat``.

    Positive means the forecast tail is more extreme than the truth tail.
    Quantiles whose truth value is exactly zero are skipped; ``None`` is
    returned if none remain.
    """
    if tail not in ("high", "low", "both"):
        raise ValueError(f"tail must be high, low or both, got {tail!r}")
    f, t = _check(forecast, truth)
    grid = grid or grid_for(f)
    grid.check_field(f)
    mask = latitude_mask(grid, mask_lat)
    if not mask.any():
        raise ValueError("latitude mask selects no cells")
    need = round(1.0 / (1.0 - max(quantiles)))
    if mask.sum() < need:
        raise ValueError(f"{int(mask.sum())} masked cells cannot resolve quantile {max(quantiles)} (need {need})")
    w = _weights(grid, grid.shape)[mask]
    fm, tm = f[..., mask], t[..., mask]
    if fm.ndim > 1:  # pool several fields that share the grid
        fm, tm = fm.reshape(-1), tm.reshape(-1)
        w = np.tile(w, f.size // f.shape[-1] // f.shape[-2])
    scores = []
    if tail in ("high", "both"):
        scores.append(_tail_score(fm, tm, w, quantiles, low=False))
    if tail in ("low", "both"):
        scores.append(_tail_score(fm, tm, w, quantiles, low=True))
    scores = [s for s in scores if s is not None]
    return float(np.mean(scores)) if scores else None


# derived variables ------------------------------------------------------------------------


def wind_speed(u, v) -> np.ndarray:
    return np.hypot(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))


def mslp_departure(p, unit: str = "hPa") -> np.ndarray:
    if unit != "hPa":
        raise ValueError(f"pressure must be in hPa, got {unit!r}")
    return np.asarray(p, dtype=np.float64) - STANDARD_PRESSURE_HPA


def anomaly(x, climatology) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) - np.asarray(climatology, dtype=np.float64)


def derive(fields: dict[str, np.ndarray], units: dict[str, str] | None = None) -> dict[str, np.ndarray]:
    """Wind speed from ``u``/``v`` and pressure departure from ``sp`` when present."""
    units = units or {}
    out = {}
    if "u" in fields and "v" in fields:
        out["wind_speed"] = wind_speed(fields["u"], fields["v"])
    if "sp" in fields:
        out["mslp_departure"] = mslp_departure(fields["sp"], units.get("sp", "hPa"))
    return out


# run evaluation -------------------------------------------------------------------------


@dataclasses.dataclass
class EvalSpec:
    quantiles: tuple = HIGH_QUANTILES
    mask_lat: float = MASK_LAT
    rqe_tail: str = "both"
    n_initial_conditions: int = 16
    climatology_id: str = "truth-mean"


@dataclasses.dataclass
class MetricRow:
    variable: str
    lead_hours: int
    rmse: float
    acc: float | None
    rqe: float | None


@dataclasses.dataclass
class MetricReport:
    rows: list[MetricRow]
    metadata: dict

    def __post_init__(self):
        for r in self.rows:
            if r.rmse < 0 or (r.acc is not None and not -1.0 <= r.acc <= 1.0):
                raise ValueError(f"metric out of range for {r.variable} at {r.lead_hours} h")

    def get(self, variable: str, lead_hours: int) -> MetricRow:
        for r in self.rows:
            if r.variable == variable and r.lead_hours == lead_hours:
                return r
        raise KeyError((variable, lead_hours))

    def lines(self) -> list[str]:
        out = [f"# {k} = {v}" for k, v in sorted(self.metadata.items())]
        for r in self.rows:
            for name in ("rmse", "acc", "rqe"):
                value = getattr(r, name)
                out.append(f"{r.variable}, {r.lead_hours}, {name}, {'undefined' if value is None else repr(value)}")
        return out

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")


def read_report(path) -> MetricReport:
    meta, table = {}, {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                meta[k.strip()] = v.strip()
                continue
            var, lead, name, value = (p.strip() for p in line.split(","))
            table.setdefault((var, int(lead)), {})[name] = None if value == "undefined" else float(value)
    rows = [MetricRow(v, lead, d["rmse"], d.get("acc"), d.get("rqe")) for (v, lead), d in table.items()]
    return MetricReport(rows, meta)


def evaluate_run(forecasts, truths, climatology, names: Sequence[str], grid: Grid | None = None,
                 spec: EvalSpec | None = None, forecast_times=None, truth_times=None,
                 step_hours: int = 6) -> MetricReport:
    """Metrics per variable and lead time for one forecast sequence.

    forecasts, truths: (K, C, H, W), entry k valid at lead (k + 1) steps.
    climatology: (C, H, W).
    """
    spec = spec or EvalSpec()
    f = np.asarray(forecasts, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if f.shape != t.shape or f.ndim != 4:
        raise ValueError(f"forecast {f.shape} and truth {t.shape} sequences are misaligned")
    if f.shape[1] != len(names):
        raise ValueError(f"{f.shape[1]} channels but {len(names)} variable names")
    if forecast_times is not None or truth_times is not None:
        if forecast_times is None or truth_times is None or not np.array_equal(
                np.asarray(forecast_times), np.asarray(truth_times)):
            raise ValueError("forecast and truth valid times differ")
    clim = np.asarray(climatology, dtype=np.float64)
    grid = grid or grid_for(f)
    rows = []
    for c, name in enumerate(names):
        for k in range(len(f)):
            rows.append(MetricRow(
                name, (k + 1) * step_hours,
                rmse(f[k, c], t[k, c], grid),
                acc(f[k, c], t[k, c], clim[c], grid),
                rqe(f[k, c], t[k, c], grid, spec.rqe_tail, spec.quantiles, spec.mask_lat),
            ))
    meta = {"mask_lat": spec.mask_lat, "quantiles": ",".join(str(q) for q in spec.quantiles),
            "rqe_tail": spec.rqe_tail, "climatology": spec.climatology_id}
    return MetricReport(rows, meta)


def climatology_id(path) -> str:
    return f"time-mean:{os.path.basename(str(path))}"


def evenly_spaced(n_available: int, n: int) -> np.ndarray:
    """Indices of ``n`` initial conditions spread evenly over ``n_available``."""
    if n_available <= 0:
        raise ValueError("no initial conditions available")
    n = min(n, n_available)
    return np.unique(np.linspace(0, n_available - 1, n).round().astype(int))


# spectra and images -------------------------------------------------------------------------


def energy_spectrum(field, l_max: int | None = None) -> np.ndarray:
    """Energy per spherical-harmonic degree; averages over any leading axes."""
    field = np.asarray(field, dtype=np.float64)
    spec = degree_spectrum(field, l_max)
    return spec.reshape(-1, spec.shape[-1]).mean(axis=0)


def high_band(l_max: int) -> np.ndarray:
    """Degrees in the top third of 0..l_max."""
    return np.arange(l_max + 1)[np.arange(l_max + 1) > 2 * l_max / 3]


def high_band_ratio(spectrum_a, spectrum_b, l_max: int) -> float:
    """Mean over the top-third degrees of spectrum_a / spectrum_b."""
    band = high_band(l_max)
    a, b = np.asarray(spectrum_a)[band], np.asarray(spectrum_b)[band]
    return float(np.mean(a / b))


def write_pixmap(path, field, vmin: float | None = None, vmax: float | None = None) -> None:
    """Binary grayscale portable pixmap (P5) of a 2-D field, north at the top."""
    x = np.asarray(field, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("pixmap dump needs a 2-D field")
    lo = x.min() if vmin is None else vmin
    hi = x.max() if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip(np.round((x - lo) * scale), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{x.shape[1]} {x.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
