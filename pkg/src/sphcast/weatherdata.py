"""Variable registry, dataset files, normalization, synthetic data, solar geometry."""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Sequence

import numpy as np

from .container import FormatError, names_checksum, read_container, write_container
from .spherical import Grid, HarmonicCoeffs, get_transform, max_degree, sht_synthesis

TIMESTEP_SECONDS = 21600
DATASET_MAGIC = b"KYWX"
STATS_MAGIC = b"KYST"

ITERATED = "iterated"
OUTPUT = "output"
STATIC = "static"
TEMPORAL = "temporal"
ROLES = (ITERATED, OUTPUT, STATIC, TEMPORAL)


@dataclasses.dataclass(frozen=True)
class VariableSpec:
    name: str
    role: str
    unit: str = "1"
    mean: float = 0.0
    std: float = 1.0
    weight: float = 1.0


class VariableRegistry:
    """Ordered variables; iterated first, then output-only, static, temporal."""

    def __init__(self, variables: Iterable[VariableSpec]):
        variables = list(variables)
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")
        for v in variables:
            if v.role not in ROLES:
                raise ValueError(f"{v.name}: unknown role {v.role!r}")
            if not (v.std > 0 and math.isfinite(v.std)):
                raise ValueError(f"{v.name}: normalization std must be positive, got {v.std}")
            if v.weight < 0:
                raise ValueError(f"{v.name}: negative loss weight")
        ranks = [ROLES.index(v.role) for v in variables]
        if ranks != sorted(ranks):
            raise ValueError("variables must be ordered iterated, output, static, temporal")
        self.variables = tuple(variables)

    def __iter__(self):
        return iter(self.variables)

    def __len__(self):
        return len(self.variables)

    def __eq__(self, other):
        return isinstance(other, VariableRegistry) and self.variables == other.variables

    def by_role(self, *roles: str) -> list[VariableSpec]:
        return [v for v in self.variables if v.role in roles]

    def names(self, *roles: str) -> list[str]:
        return [v.name for v in (self.by_role(*roles) if roles else self.variables)]

    @property
    def state_names(self) -> list[str]:
        """Channels stored in datasets and predicted by the model."""
        return self.names(ITERATED, OUTPUT)

    @property
    def n_iterated(self) -> int:
        return len(self.by_role(ITERATED))

    @property
    def n_output(self) -> int:
        return len(self.by_role(OUTPUT))

    def index(self, name: str) -> int:
        return self.names().index(name)

    def checksum(self) -> str:
        return names_checksum(self.names())

    def stats(self, *roles: str) -> tuple[np.ndarray, np.ndarray]:
        vs = self.by_role(*roles)
        return (np.array([v.mean for v in vs]), np.array([v.std for v in vs]))

    def with_stats(self, means: dict[str, float], stds: dict[str, float]) -> "VariableRegistry":
        return VariableRegistry(
            dataclasses.replace(v, mean=float(means.get(v.name, v.mean)), std=float(stds.get(v.name, v.std)))
            for v in self.variables
        )

    def to_json(self) -> list[dict]:
        return [dataclasses.asdict(v) for v in self.variables]

    @classmethod
    def from_json(cls, items) -> "VariableRegistry":
        return cls(VariableSpec(**item) for item in items)


def default_registry() -> VariableRegistry:
    """Desk-scale registry: six iterated, two output-only, terrain, solar set."""
    return VariableRegistry([
        VariableSpec("z", ITERATED, "m2 s-2", 54000.0, 3000.0),
        VariableSpec("t", ITERATED, "K", 260.0, 20.0),
        VariableSpec("r", ITERATED, "%", 60.0, 20.0),
        VariableSpec("u", ITERATED, "m s-1", 5.0, 10.0),
        VariableSpec("v", ITERATED, "m s-1", 0.0, 10.0),
        VariableSpec("sp", ITERATED, "hPa", 1010.0, 10.0),
        VariableSpec("10w", OUTPUT, "m s-1", 8.0, 5.0),
        VariableSpec("tp", OUTPUT, "mm", 0.5, 1.0),
        VariableSpec("orog", STATIC, "m", 0.0, 1000.0),
        VariableSpec("sun_lon", TEMPORAL, "rad", math.pi, math.pi),
        VariableSpec("sun_dist", TEMPORAL, "au", 1.0, 0.0167),
        VariableSpec("hour_angle", TEMPORAL, "rad", 0.0, math.pi),
        VariableSpec("cos_zenith", TEMPORAL, "1", 0.0, 0.5),
    ])


# normalization ----------------------------------------------------------------


def normalize(state: np.ndarray, registry: VariableRegistry, *roles: str) -> np.ndarray:
    """(x - mean) / std per channel along axis -3 for the given roles' channels."""
    mean, std = registry.stats(*(roles or (ITERATED, OUTPUT)))
    if state.shape[-3] != mean.size:
        raise ValueError(f"state has {state.shape[-3]} channels, registry lists {mean.size}")
    return (state - mean[:, None, None]) / std[:, None, None]


def denormalize(state: np.ndarray, registry: VariableRegistry, *roles: str) -> np.ndarray:
    mean, std = registry.stats(*(roles or (ITERATED, OUTPUT)))
    if state.shape[-3] != mean.size:
        raise ValueError(f"state has {state.shape[-3]} channels, registry lists {mean.size}")
    return state * std[:, None, None] + mean[:, None, None]


# dataset files ------------------------------------------------------------------


@dataclasses.dataclass
class Dataset:
    """Samples of the stored (iterated + output-only) channels on one grid."""

    registry: VariableRegistry
    grid: Grid
    timestamps: np.ndarray  # int64 seconds since 1970-01-01 UTC
    data: np.ndarray  # (N, C, H, W) float32
    static: np.ndarray  # (S, H, W) float32
    timestep: int = TIMESTEP_SECONDS

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n_state = len(self.registry.state_names)
        if self.data.ndim != 4 or self.data.shape[1] != n_state:
            raise ValueError(f"data shape {self.data.shape} does not match {n_state} state channels")
        if self.data.shape[2:] != self.grid.shape:
            raise ValueError(f"data grid {self.data.shape[2:]} does not match {self.grid.shape}")
        if self.static.shape != (len(self.registry.by_role(STATIC)),) + self.grid.shape:
            raise ValueError(f"static block shape {self.static.shape} does not match registry")
        if len(self.timestamps) != len(self.data):
            raise ValueError("one timestamp per sample required")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) != self.timestep):
            raise ValueError("timestamps must increase by exactly one timestep")

    def __len__(self):
        return len(self.data)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.registry == other.registry and self.grid == other.grid
                and self.timestep == other.timestep
                and np.array_equal(self.timestamps, other.timestamps)
                and self.data.tobytes() == other.data.tobytes()
                and self.static.tobytes() == other.static.tobytes())

    def channel(self, name: str) -> np.ndarray:
        return self.data[:, self.registry.state_names.index(name)]


def write_dataset(ds: Dataset, path) -> None:
    header = {
        "kind": "dataset",
        "n_lat": ds.grid.n_lat,
        "n_lon": ds.grid.n_lon,
        "n_samples": len(ds),
        "timestep_seconds": int(ds.timestep),
        "variables": ds.registry.to_json(),
        "names_checksum": ds.registry.checksum(),
    }
    write_container(path, DATASET_MAGIC, header, {
        "timestamps": ds.timestamps.astype("<i8"),
        "static": ds.static.astype("<f4"),
        "data": ds.data.astype("<f4"),
    })


def read_dataset(path) -> Dataset:
    header, blocks = read_container(path, DATASET_MAGIC)
    registry = VariableRegistry.from_json(header["variables"])
    if registry.checksum() != header.get("names_checksum"):
        raise FormatError(f"{path}: variable-name checksum mismatch")
    n, h, w = header["n_samples"], header["n_lat"], header["n_lon"]
    c = len(registry.state_names)
    data = blocks["data"]
    if data.shape != (n, c, h, w):
        raise FormatError(f"{path}: payload shape {data.shape} does not match header ({n}, {c}, {h}, {w})")
    ts = blocks["timestamps"]
    if len(ts) > 1 and np.any(np.diff(ts) <= 0):
        raise FormatError(f"{path}: timestamps are not strictly increasing")
    if len(ts) > 1 and np.any(np.diff(ts) != header["timestep_seconds"]):
        raise FormatError(f"{path}: timestamps do not follow the declared timestep")
    return Dataset(registry, Grid(h), ts, data.astype(np.float32), blocks["static"].astype(np.float32),
                   header["timestep_seconds"])


# statistics sidecar ----------------------------------------------------------------


@dataclasses.dataclass
class Statistics:
    registry: VariableRegistry
    sigma: np.ndarray  # (n_state, T_max), +inf allowed

    def sigma_for(self, k: int) -> np.ndarray:
        return self.sigma[:, k - 1]


def write_statistics(stats: Statistics, path) -> None:
    header = {"kind": "statistics", "variables": stats.registry.to_json(),
              "names_checksum": stats.registry.checksum(),
              "sigma_variables": stats.registry.state_names}
    write_container(path, STATS_MAGIC, header, {"sigma": stats.sigma.astype("<f8")})


def read_statistics(path) -> Statistics:
    header, blocks = read_container(path, STATS_MAGIC)
    registry = VariableRegistry.from_json(header["variables"])
    if registry.checksum() != header.get("names_checksum"):
        raise FormatError(f"{path}: variable-name checksum mismatch")
    return Statistics(registry, blocks["sigma"])


# climatology ------------------------------------------------------------------------


def climatology(data: np.ndarray, window: slice | Sequence[int] | None = None) -> np.ndarray:
    """Per-channel, per-cell arithmetic mean over the samples in ``window``."""
    data = np.asarray(data)
    sel = data if window is None else data[window]
    if len(sel) == 0:
        raise ValueError("climatology window selects no samples")
    return sel.astype(np.float64).mean(axis=0)


# solar geometry ------------------------------------------------------------------------


def julian_day(timestamp) -> np.ndarray:
    return np.asarray(timestamp, dtype=np.float64) / 86400.0 + 2440587.5


@dataclasses.dataclass
class SunPosition:
    ecliptic_longitude: float  # rad, in [0, 2 pi)
    distance: float  # au
    declination: float  # rad
    right_ascension: float  # rad
    gmst: float  # rad
    equation_of_time: float  # rad of hour angle


def sun_position(timestamp) -> SunPosition:
    """Low-precision solar ephemeris (accuracy ~0.01 degree over 1950-2050)."""
    n = float(julian_day(timestamp)) - 2451545.0
    L = math.radians((280.460 + 0.9856474 * n) % 360.0)
    g = math.radians((357.528 + 0.9856003 * n) % 360.0)
    lam = L + math.radians(1.915) * math.sin(g) + math.radians(0.020) * math.sin(2 * g)
    lam %= 2 * math.pi
    dist = 1.00014 - 0.01671 * math.cos(g) - 0.00014 * math.cos(2 * g)
    eps = math.radians(23.439 - 0.0000004 * n)
    dec = math.asin(math.sin(eps) * math.sin(lam))
    ra = math.atan2(math.cos(eps) * math.sin(lam), math.cos(lam)) % (2 * math.pi)
    gmst = math.radians((280.46061837 + 360.98564736629 * n) % 360.0)
    eot = (L - ra + math.pi) % (2 * math.pi) - math.pi
    return SunPosition(lam, dist, dec, ra, gmst, eot)


def hour_angle(timestamp, lon_deg) -> np.ndarray:
    """Local hour angle of the sun in [-pi, pi), zero at apparent solar noon."""
    sp = sun_position(timestamp)
    h = sp.gmst + np.deg2rad(lon_deg) - sp.right_ascension
    return (h + np.pi) % (2 * np.pi) - np.pi


def cos_zenith(timestamp, lat_deg, lon_deg) -> np.ndarray:
    sp = sun_position(timestamp)
    phi = np.deg2rad(lat_deg)
    h = hour_angle(timestamp, lon_deg)
    return np.sin(phi) * math.sin(sp.declination) + np.cos(phi) * math.cos(sp.declination) * np.cos(h)


def subsolar_point(timestamp) -> tuple[float, float]:
    """(lat, lon) in degrees where the sun is overhead."""
    sp = sun_position(timestamp)
    lon = math.degrees(sp.right_ascension - sp.gmst)
    return math.degrees(sp.declination), (lon + 180.0) % 360.0 - 180.0


def solar_geometry(timestamp, grid: Grid):
    """(sun ecliptic longitude, earth-sun distance, hour-angle field, cos-zenith field)."""
    sp = sun_position(timestamp)
    lat = grid.lat_centers[:, None]
    lon = grid.lon_centers[None, :]
    ha = np.broadcast_to(hour_angle(timestamp, lon), grid.shape)
    cz = cos_zenith(timestamp, lat, lon)
    return sp.ecliptic_longitude, sp.distance, np.ascontiguousarray(ha), cz


def temporal_channels(timestamp, grid: Grid, registry: VariableRegistry) -> np.ndarray:
    """Normalized temporal auxiliary channels, scalars broadcast over the grid."""
    lon, dist, ha, cz = solar_geometry(timestamp, grid)
    raw = np.stack([np.full(grid.shape, lon), np.full(grid.shape, dist), ha, cz])
    return normalize(raw, registry, TEMPORAL)


# synthetic data ---------------------------------------------------------------------------


@dataclasses.dataclass
class SynthConfig:
    """Dynamics of the synthetic stand-in dataset.

    Anomalies follow a ~ rho * rotate(a, shift) + sqrt(1 - rho^2) * noise, where
    the shift is ``rotation_cells`` plus Gaussian jitter. New storms appear in
    the surface-pressure anomaly with probability ``storm_rate`` per step.
    """

    band_limit: int | None = None  # default: (n_lat - 1) // 2
    rotation_cells: float = 2.0
    jitter_cells: float = 0.3
    persistence: float = 0.99
    storm_rate: float = 0.3
    storm_depth: float = 25.0
    storm_width: float = 0.02
    start_time: int = 1514764800  # 2018-01-01T00:00:00Z

    @classmethod
    def pure_rotation(cls, cells: int = 1) -> "SynthConfig":
        return cls(rotation_cells=float(cells), jitter_cells=0.0, persistence=1.0, storm_rate=0.0)


# per-channel anomaly amplitude (physical units) and spectral slope
_ANOMALY = {"z": (1500.0, 2.0), "t": (6.0, 1.5), "r": (15.0, 0.8),
            "u": (8.0, 1.0), "v": (8.0, 1.0), "sp": (6.0, 1.5)}


def rotate_longitude(field: np.ndarray, cells: float) -> np.ndarray:
    """Shift eastward by a (possibly fractional) number of cells.

    Integer shifts are a plain circular roll; the fractional part is a
    per-row Fourier phase shift, exact for fields band-limited in longitude.
    """
    whole = math.floor(cells)
    frac = cells - whole
    out = np.roll(field, whole, axis=-1)
    if frac:
        n = field.shape[-1]
        spec = np.fft.rfft(out, axis=-1)
        k = np.arange(spec.shape[-1])
        phase = np.exp(-2j * np.pi * k * frac / n)
        if n % 2 == 0:
            phase[-1] = math.cos(math.pi * frac)  # keep the Nyquist term real
        out = np.fft.irfft(spec * phase, n=n, axis=-1)
    return out


def random_band_limited(rng: np.random.Generator, grid: Grid, band_limit: int, slope: float,
                        count: int = 1) -> np.ndarray:
    """Zero-mean, unit-variance random fields with energy per degree ~ l^-slope."""
    L = band_limit + 1
    l = np.arange(L)[:, None]
    m = np.arange(-band_limit, band_limit + 1)[None, :]
    amp = np.where((np.abs(m) <= l) & (l > 0), (np.maximum(l, 1.0) ** (-slope) / (2 * l + 1)) ** 0.5, 0.0)
    c = rng.standard_normal((count, L, 2 * L - 1)) * amp
    f = sht_synthesis(HarmonicCoeffs(band_limit, c), grid, transform=get_transform(grid.n_lat, band_limit))
    w = grid.area_weights[:, None]
    std = np.sqrt((f**2 * w).sum(axis=(-2, -1), keepdims=True))
    return f / std


def storm_kernel(grid: Grid, lat0: float, lon0: float, band_limit: int, width: float) -> np.ndarray:
    """Band-limited bump centered at (lat0, lon0), peak 1, zero global mean.

    Built as a truncated zonal expansion sum_l exp(-l(l+1) width)(2l+1) P_l(cos gamma)
    without the l=0 term, so it contains no degree above ``band_limit``.
    """
    lat = np.deg2rad(grid.lat_centers)[:, None]
    lon = np.deg2rad(grid.lon_centers)[None, :]
    p0, q0 = math.radians(lat0), math.radians(lon0)
    cosg = np.sin(lat) * math.sin(p0) + np.cos(lat) * math.cos(p0) * np.cos(lon - q0)
    l = np.arange(band_limit + 1)
    coef = np.exp(-l * (l + 1) * width) * (2 * l + 1)
    coef[0] = 0.0
    k = np.polynomial.legendre.legval(np.clip(cosg, -1.0, 1.0), coef)
    return k / np.polynomial.legendre.legval(1.0, coef)


def _base_fields(grid: Grid) -> dict[str, np.ndarray]:
    s = np.sin(np.deg2rad(grid.lat_centers))[:, None] * np.ones(grid.n_lon)
    p2 = 0.5 * (3 * s**2 - 1)
    return {
        "z": 54000.0 - 2000.0 * p2,
        "t": 255.0 - 25.0 * p2,
        "r": np.full(s.shape, 60.0),
        "u": 5.0 + 32.0 * s**2 * (1 - s**2),
        "v": np.zeros(s.shape),
        "sp": np.full(s.shape, 1013.0),
    }


def _diagnose(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    wind = 0.7 * np.sqrt(state["u"] ** 2 + state["v"] ** 2)
    precip = 0.1 * np.maximum(state["r"] - 70.0, 0.0)
    return {"10w": wind, "tp": precip}


def synth_generate(seed: int, grid: Grid, n_steps: int, registry: VariableRegistry | None = None,
                   config: SynthConfig | None = None) -> Dataset:
    """Deterministic synthetic dataset of ``n_steps`` consecutive 6-hourly samples."""
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    registry = registry or default_registry()
    config = config or SynthConfig()
    band = config.band_limit if config.band_limit is not None else (grid.n_lat - 1) // 2
    band = min(band, max_degree(grid.n_lat))
    rng = np.random.default_rng(seed)
    iterated = registry.names(ITERATED)
    base = _base_fields(grid)
    amp = {n: _ANOMALY.get(n, (1.0, 1.0)) for n in iterated}
    anomaly = {n: random_band_limited(rng, grid, band, amp[n][1])[0] for n in iterated}
    static_names = registry.names(STATIC)
    static = (random_band_limited(rng, grid, band, 2.0, count=max(len(static_names), 1))[: len(static_names)]
              * 1000.0).astype(np.float32)

    rho = config.persistence
    drive = math.sqrt(max(1.0 - rho * rho, 0.0))
    out = np.empty((n_steps, len(registry.state_names)) + grid.shape, dtype=np.float32)
    for step in range(n_steps):
        if step > 0:
            shift = config.rotation_cells + config.jitter_cells * rng.standard_normal()
            for n in iterated:
                a = rotate_longitude(anomaly[n], shift)
                if rho != 1.0:
                    a = rho * a
                if drive:
                    a = a + drive * random_band_limited(rng, grid, band, amp[n][1])[0]
                anomaly[n] = a
            if config.storm_rate and "sp" in anomaly and rng.random() < config.storm_rate:
                lat0 = rng.uniform(-40.0, 40.0)
                lon0 = rng.uniform(0.0, 360.0)
                k = storm_kernel(grid, lat0, lon0, band, config.storm_width)
                anomaly["sp"] = anomaly["sp"] - (config.storm_depth / amp["sp"][0]) * k
        phys = {n: base.get(n, 0.0) + amp[n][0] * anomaly[n] for n in iterated}
        diag = _diagnose(phys) if all(k in phys for k in ("u", "v", "r")) else {}
        for c, name in enumerate(registry.state_names):
            out[step, c] = phys[name] if name in phys else diag.get(name, 0.0)
    ts = config.start_time + TIMESTEP_SECONDS * np.arange(n_steps, dtype=np.int64)
    return Dataset(registry, grid, ts, out, static)
