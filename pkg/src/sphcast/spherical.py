"""Real spherical harmonic transforms on a cell-centered lat-lon grid, plus 2-D Haar.

Basis: real, orthonormal over the unit sphere (no Condon-Shortley phase)::

    Y_lm = pbar_l|m|(sin lat) * {sqrt(2) cos(m lon), 1, sqrt(2) sin(|m| lon)}

for m > 0, m = 0, m < 0 respectively, so a constant field 1 has c_00 = sqrt(4 pi).

Coefficients are stored as ``(..., l_max + 1, 2 * l_max + 1)`` with the order
axis offset by ``l_max``. Inside the torch path they are split into a cosine
part (m >= 0) and a sine part (m >= 0, column 0 unused), both ``(..., L, M)``.
"""

from __future__ import annotations

import dataclasses
import functools
import math
import threading

import numpy as np
import torch


def max_degree(n_lat: int) -> int:
    """Default anti-aliasing truncation, floor(2/3 * n_lat)."""
    return (2 * n_lat) // 3


@dataclasses.dataclass(frozen=True)
class Grid:
    """Equiangular grid, cell-centered in both axes, with no pole rows."""

    n_lat: int

    def __post_init__(self):
        if self.n_lat < 1:
            raise ValueError(f"n_lat must be positive, got {self.n_lat}")

    @property
    def n_lon(self) -> int:
        return 2 * self.n_lat

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @functools.cached_property
    def lat_centers(self) -> np.ndarray:
        j = np.arange(self.n_lat)
        return 90.0 - (j + 0.5) * 180.0 / self.n_lat

    @functools.cached_property
    def lon_centers(self) -> np.ndarray:
        return (np.arange(self.n_lon) + 0.5) * 360.0 / self.n_lon

    @functools.cached_property
    def area_weights(self) -> np.ndarray:
        """Per-row weight of one cell: exact cell area over the sphere area.

        Cell areas are additive, so the weight of a coarse row equals the sum
        of the two fine rows it covers.
        """
        edges = np.deg2rad(90.0 - np.arange(self.n_lat + 1) * 180.0 / self.n_lat)
        band = np.sin(edges[:-1]) - np.sin(edges[1:])
        w = band / (2.0 * self.n_lon)
        w[: self.n_lat // 2] = w[::-1][: self.n_lat // 2]  # exact symmetry
        return w

    @functools.cached_property
    def quadrature_weights(self) -> np.ndarray:
        """Fejer type-1 weights in x = sin(lat), summing to 2.

        Exact for polynomials in x up to degree n_lat - 1.
        """
        n = self.n_lat
        theta = (np.arange(n) + 0.5) * np.pi / n
        k = np.arange(1, n // 2 + 1)
        s = (np.cos(2.0 * np.outer(theta, k)) / (4.0 * k**2 - 1.0)).sum(axis=1)
        w = (2.0 / n) * (1.0 - 2.0 * s)
        w[: n // 2] = w[::-1][: n // 2]
        return w

    def half(self) -> "Grid":
        if self.n_lat % 2:
            raise ValueError(f"cannot halve a grid with {self.n_lat} rows")
        return Grid(self.n_lat // 2)

    def check_field(self, field) -> None:
        if tuple(field.shape[-2:]) != self.shape:
            raise ValueError(
                f"field shape {tuple(field.shape[-2:])} does not match grid {self.shape}"
            )


def grid_for(field) -> Grid:
    n_lat, n_lon = field.shape[-2:]
    if n_lon != 2 * n_lat:
        raise ValueError(f"expected n_lon = 2 * n_lat, got {n_lat}x{n_lon}")
    return Grid(int(n_lat))


def normalized_legendre(l_max: int, x: np.ndarray) -> np.ndarray:
    """pbar[m, l, j] for 0 <= m <= l <= l_max, normalized so that
    2 pi * integral of pbar_lm^2 over [-1, 1] equals 1. Zero for l < m."""
    x = np.asarray(x, dtype=np.float64)
    L = l_max + 1
    out = np.zeros((L, L, x.size))
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    pmm = np.full(x.size, math.sqrt(1.0 / (4.0 * math.pi)))
    for m in range(L):
        if m > 0:
            pmm = math.sqrt((2 * m + 1) / (2 * m)) * s * pmm
        out[m, m] = pmm
        if m + 1 < L:
            out[m, m + 1] = math.sqrt(2 * m + 3) * x * pmm
        for l in range(m + 2, L):
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            out[m, l] = a * (x * out[m, l - 1] - b * out[m, l - 2])
    return out


class SphericalTransform:
    """Precomputed analysis/synthesis tables for one grid and truncation.

    Analysis is the quadrature-weighted least-squares inverse of synthesis,
    order by order. When the quadrature integrates degree 2*l_max exactly this
    is plain quadrature projection; above that it still recovers band-limited
    coefficients exactly as long as l_max < n_lat.

    Tables are immutable after construction; instances are safe to share
    across threads.
    """

    def __init__(self, grid: Grid, l_max: int | None = None, *, check_bound: bool = True):
        if l_max is None:
            l_max = max_degree(grid.n_lat)
        if l_max < 0:
            raise ValueError(f"l_max must be nonnegative, got {l_max}")
        if check_bound and l_max > max_degree(grid.n_lat) and l_max > 0:
            raise ValueError(
                f"l_max={l_max} exceeds the anti-aliasing bound "
                f"{max_degree(grid.n_lat)} for {grid.n_lat} rows"
            )
        if l_max >= grid.n_lat or 2 * l_max >= grid.n_lon:
            raise ValueError(f"l_max={l_max} not resolvable on grid {grid.shape}")
        self.grid = grid
        self.l_max = l_max
        L = l_max + 1
        x = np.sin(np.deg2rad(grid.lat_centers))
        pbar = normalized_legendre(l_max, x)  # (m, l, j)

        lon = np.deg2rad(grid.lon_centers)
        m = np.arange(L)
        scale = np.where(m == 0, 1.0, math.sqrt(2.0))
        # basis_cos[k, m] = e_m(lon_k); the forward projection divides by n_lon
        self._basis_cos = np.cos(np.outer(lon, m)) * scale
        self._basis_sin = np.sin(np.outer(lon, m)) * scale
        self._basis_sin[:, 0] = 0.0

        W = 2.0 * math.pi * grid.quadrature_weights
        analysis = np.zeros((L, L, grid.n_lat))
        for mm in range(L):
            S = pbar[mm, mm:].T  # (j, l)
            gram = S.T @ (W[:, None] * S)
            analysis[mm, mm:] = np.linalg.solve(gram, S.T * W[None, :])
        self._analysis = analysis
        self._synthesis = np.ascontiguousarray(pbar.transpose(0, 2, 1))  # (m, j, l)
        self._cache: dict = {}
        self._lock = threading.Lock()

    def __deepcopy__(self, memo):
        return self  # immutable tables; model copies share them

    @property
    def n_coeff_degrees(self) -> int:
        return self.l_max + 1

    def _tables(self, dtype, device):
        key = (dtype, device)
        tabs = self._cache.get(key)
        if tabs is None:
            with self._lock:
                tabs = tuple(
                    torch.as_tensor(t, dtype=dtype, device=device)
                    for t in (
                        self._basis_cos / self.grid.n_lon,
                        self._basis_sin / self.grid.n_lon,
                        self._basis_cos.T.copy(),
                        self._basis_sin.T.copy(),
                        self._analysis,
                        self._synthesis,
                    )
                )
                self._cache[key] = tabs
        return tabs

    def analysis(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(..., n_lat, n_lon) -> (cos part, sin part), each (..., L, M)."""
        self.grid.check_field(x)
        fc, fs, _, _, A, _ = self._tables(x.dtype, x.device)
        g = x @ fc  # (..., j, m)
        h = x @ fs
        ccos = torch.einsum("...jm,mlj->...lm", g, A)
        csin = torch.einsum("...jm,mlj->...lm", h, A)
        return ccos, csin

    def synthesis(self, ccos: torch.Tensor, csin: torch.Tensor) -> torch.Tensor:
        """Inverse of :meth:`analysis`; entries with m > l are ignored."""
        L = self.l_max + 1
        if ccos.shape[-2:] != (L, L) or csin.shape[-2:] != (L, L):
            raise ValueError(
                f"coefficient shape {tuple(ccos.shape[-2:])} does not match l_max={self.l_max}"
            )
        _, _, bc, bs, _, S = self._tables(ccos.dtype, ccos.device)
        g = torch.einsum("...lm,mjl->...jm", ccos, S)
        h = torch.einsum("...lm,mjl->...jm", csin, S)
        return g @ bc + h @ bs

    # numpy convenience ---------------------------------------------------

    def analyze(self, field) -> "HarmonicCoeffs":
        return sht_analysis(field, self.l_max, transform=self)

    def synthesize(self, coeffs: "HarmonicCoeffs") -> np.ndarray:
        return sht_synthesis(coeffs, self.grid, transform=self)


@functools.lru_cache(maxsize=64)
def get_transform(n_lat: int, l_max: int | None = None) -> SphericalTransform:
    return SphericalTransform(Grid(n_lat), l_max)


@dataclasses.dataclass
class HarmonicCoeffs:
    """Triangular-truncated real coefficients indexed (channel, l, m + l_max)."""

    l_max: int
    coeffs: np.ndarray

    def __post_init__(self):
        L = self.l_max + 1
        if self.coeffs.shape[-2:] != (L, 2 * L - 1):
            raise ValueError(
                f"coefficient array {self.coeffs.shape} does not match l_max={self.l_max}"
            )

    def __getitem__(self, lm: tuple[int, int]):
        l, m = lm
        if abs(m) > l:
            return np.zeros(self.coeffs.shape[:-2])
        return self.coeffs[..., l, m + self.l_max]

    def degree_spectrum(self) -> np.ndarray:
        """Energy per degree l, summed over orders."""
        return (self.coeffs**2).sum(axis=-1)


def pack(ccos: np.ndarray, csin: np.ndarray) -> np.ndarray:
    L = ccos.shape[-1]
    out = np.zeros(ccos.shape[:-1] + (2 * L - 1,), dtype=ccos.dtype)
    out[..., L - 1 :] = ccos
    out[..., : L - 1] = csin[..., 1:][..., ::-1]
    l = np.arange(L)[:, None]
    m = np.arange(-(L - 1), L)[None, :]
    out[..., np.abs(m) > l] = 0.0
    return out


def unpack(coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    L = (coeffs.shape[-1] + 1) // 2
    ccos = coeffs[..., L - 1 :].copy()
    csin = np.zeros_like(ccos)
    csin[..., 1:] = coeffs[..., : L - 1][..., ::-1]
    return ccos, csin


def sht_analysis(field, l_max: int | None = None, *, transform: SphericalTransform | None = None) -> HarmonicCoeffs:
    """Analyze a (..., n_lat, n_lon) field into real harmonic coefficients."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim < 2:
        raise ValueError("field needs at least two dimensions")
    grid = grid_for(field)
    if transform is None:
        transform = get_transform(grid.n_lat, l_max)
    elif transform.grid != grid:
        raise ValueError(f"field grid {grid.shape} does not match transform {transform.grid.shape}")
    ccos, csin = transform.analysis(torch.from_numpy(field))
    return HarmonicCoeffs(transform.l_max, pack(ccos.numpy(), csin.numpy()))


def sht_synthesis(coeffs: HarmonicCoeffs, grid: Grid, *, transform: SphericalTransform | None = None) -> np.ndarray:
    """Evaluate a truncated expansion at the grid cell centers."""
    if transform is None:
        transform = get_transform(grid.n_lat, coeffs.l_max)
    elif transform.grid != grid or transform.l_max != coeffs.l_max:
        raise ValueError("transform does not match grid / truncation")
    ccos, csin = unpack(np.asarray(coeffs.coeffs, dtype=np.float64))
    return transform.synthesis(torch.from_numpy(ccos), torch.from_numpy(csin)).numpy()


def degree_spectrum(field, l_max: int | None = None) -> np.ndarray:
    """Per-degree energy of a (..., n_lat, n_lon) field."""
    return sht_analysis(field, l_max).degree_spectrum()


# Haar ----------------------------------------------------------------------


def haar_dwt2(x):
    """One-level orthonormal 2-D Haar transform over the last two axes.

    Returns (LL, LH, HL, HH) at half resolution. Works on numpy arrays and
    torch tensors alike.
    """
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"Haar transform needs even dimensions, got {tuple(x.shape[-2:])}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2  # detail across longitude
    hl = (a + b - c - d) / 2  # detail across latitude
    hh = (a - b - c + d) / 2
    return ll, lh, hl, hh


def haar_idwt2(ll, lh, hl, hh):
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    if isinstance(ll, torch.Tensor):
        top = torch.stack((a, b), dim=-1).flatten(-2)
        bot = torch.stack((c, d), dim=-1).flatten(-2)
        return torch.stack((top, bot), dim=-2).flatten(-3, -2)
    top = np.stack((a, b), axis=-1).reshape(a.shape[:-1] + (-1,))
    bot = np.stack((c, d), axis=-1).reshape(c.shape[:-1] + (-1,))
    out = np.stack((top, bot), axis=-2)
    return out.reshape(out.shape[:-3] + (-1, out.shape[-1]))
