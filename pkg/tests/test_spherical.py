import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from sphcast.spherical import (Grid, HarmonicCoeffs, SphericalTransform, degree_spectrum, get_transform, haar_dwt2,
                               haar_idwt2, max_degree, pack, sht_analysis, sht_synthesis, unpack)

SQRT_4PI = 3.5449077018110318  # frozen: sqrt(4 pi)


def random_coeffs(rng, l_max, scale=1.0):
    c = rng.standard_normal((l_max + 1, 2 * l_max + 1)) * scale
    l = np.arange(l_max + 1)[:, None]
    m = np.arange(-l_max, l_max + 1)[None, :]
    c[np.abs(m) > l] = 0.0
    return c


class TestGrid:
    def test_centers(self):
        g = Grid(8)
        assert g.n_lon == 16
        np.testing.assert_allclose(g.lat_centers, 90 - (np.arange(8) + 0.5) * 22.5)
        assert g.lat_centers[0] == 78.75 and g.lat_centers[-1] == -78.75

    def test_area_weights(self):
        g = Grid(32)
        w = g.area_weights
        assert np.all(w > 0)
        np.testing.assert_array_equal(w, w[::-1])
        assert abs(g.n_lon * w.sum() - 1.0) < 1e-15
        np.testing.assert_allclose(np.broadcast_to(w[:, None], g.shape), oracles.cell_area_weights(32), rtol=1e-13)

    def test_area_weights_merge(self):
        fine, coarse = Grid(32), Grid(16)
        merged = 2 * (fine.area_weights[0::2] + fine.area_weights[1::2])  # 2 rows x 2 columns
        np.testing.assert_allclose(merged, coarse.area_weights, rtol=1e-13)

    def test_max_degree(self):
        assert max_degree(32) == 21 and max_degree(64) == 42


class TestTransform:
    def test_constant_field(self):
        c = sht_analysis(np.ones((64, 128)), 21)
        assert abs(c[0, 0] - SQRT_4PI) < 1e-12
        rest = c.coeffs.copy()
        rest[0, 21] = 0.0
        assert np.abs(rest).max() < 1e-10

    def test_zero_field(self):
        c = sht_analysis(np.zeros((16, 32)))
        assert np.all(c.coeffs == 0.0)

    def test_single_coefficient_synthesis(self):
        coeffs = np.zeros((22, 43))
        coeffs[0, 21] = SQRT_4PI
        f = sht_synthesis(HarmonicCoeffs(21, coeffs), Grid(64))
        assert np.abs(f - 1.0).max() < 1e-12
        assert np.all(sht_synthesis(HarmonicCoeffs(21, np.zeros((22, 43))), Grid(64)) == 0.0)

    @pytest.mark.parametrize("l,m", [(1, 0), (2, 1), (3, -2), (5, 5), (7, -7), (10, 3)])
    def test_basis_matches_scipy(self, l, m):
        n_lat, l_max = 24, 12
        coeffs = np.zeros((l_max + 1, 2 * l_max + 1))
        coeffs[l, m + l_max] = 1.0
        f = sht_synthesis(HarmonicCoeffs(l_max, coeffs), Grid(n_lat))
        np.testing.assert_allclose(f, oracles.real_ylm(l, m, n_lat), atol=1e-12)

    def test_synthesis_matches_loop_oracle(self, rng):
        c = random_coeffs(rng, 8)
        f = sht_synthesis(HarmonicCoeffs(8, c), Grid(16))
        np.testing.assert_allclose(f, oracles.synth_from_coeffs(c, 16), atol=1e-12)

    def test_round_trip_64(self, rng):
        c = random_coeffs(rng, 21)
        f = sht_synthesis(HarmonicCoeffs(21, c), Grid(64))
        back = sht_analysis(f, 21).coeffs
        assert np.abs(back - c).max() < 1e-10

    def test_round_trip_idempotent(self, rng):
        c = HarmonicCoeffs(10, random_coeffs(rng, 10))
        f1 = sht_synthesis(c, Grid(32))
        f2 = sht_synthesis(sht_analysis(f1, 10), Grid(32))
        assert np.abs(f2 - f1).max() < 1e-10

    def test_round_trip_single_precision(self, rng):
        T = get_transform(32, 21)
        ccos, csin = unpack(random_coeffs(rng, 21))
        f = T.synthesis(torch.tensor(ccos, dtype=torch.float32), torch.tensor(csin, dtype=torch.float32))
        b_cos, b_sin = T.analysis(f)
        assert (b_cos - torch.tensor(ccos)).abs().max() < 1e-4
        assert (b_sin - torch.tensor(csin)).abs().max() < 1e-4

    def test_parseval(self, rng):
        c = random_coeffs(rng, 21)
        g = Grid(64)
        f = sht_synthesis(HarmonicCoeffs(21, c), g)
        q = g.quadrature_weights  # integrates over sin(lat); times 2 pi / n_lon
        integral = (f**2 * q[:, None]).sum() * 2 * math.pi / g.n_lon
        assert abs(integral - (c**2).sum()) / (c**2).sum() < 1e-8

    def test_longitude_shift_commutes(self, rng):
        c = HarmonicCoeffs(10, random_coeffs(rng, 10))
        f = sht_synthesis(c, Grid(32))
        shifted = np.roll(f, 5, axis=-1)
        back = sht_synthesis(sht_analysis(shifted, 10), Grid(32))
        assert np.abs(back - np.roll(sht_synthesis(sht_analysis(f, 10), Grid(32)), 5, axis=-1)).max() < 1e-10

    def test_bound_enforced(self):
        with pytest.raises(ValueError):
            sht_analysis(np.zeros((32, 64)), 22)
        with pytest.raises(ValueError):
            SphericalTransform(Grid(32), 30)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sht_analysis(np.zeros((32, 60)), 10)

    def test_pack_unpack(self, rng):
        c = random_coeffs(rng, 6)
        np.testing.assert_array_equal(pack(*unpack(c)), c)

    def test_degree_spectrum_of_single_degree(self):
        coeffs = np.zeros((9, 17))
        coeffs[4, 8 + 2] = 3.0
        f = sht_synthesis(HarmonicCoeffs(8, coeffs), Grid(16))
        spec = degree_spectrum(f, 8)
        assert abs(spec[4] - 9.0) < 1e-10
        assert np.abs(np.delete(spec, 4)).max() < 1e-10

    @settings(max_examples=20, deadline=None)
    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**16))
    def test_linearity(self, a, b, seed):
        r = np.random.default_rng(seed)
        f, g = r.standard_normal((2, 16, 32))
        lhs = sht_analysis(a * f + b * g, 8).coeffs
        rhs = a * sht_analysis(f, 8).coeffs + b * sht_analysis(g, 8).coeffs
        assert np.abs(lhs - rhs).max() < 1e-9 * (1 + abs(a) + abs(b))

    def test_coefficient_triangle(self, rng):
        c = sht_analysis(rng.standard_normal((16, 32)), 8).coeffs
        l = np.arange(9)[:, None]
        m = np.arange(-8, 9)[None, :]
        assert np.all(c[np.abs(m) > l] == 0.0)


class TestHaar:
    def test_constant(self):
        ll, lh, hl, hh = haar_dwt2(np.full((8, 16), 3.0))
        assert np.all(ll == 6.0) and not lh.any() and not hl.any() and not hh.any()

    def test_energy_and_inverse(self, rng):
        x = rng.standard_normal((2, 16, 32))
        bands = haar_dwt2(x)
        energy = sum((b**2).sum() for b in bands)
        assert abs(energy - (x**2).sum()) / (x**2).sum() < 1e-12
        assert np.abs(haar_idwt2(*bands) - x).max() < 1e-12

    def test_torch(self):
        x = torch.randn(1, 3, 8, 16, dtype=torch.float64)
        back = haar_idwt2(*haar_dwt2(x))
        assert torch.allclose(back, x, atol=1e-12)

    def test_odd(self):
        with pytest.raises(ValueError):
            haar_dwt2(np.zeros((7, 16)))
