import math

import numpy as np
import pytest
import torch

import oracles
from sphcast.autodiff import check_tensor_gradient
from sphcast.objectives import (ALPHA, GAMMA, LossWeights, SigmaTable, adversarial_loss_G, compute_sigma_stats,
                                discriminator_loss, generator_loss, regression_loss, robust_f)
from sphcast.spherical import Grid
from sphcast.weatherdata import ITERATED, OUTPUT, VariableRegistry, VariableSpec

# frozen from 30-digit evaluations
F_1 = 0.997508302207814722
F_2 = 3.96052545923594260
TWO_LN2 = 1.38629436111989062
LN2 = 0.693147180559945309


def area(n_lat):
    return torch.tensor(Grid(n_lat).area_weights)


class TestRobustF:
    def test_values(self):
        assert robust_f(0.0) == 0.0
        assert abs(robust_f(1.0) - F_1) < 1e-12
        assert abs(float(robust_f(torch.tensor(1.0, dtype=torch.float64))) - F_1) < 1e-12

    def test_small_argument(self):
        assert abs(robust_f(1e-3) / 1e-6 - 1.0) < 1e-5

    def test_even_and_monotone(self):
        x = np.linspace(0, 50, 101)
        assert np.array_equal(robust_f(x), robust_f(-x))
        assert np.all(np.diff(robust_f(x)) > 0)


class TestRegression:
    def test_zero(self):
        x = torch.randn(2, 3, 4, 8, 16, dtype=torch.float64)
        assert float(regression_loss(x, x, torch.ones(4, 3), area(8))) == 0.0

    def test_uniform_two_sigma(self):
        pred = torch.full((1, 1, 1, 8, 16), 2.0 * 0.7, dtype=torch.float64)
        true = torch.zeros_like(pred)
        loss = regression_loss(pred, true, torch.tensor([[0.7]], dtype=torch.float64), area(8))
        assert abs(float(loss) - F_2) < 1e-10

    def test_infinite_sigma_contributes_zero(self):
        true = torch.zeros(1, 2, 2, 8, 16, dtype=torch.float64)
        pred = true.clone()
        pred[:, 1, 1] = 1e6  # output-only channel, step 2
        sigma = torch.tensor([[1.0, 1.0], [1.0, math.inf]])
        assert float(regression_loss(pred, true, sigma, area(8))) == 0.0

    def test_matches_oracle(self, rng):
        pred = rng.standard_normal((2, 3, 2, 8, 16))
        true = rng.standard_normal((2, 3, 2, 8, 16))
        sigma = np.array([[0.5, 1.0, 2.0], [1.5, np.inf, np.inf]])
        vw = np.array([1.0, 0.5])
        loss = regression_loss(torch.tensor(pred), torch.tensor(true), sigma, area(8), vw)
        w = oracles.cell_area_weights(8)
        total = 0.0
        for b in range(2):
            for k in range(3):
                for v in range(2):
                    if np.isfinite(sigma[v, k]):
                        z = (pred[b, k, v] - true[b, k, v]) / sigma[v, k]
                        total += vw[v] * (w * 200 * np.log1p(z * z / 200)).sum() / 3
        assert abs(float(loss) - total / 2) < 1e-12

    def test_replay_multiplier_linear(self, rng):
        pred = torch.tensor(rng.standard_normal((3, 1, 2, 8, 16)))
        true = torch.tensor(rng.standard_normal((3, 1, 2, 8, 16)))
        sig = torch.ones(2, 1)
        full = regression_loss(pred, true, sig, area(8), sample_weights=torch.ones(3))
        quarter = regression_loss(pred, true, sig, area(8), sample_weights=torch.full((3,), 0.25))
        assert float(quarter) == pytest.approx(0.25 * float(full), rel=1e-15)

    def test_rescaling_invariance(self, rng):
        pred = torch.tensor(rng.standard_normal((1, 1, 1, 8, 16)))
        true = torch.tensor(rng.standard_normal((1, 1, 1, 8, 16)))
        a = regression_loss(pred, true, torch.tensor([[0.3]], dtype=torch.float64), area(8))
        b = regression_loss(7 * pred, 7 * true, torch.tensor([[2.1]], dtype=torch.float64), area(8))
        assert abs(float(a) - float(b)) < 1e-12

    def test_misaligned(self):
        with pytest.raises(ValueError):
            regression_loss(torch.zeros(1, 1, 1, 8, 16), torch.zeros(1, 2, 1, 8, 16), torch.ones(1, 2), area(8))
        with pytest.raises(ValueError):
            regression_loss(torch.zeros(1, 3, 1, 8, 16), torch.zeros(1, 3, 1, 8, 16), torch.ones(1, 2), area(8))

    def test_gradient(self, rng):
        true = torch.tensor(rng.standard_normal((1, 2, 2, 4, 8)))
        sig = torch.tensor([[0.5, 0.8], [1.0, math.inf]])
        err = check_tensor_gradient(lambda p: regression_loss(p, true, sig, area(4)),
                                    torch.tensor(rng.standard_normal((1, 2, 2, 4, 8))) * 10)
        assert err < 1e-3


class TestAdversarial:
    def test_values(self):
        assert float(adversarial_loss_G(torch.ones(4))) == 0.0
        assert abs(float(adversarial_loss_G(torch.full((4,), 0.5, dtype=torch.float64))) - LN2) < 1e-12

    def test_monotone(self):
        a = adversarial_loss_G(torch.tensor([0.3, 0.5]))
        b = adversarial_loss_G(torch.tensor([0.4, 0.5]))
        assert float(b) < float(a)

    def test_clamped(self):
        assert math.isfinite(float(adversarial_loss_G(torch.zeros(2))))

    def test_discriminator(self):
        half = torch.full((3,), 0.5, dtype=torch.float64)
        assert abs(float(discriminator_loss(half, half, 0.0, 0.0)) - TWO_LN2) < 1e-12
        perfect = discriminator_loss(torch.ones(3), torch.zeros(3), 0.0)
        assert float(perfect) <= 2e-7
        p = 3.0
        diff = discriminator_loss(half, half, p, 0.2) - discriminator_loss(half, half, p, 0.1)
        assert abs(float(diff) - p / 2 * 0.1) < 1e-12

    def test_generator_assembly_linear_in_alpha(self):
        zero = torch.tensor(0.0, dtype=torch.float64)
        l_adv = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
        c1 = generator_loss(zero, l_adv, ALPHA)
        c2 = generator_loss(zero, l_adv, 2 * ALPHA)
        assert c2.item() == 2 * c1.item()
        (g1,) = torch.autograd.grad(c1, l_adv)
        (g2,) = torch.autograd.grad(c2, l_adv)
        assert g2.item() == 2 * g1.item() == 2 * ALPHA
        l_mse = torch.tensor(2.5, dtype=torch.float64)
        assert generator_loss(l_mse, l_adv).item() == (l_mse + 0.05 * l_adv).item()

    def test_defaults(self):
        assert ALPHA == 0.05 and GAMMA == 0.1
        w = LossWeights()
        assert (w.alpha, w.gamma, w.replay_multiplier) == (0.05, 0.1, 0.25)
        with pytest.raises(ValueError):
            LossWeights(alpha=-1)


def registry(n_iter=1, n_out=1):
    specs = [VariableSpec(f"i{k}", ITERATED, "1", 0.0, 1.0) for k in range(n_iter)]
    specs += [VariableSpec(f"o{k}", OUTPUT, "1", 0.0, 1.0) for k in range(n_out)]
    return VariableRegistry(specs)


class TestSigma:
    def test_plus_minus_one(self):
        g = Grid(4)
        steps = np.array([1.0, -1.0] * 10)
        series = np.concatenate([[0.0], np.cumsum(steps)])
        data = np.broadcast_to(series[:, None, None, None], (21, 1) + g.shape).copy()
        table = compute_sigma_stats(data, registry(1, 0), 1, g.area_weights)
        assert abs(table.sigma[0, 0] - 1.0) < 1e-14

    def test_constant_floored(self):
        g = Grid(4)
        data = np.full((5, 2) + g.shape, 3.0)
        table = compute_sigma_stats(data, registry(), 2, g.area_weights)
        assert table.sigma[0, 0] == 1e-6 and table.sigma[0, 1] == 1e-6

    def test_output_only(self, rng):
        g = Grid(4)
        data = rng.standard_normal((10, 2) + g.shape)
        table = compute_sigma_stats(data, registry(), 3, g.area_weights)
        w = oracles.cell_area_weights(4)
        assert abs(table.sigma[1, 0] - oracles.weighted_std(data[:, 1], w)) < 1e-12
        assert np.all(np.isinf(table.sigma[1, 1:]))
        lag2 = data[2:, 0] - data[:-2, 0]
        assert abs(table.sigma[0, 1] - oracles.weighted_std(lag2, w)) < 1e-12

    def test_insufficient_lags(self):
        with pytest.raises(ValueError):
            compute_sigma_stats(np.zeros((3, 2, 4, 8)), registry(), 3, Grid(4).area_weights)

    def test_table_validation(self):
        with pytest.raises(ValueError):
            SigmaTable(["a"], np.array([[0.0]]))
        assert SigmaTable(["a"], np.array([[1.0, np.inf]])).t_max == 2
