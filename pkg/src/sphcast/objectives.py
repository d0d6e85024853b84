"""Training losses and the per-variable, per-lead sigma statistics."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch

from .weatherdata import ITERATED, OUTPUT, VariableRegistry

ALPHA = 0.05
GAMMA = 0.1
PROB_EPS = 1e-7
SIGMA_FLOOR = 1e-6


@dataclasses.dataclass
class LossWeights:
    alpha: float = ALPHA
    gamma: float = GAMMA
    replay_multiplier: float = 0.25

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0 or self.replay_multiplier < 0:
            raise ValueError("loss coefficients must be nonnegative")


def robust_f(x):
    """200 * log(1 + x^2 / 200): quadratic near zero, logarithmic in the tails."""
    if isinstance(x, torch.Tensor):
        return 200.0 * torch.log1p(x * x / 200.0)
    x = np.asarray(x, dtype=np.float64)
    return 200.0 * np.log1p(x * x / 200.0)


def regression_loss(pred: torch.Tensor, true: torch.Tensor, sigma, area_weights, var_weights=None,
                    sample_weights=None) -> torch.Tensor:
    """Area-weighted robust regression loss over a batch of trajectories.

    pred, true: (B, T, C, H, W). sigma: (C, T) with +inf allowed (those terms
    are exactly zero). area_weights: per-row (H,) summing to 1 over the grid
    once multiplied by W, or a full (H, W) table summing to 1. Terms are summed
    over variables, averaged over steps, and averaged over the batch with
    optional per-sample multipliers (not renormalized).
    """
    if pred.shape != true.shape or pred.dim() != 5:
        raise ValueError(f"trajectory shapes differ or are not (B, T, C, H, W): {pred.shape} vs {true.shape}")
    B, T, C, H, W = pred.shape
    sigma = torch.as_tensor(sigma, dtype=pred.dtype, device=pred.device)
    if sigma.shape[0] != C or sigma.shape[1] < T:
        raise ValueError(f"sigma table {tuple(sigma.shape)} does not cover {C} variables x {T} steps")
    sigma = sigma[:, :T].t()  # (T, C)
    finite = torch.isfinite(sigma)
    inv = torch.where(finite, 1.0 / torch.where(finite, sigma, torch.ones_like(sigma)), torch.zeros_like(sigma))
    z = (pred - true) * inv[None, :, :, None, None]
    z = torch.where(finite[None, :, :, None, None], z, torch.zeros_like(z))
    aw = torch.as_tensor(area_weights, dtype=pred.dtype, device=pred.device)
    if aw.dim() == 1:
        aw = aw[:, None].expand(H, W)
    per_var = (robust_f(z) * aw).sum(dim=(-2, -1))  # (B, T, C)
    vw = torch.ones(C, dtype=pred.dtype) if var_weights is None else torch.as_tensor(var_weights, dtype=pred.dtype)
    per_sample = (per_var * vw).sum(dim=-1).mean(dim=-1)  # (B,)
    if sample_weights is not None:
        per_sample = per_sample * torch.as_tensor(sample_weights, dtype=pred.dtype)
    return per_sample.mean()


def _log_prob(p):
    return torch.log(torch.clamp(p, PROB_EPS, 1.0))


def adversarial_loss_G(scores) -> torch.Tensor:
    """-mean(log D) over discriminator probabilities of generated pairs."""
    scores = torch.as_tensor(scores, dtype=torch.float64) if not isinstance(scores, torch.Tensor) else scores
    return -_log_prob(scores).mean()


def discriminator_loss(real, fake, penalty=0.0, gamma: float = GAMMA) -> torch.Tensor:
    """-mean(log D(real)) - mean(log(1 - D(fake))) + gamma / 2 * penalty."""
    real = torch.as_tensor(real, dtype=torch.float64) if not isinstance(real, torch.Tensor) else real
    fake = torch.as_tensor(fake, dtype=real.dtype) if not isinstance(fake, torch.Tensor) else fake
    return -_log_prob(real).mean() - _log_prob(1.0 - fake).mean() + 0.5 * gamma * penalty


def generator_loss(l_mse, l_adv, alpha: float = ALPHA):
    return l_mse + alpha * l_adv


@dataclasses.dataclass
class SigmaTable:
    """sigma[v, k-1] in physical units for every stored variable and lead k."""

    names: list[str]
    sigma: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.shape[0] != len(self.names):
            raise ValueError("sigma table rows must match variable names")
        bad = ~(np.isposinf(self.sigma) | (self.sigma > 0))
        if bad.any():
            raise ValueError("sigma entries must be positive or +inf")

    @property
    def t_max(self) -> int:
        return self.sigma.shape[1]

    def normalized(self, registry: VariableRegistry) -> np.ndarray:
        """Sigma in units of each variable's normalization std."""
        _, std = registry.stats(ITERATED, OUTPUT)
        return self.sigma / std[:, None]


def _weighted_std(x: np.ndarray, w: np.ndarray) -> float:
    """Area-weighted population std over all samples and cells of x (N, H, W)."""
    wt = np.broadcast_to(w[None, :, None], x.shape)
    total = wt.sum()
    mean = (wt * x).sum() / total
    return float(np.sqrt((wt * (x - mean) ** 2).sum() / total))


def compute_sigma_stats(data: np.ndarray, registry: VariableRegistry, t_max: int, area_weights: np.ndarray,
                        floor: float = SIGMA_FLOOR) -> SigmaTable:
    """Std of lag-k differences for iterated variables; std of the value for output-only.

    ``data`` is (N, C, H, W) in physical units. The floor is in normalized
    units, i.e. multiplied by each variable's registry std.
    """
    data = np.asarray(data, dtype=np.float64)
    if len(data) <= t_max:
        raise ValueError(f"{len(data)} samples cannot span lag {t_max}")
    names = registry.state_names
    roles = {v.name: v.role for v in registry}
    _, std = registry.stats(ITERATED, OUTPUT)
    sigma = np.full((len(names), t_max), np.inf)
    for c, name in enumerate(names):
        lo = floor * std[c]
        if roles[name] == OUTPUT:
            sigma[c, 0] = max(_weighted_std(data[:, c], area_weights), lo)
            continue
        for k in range(1, t_max + 1):
            diff = data[k:, c] - data[:-k, c]
            sigma[c, k - 1] = max(_weighted_std(diff, area_weights), lo)
    return SigmaTable(names, sigma)


def channel_stats(data: np.ndarray, area_weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted mean and std per channel of (N, C, H, W) data."""
    data = np.asarray(data, dtype=np.float64)
    w = area_weights[None, :, None]
    means, stds = [], []
    for c in range(data.shape[1]):
        x = data[:, c]
        wt = np.broadcast_to(w, x.shape)
        mu = (wt * x).sum() / wt.sum()
        means.append(mu)
        stds.append(math.sqrt((wt * (x - mu) ** 2).sum() / wt.sum()))
    return np.array(means), np.array(stds)
