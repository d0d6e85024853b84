"""Generator (spherical U-Net), discriminator, weather states and rollout."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import (ChannelNorm, GridConv, Pointwise, SphericalBlock, SphericalConv, SwinBlock,
                     apply_spectral_cap, fit_window, resample)
from .container import read_container, write_container
from .spherical import Grid, haar_dwt2
from .weatherdata import (ITERATED, OUTPUT, STATIC, TEMPORAL, TIMESTEP_SECONDS, VariableRegistry,
                          denormalize, normalize, temporal_channels)

CHECKPOINT_MAGIC = b"KYCK"
LOGIT_LIMIT = 15.0


@dataclasses.dataclass
class GeneratorConfig:
    n_lat: int = 32
    widths: tuple[int, ...] = (32, 48, 64, 96)
    pairs: int = 2
    head_dim: int = 16
    windows: tuple[tuple[int, int], ...] = ((4, 8), (4, 8), (8, 16), (8, 16))
    n_iterated: int = 6
    n_output: int = 2
    n_aux: int = 5
    zero_head: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.windows = tuple(tuple(int(v) for v in w) for w in self.windows)
        if len(self.widths) != 4:
            raise ValueError("the generator has exactly four resolution levels")
        if len(self.windows) != len(self.widths):
            raise ValueError("one attention window per level")
        if self.n_lat % 8:
            raise ValueError("n_lat must allow three halvings")


@dataclasses.dataclass
class DiscriminatorConfig:
    n_lat: int = 32
    widths: tuple[int, ...] = (16, 32, 48, 64, 64)
    n_state: int = 8
    dilations: tuple[int, ...] = (1, 2, 4)
    spectral_cap: float = 2.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.dilations = tuple(int(d) for d in self.dilations)
        levels = 1
        n = self.n_lat
        while n > 2:
            if n % 2:
                raise ValueError(f"n_lat={self.n_lat} does not halve down to 2 rows")
            n //= 2
            levels += 1
        if n != 2:
            raise ValueError(f"n_lat={self.n_lat} does not halve down to 2 rows")
        if len(self.widths) != levels:
            raise ValueError(f"{self.n_lat} rows need {levels} level widths, got {len(self.widths)}")


def _level(widths, pairs, grid, heads_dim, window, gen):
    dim = widths
    layers = []
    for i in range(pairs):
        layers.append(SphericalBlock(grid, dim, generator=gen))
        win = fit_window(window, *grid.shape)
        shifted = i % 2 == 1 and win != grid.shape
        layers.append(SwinBlock(dim, max(1, dim // heads_dim), win, shifted))
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """U-Net with three down/up passes; each level alternates spherical and window-attention blocks.

    Input: normalized iterated channels plus auxiliaries. Output: normalized
    iterated state at t + dt (input + scaled increment) and normalized
    output-only channels.
    """

    def __init__(self, config: GeneratorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        w = config.widths
        grids = [Grid(config.n_lat >> i) for i in range(4)]
        self.grids = grids
        self.stem = Pointwise(config.n_iterated + config.n_aux, w[0])
        self.enc = nn.ModuleList(_level(w[i], config.pairs, grids[i], config.head_dim, config.windows[i], gen)
                                 for i in range(4))
        self.down = nn.ModuleList(Pointwise(w[i], w[i + 1]) for i in range(3))
        self.up = nn.ModuleList(Pointwise(w[i + 1], w[i]) for i in range(3))
        self.merge = nn.ModuleList(Pointwise(2 * w[i], w[i]) for i in range(3))
        self.dec = nn.ModuleList(_level(w[i], config.pairs, grids[i], config.head_dim, config.windows[i], gen)
                                 for i in range(3))
        self.head_norm = ChannelNorm(w[0])
        self.head = Pointwise(w[0], config.n_iterated + config.n_output, zero_init=config.zero_head)
        self.register_buffer("delta_scale", torch.ones(config.n_iterated))
        self.skip_gain = [1.0, 1.0, 1.0]

    def forward(self, x_iter: torch.Tensor, aux: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.stem(torch.cat((x_iter, aux.to(x_iter.dtype)), dim=1))
        skips = []
        for i in range(3):
            h = self.enc[i](h)
            skips.append(h)
            h = self.down[i](resample(h, "down"))
        h = self.enc[3](h)
        for i in reversed(range(3)):
            h = self.up[i](resample(h, "up"))
            h = self.merge[i](torch.cat((h, skips[i] * self.skip_gain[i]), dim=1))
            h = self.dec[i](h)
        out = self.head(self.head_norm(h))
        n = self.config.n_iterated
        nxt = x_iter + out[:, :n] * self.delta_scale.to(out.dtype)[:, None, None]
        return nxt, out[:, n:]


class _DSpherical(nn.Module):
    def __init__(self, grid, dim, gen):
        super().__init__()
        self.conv = SphericalConv(grid, dim, generator=gen)
        self.out = Pointwise(dim, dim)

    def forward(self, x):
        return x + self.out(F.leaky_relu(self.conv(F.leaky_relu(x, 0.2)), 0.2))


class _DGrid(nn.Module):
    def __init__(self, grid, dim, dilations):
        super().__init__()
        self.conv = GridConv(grid, dim, dim, dilations=tuple(d for d in dilations if d < grid.n_lon))

    def forward(self, x, naive=False):
        h = F.leaky_relu(x, 0.2)
        return x + (self.conv.forward_naive(h) if naive else self.conv(h))


class Discriminator(nn.Module):
    """Downsampling stack to 2x4 with spherical/grid convolution pairs.

    Input pairs (prev, next) of normalized stored channels. Haar subbands of
    ``next`` enter after the first downsampling. Every weight matrix carries
    a capped spectral norm.
    """

    def __init__(self, config: DiscriminatorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed + 1)
        torch.manual_seed(seed + 1)
        w = config.widths
        self.grids = [Grid(config.n_lat >> i) for i in range(len(w))]
        self.stem = Pointwise(2 * config.n_state, w[0])
        self.wavelet = Pointwise(4 * config.n_state, w[1])
        self.sph = nn.ModuleList(_DSpherical(g, w[i], gen) for i, g in enumerate(self.grids))
        self.grid = nn.ModuleList(_DGrid(g, w[i], config.dilations) for i, g in enumerate(self.grids))
        self.down = nn.ModuleList(Pointwise(w[i], w[i + 1]) for i in range(len(w) - 1))
        self.head = nn.Linear(w[-1] * 2 * 4, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        for mod in self.modules():
            if isinstance(mod, (Pointwise, GridConv, nn.Linear)):
                apply_spectral_cap(mod, "weight", config.spectral_cap, generator=gen)
            elif isinstance(mod, SphericalConv) and mod.mix is not None:
                apply_spectral_cap(mod, "mix", config.spectral_cap, generator=gen)

    def logit(self, pair: torch.Tensor, naive: bool = False) -> torch.Tensor:
        """pair: (B, 2 * n_state, H, W) = cat(prev, next). Returns (B,) logits."""
        n = self.config.n_state
        nxt = pair[:, n:]
        bands = torch.cat(haar_dwt2(nxt), dim=1)
        h = self.stem(pair)
        for i in range(len(self.grids)):
            if i > 0:
                h = self.down[i - 1](resample(h, "down"))
                if i == 1:
                    h = h + self.wavelet(bands)
            h = self.sph[i](h)
            h = self.grid[i](h, naive=naive)
        z = self.head(F.leaky_relu(h, 0.2).flatten(1)).squeeze(-1)
        return LOGIT_LIMIT * torch.tanh(z / LOGIT_LIMIT)

    def forward(self, prev, nxt, naive=False):
        z = self.logit(torch.cat((prev, nxt), dim=1), naive=naive)
        return torch.sigmoid(z), z


# weather states ------------------------------------------------------------------------


@dataclasses.dataclass
class WeatherState:
    """Stored channels (iterated then output-only) in physical units at one valid time."""

    valid_time: int
    data: np.ndarray  # (C_state, H, W)
    registry: VariableRegistry

    def __post_init__(self):
        self.data = np.asarray(self.data)
        n = len(self.registry.state_names)
        if self.data.ndim != 3 or self.data.shape[0] != n:
            raise ValueError(f"state has shape {self.data.shape}, registry lists {n} stored channels")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"non-finite values in state at {self.valid_time}")

    @property
    def iterated(self) -> np.ndarray:
        return self.data[: self.registry.n_iterated]

    @property
    def output_only(self) -> np.ndarray:
        return self.data[self.registry.n_iterated:]


def auxiliary_inputs(valid_time: int, grid: Grid, registry: VariableRegistry, static: np.ndarray) -> np.ndarray:
    """Normalized static + temporal channels for one valid time."""
    parts = []
    if registry.by_role(STATIC):
        parts.append(normalize(np.asarray(static, dtype=np.float64), registry, STATIC))
    if registry.by_role(TEMPORAL):
        parts.append(temporal_channels(valid_time, grid, registry))
    return np.concatenate(parts, axis=0) if parts else np.zeros((0,) + grid.shape)


class Forecaster:
    """Binds a generator to a registry and static fields for physical-unit stepping."""

    def __init__(self, generator: Generator, registry: VariableRegistry, static: np.ndarray,
                 dtype=torch.float32):
        if generator.config.n_iterated != registry.n_iterated or generator.config.n_output != registry.n_output:
            raise ValueError("generator channel counts do not match the registry")
        self.generator = generator
        self.registry = registry
        self.static = np.asarray(static)
        self.grid = Grid(generator.config.n_lat)
        self.dtype = dtype

    @torch.no_grad()
    def step(self, state: WeatherState) -> WeatherState:
        if state.registry.names() != self.registry.names():
            raise ValueError("state registry does not match the model registry")
        self.grid.check_field(state.data)
        x = normalize(state.iterated.astype(np.float64), self.registry, ITERATED)
        aux = auxiliary_inputs(state.valid_time, self.grid, self.registry, self.static)
        xt = torch.as_tensor(x[None], dtype=self.dtype)
        at = torch.as_tensor(aux[None], dtype=self.dtype)
        self.generator.eval()
        nxt, out_only = self.generator(xt, at)
        iter_phys = denormalize(nxt[0].double().numpy(), self.registry, ITERATED)
        out_phys = denormalize(out_only[0].double().numpy(), self.registry, OUTPUT)
        data = np.concatenate((iter_phys, out_phys), axis=0)
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite prediction for valid time {state.valid_time + TIMESTEP_SECONDS}")
        return WeatherState(state.valid_time + TIMESTEP_SECONDS, data, self.registry)

    def rollout(self, state0: WeatherState, k: int) -> list[WeatherState]:
        if k < 0:
            raise ValueError("step count must be nonnegative")
        out, state = [], state0
        for _ in range(k):
            state = self.step(state)
            out.append(state)
        return out


def generator_step(forecaster: Forecaster, state: WeatherState) -> WeatherState:
    return forecaster.step(state)


def rollout(forecaster: Forecaster, state0: WeatherState, k: int) -> list[WeatherState]:
    return forecaster.rollout(state0, k)


def discriminator_score(disc: Discriminator, prev: torch.Tensor, nxt: torch.Tensor, naive: bool = False):
    """Probability and logit for normalized (B, C, H, W) state pairs."""
    if prev.shape != nxt.shape or prev.shape[-2:] != disc.grids[0].shape:
        raise ValueError("state pair does not match the discriminator grid")
    return disc(prev, nxt, naive=naive)


# checkpoints ------------------------------------------------------------------------------


def _tensors(module: nn.Module | None, prefix: str) -> dict[str, np.ndarray]:
    if module is None:
        return {}
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(path, registry: VariableRegistry, generator: Generator,
                    discriminator: Discriminator | None = None, counters: dict | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "kind": "checkpoint",
        "variables": registry.to_json(),
        "names_checksum": registry.checksum(),
        "generator": dataclasses.asdict(generator.config),
        "discriminator": dataclasses.asdict(discriminator.config) if discriminator is not None else None,
        "counters": counters or {},
        "extra": extra or {},
    }
    blocks = _tensors(generator, "G")
    blocks.update(_tensors(discriminator, "D"))
    write_container(path, CHECKPOINT_MAGIC, header, blocks)


@dataclasses.dataclass
class Checkpoint:
    registry: VariableRegistry
    generator: Generator
    discriminator: Discriminator | None
    counters: dict
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    header, blocks = read_container(path, CHECKPOINT_MAGIC)
    registry = VariableRegistry.from_json(header["variables"])
    gcfg = GeneratorConfig(**header["generator"])
    gen = Generator(gcfg)
    gen.load_state_dict({k[2:]: torch.from_numpy(v) for k, v in blocks.items() if k.startswith("G.")})
    disc = None
    if header["discriminator"] is not None:
        disc = Discriminator(DiscriminatorConfig(**header["discriminator"]))
        disc.load_state_dict({k[2:]: torch.from_numpy(v) for k, v in blocks.items() if k.startswith("D.")})
    return Checkpoint(registry, gen, disc, header["counters"], header["extra"])


def count_parameters(module: nn.Module | None) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())


def model_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def to_tensor(x: np.ndarray | Sequence, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)
