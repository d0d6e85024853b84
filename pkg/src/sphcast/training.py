"""Phased regression + adversarial training with a replay buffer.

Schedules:
  full    phases 1 -> 2 -> 3 -> 4 (adversarial model)
  legacy  phases 1 -> 2a         (regression-only model; no discriminator)
"""

from __future__ import annotations

import collections
import copy
import dataclasses
import logging
import math
import os
from typing import Sequence

import numpy as np
import torch

from . import config as cfgfile
from .autodiff import grad_norm_penalty
from .models import (Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, auxiliary_inputs,
                     save_checkpoint)
from .objectives import SigmaTable, adversarial_loss_G, discriminator_loss, generator_loss, regression_loss
from .weatherdata import ITERATED, OUTPUT, Dataset, Statistics, VariableRegistry, normalize

log = logging.getLogger(__name__)

SCHEDULES = {"full": ("1", "2", "3", "4"), "legacy": ("1", "2a")}


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(f"{message}; last good checkpoint: {last_checkpoint or 'none'}")
        self.last_checkpoint = last_checkpoint


@dataclasses.dataclass
class TrainConfig:
    seed: int = 0
    schedule: str = "full"
    steps_phase1: int = 2000
    steps_phase2: int = 200
    steps_phase3: int = 2000
    steps_phase4: int = 1000
    steps_phase2a: int = 1000
    batch_size: int = 4
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    alpha: float = 0.05
    gamma: float = 0.1
    d_updates: int = 4
    long_steps: int = 4
    replay_capacity: int = 256
    replay_multiplier: float = 0.25
    replay_prob: float = 0.5
    adv_pair: str = "consecutive"
    g_widths: tuple = (32, 48, 64, 96)
    g_pairs: int = 2
    g_windows: tuple = ("4x8", "4x8", "8x16", "8x16")
    d_widths: tuple = (16, 32, 48, 64, 64)
    d_dilations: tuple = (1, 2, 4)
    spectral_cap: float = 2.0
    threads: int = 1
    dtype: str = "float32"
    checkpoint_dir: str = ""

    def validate(self) -> None:
        if self.schedule not in SCHEDULES:
            raise cfgfile.ConfigError(f"schedule must be one of {sorted(SCHEDULES)}, got {self.schedule!r}")
        if self.adv_pair not in ("consecutive", "as_written"):
            raise cfgfile.ConfigError(f"adv_pair must be 'consecutive' or 'as_written', got {self.adv_pair!r}")
        if self.dtype not in ("float32", "float64"):
            raise cfgfile.ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.batch_size < 1 or self.long_steps < 1 or self.d_updates < 1 or self.replay_capacity < 1:
            raise cfgfile.ConfigError("batch_size, long_steps, d_updates and replay_capacity must be positive")
        for name in ("steps_phase1", "steps_phase2", "steps_phase3", "steps_phase4", "steps_phase2a"):
            if getattr(self, name) < 0:
                raise cfgfile.ConfigError(f"{name} must be nonnegative")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def windows(self) -> tuple[tuple[int, int], ...]:
        out = []
        for w in self.g_windows:
            h, _, v = str(w).partition("x")
            out.append((int(h), int(v)))
        return tuple(out)


@dataclasses.dataclass(frozen=True)
class PhaseSpec:
    phase: str
    steps_ahead: int  # T, autoregressive steps per training example
    adversarial: bool  # L_adv enters the generator loss
    d_per_g: int  # discriminator updates per generator update (0: no discriminator)
    budget: int  # generator updates
    replay: bool


def build_phases(config: TrainConfig) -> list[PhaseSpec]:
    config.validate()
    T = config.long_steps
    table = {
        "1": PhaseSpec("1", 1, False, 0, config.steps_phase1, False),
        "2a": PhaseSpec("2a", T, False, 0, config.steps_phase2a, False),
        "2": PhaseSpec("2", 1, False, 1, config.steps_phase2, False),
        "3": PhaseSpec("3", 1, True, config.d_updates, config.steps_phase3, False),
        "4": PhaseSpec("4", T, True, config.d_updates, config.steps_phase4, True),
    }
    return [table[p] for p in SCHEDULES[config.schedule]]


def validate_phase_order(order: Sequence[str]) -> None:
    if tuple(order) not in SCHEDULES.values():
        raise cfgfile.ConfigError(f"phase order {'->'.join(order)} is not 1->2->3->4 or 1->2a")


# replay buffer --------------------------------------------------------------------------------


@dataclasses.dataclass
class ReplayEntry:
    state: torch.Tensor  # normalized stored channels (C, H, W)
    lead: int  # steps since the ground-truth anchor
    anchor: int  # dataset index of the anchor
    replay: bool = False  # set on entries handed out by sample()


class ReplayBuffer:
    """FIFO store of predicted states; sampling is uniform without replacement."""

    def __init__(self, capacity: int, rng: np.random.Generator | None = None):
        if capacity <= 0:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.entries: collections.deque[ReplayEntry] = collections.deque(maxlen=capacity)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __len__(self):
        return len(self.entries)

    def push(self, entry: ReplayEntry) -> bool:
        if entry.lead < 1:
            raise ValueError("replay entries need lead >= 1")
        if not bool(torch.isfinite(torch.as_tensor(entry.state)).all()):
            return False
        self.entries.append(entry)
        return True

    def sample(self, n: int) -> list[ReplayEntry]:
        if not self.entries or n <= 0:
            return []
        idx = self.rng.choice(len(self.entries), size=min(n, len(self.entries)), replace=False)
        return [dataclasses.replace(self.entries[i], replay=True) for i in sorted(idx)]


def replay_push(buffer: ReplayBuffer, entry: ReplayEntry) -> bool:
    return buffer.push(entry)


def replay_sample(buffer: ReplayBuffer, n: int) -> list[ReplayEntry]:
    return buffer.sample(n)


def sample_weights(entries: Sequence[ReplayEntry], multiplier: float) -> np.ndarray:
    return np.array([multiplier if e.replay else 1.0 for e in entries])


# metrics log -----------------------------------------------------------------------------------


class MetricsLog:
    """Append-only ``step, phase, loss_name, value`` records."""

    def __init__(self, path: str | None = None):
        self.records: list[tuple[int, str, str, float]] = []
        self.path = path
        if path:
            open(path, "a").close()

    def add(self, step: int, phase: str, name: str, value: float) -> None:
        rec = (int(step), phase, name, float(value))
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(f"{rec[0]}, {rec[1]}, {rec[2]}, {rec[3]!r}\n")

    def values(self, name: str, phase: str | None = None) -> list[float]:
        return [r[3] for r in self.records if r[2] == name and (phase is None or r[1] == phase)]

    def count(self, name: str, phase: str | None = None) -> int:
        return len(self.values(name, phase))


def read_metrics(path) -> list[tuple[int, str, str, float]]:
    out = []
    with open(path) as fh:
        for line in fh:
            step, phase, name, value = (p.strip() for p in line.split(","))
            out.append((int(step), phase, name, float(value)))
    return out


# trainer ---------------------------------------------------------------------------------------


def generator_config(config: TrainConfig, registry: VariableRegistry, n_lat: int) -> GeneratorConfig:
    n_aux = len(registry) - len(registry.state_names)
    return GeneratorConfig(n_lat=n_lat, widths=tuple(config.g_widths), pairs=config.g_pairs,
                           windows=config.windows(), n_iterated=registry.n_iterated,
                           n_output=registry.n_output, n_aux=n_aux)


def discriminator_config(config: TrainConfig, registry: VariableRegistry, n_lat: int) -> DiscriminatorConfig:
    return DiscriminatorConfig(n_lat=n_lat, widths=tuple(config.d_widths), n_state=len(registry.state_names),
                               dilations=tuple(config.d_dilations), spectral_cap=config.spectral_cap)


class Trainer:
    """Owns the models, optimizers, replay buffer and metrics of one run."""

    def __init__(self, dataset: Dataset, stats: Statistics, config: TrainConfig, log_path: str | None = None,
                 generator: Generator | None = None):
        config.validate()
        torch.set_num_threads(config.threads)
        self.config = config
        self.registry = stats.registry
        if self.registry.names() != dataset.registry.names():
            raise ValueError("statistics and dataset registries differ")
        self.grid = dataset.grid
        self.dtype = config.torch_dtype
        sig = SigmaTable(self.registry.state_names, stats.sigma)
        if sig.t_max < config.long_steps:
            raise ValueError(f"sigma table covers {sig.t_max} steps, training needs {config.long_steps}")
        self.sigma = torch.as_tensor(sig.normalized(self.registry), dtype=self.dtype)
        self.x = torch.as_tensor(normalize(dataset.data.astype(np.float64), self.registry, ITERATED, OUTPUT),
                                 dtype=self.dtype)
        self.timestamps = dataset.timestamps
        self.aux = torch.as_tensor(np.stack([
            auxiliary_inputs(int(t), self.grid, self.registry, dataset.static) for t in dataset.timestamps
        ]), dtype=self.dtype)
        self.area = torch.as_tensor(self.grid.area_weights, dtype=self.dtype)
        self.var_weights = torch.as_tensor([v.weight for v in self.registry.by_role(ITERATED, OUTPUT)],
                                           dtype=self.dtype)
        self.n_iter = self.registry.n_iterated
        self.rng = np.random.default_rng(config.seed)
        torch.manual_seed(config.seed)
        if generator is None:
            generator = Generator(generator_config(config, self.registry, self.grid.n_lat), seed=config.seed)
            with torch.no_grad():
                generator.delta_scale.copy_(self.sigma[: self.n_iter, 0])
        self.G = generator.to(self.dtype)
        self.D: Discriminator | None = None
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2))
        self.opt_d = None
        self.replay = ReplayBuffer(config.replay_capacity, np.random.default_rng(config.seed + 7))
        self.log = MetricsLog(log_path)
        self.g_step = 0
        self.d_step = 0
        self.checkpoints: dict[str, str] = {}
        self.last_checkpoint: str | None = None

    # -- helpers ------------------------------------------------------------------------------

    def ensure_discriminator(self) -> Discriminator:
        if self.D is None:
            self.D = Discriminator(discriminator_config(self.config, self.registry, self.grid.n_lat),
                                   seed=self.config.seed).to(self.dtype)
            self.opt_d = torch.optim.Adam(self.D.parameters(), lr=self.config.lr_d,
                                          betas=(self.config.beta1, self.config.beta2))
        return self.D

    def sample_anchors(self, n: int, steps_ahead: int) -> np.ndarray:
        hi = len(self.x) - steps_ahead
        if hi <= 0:
            raise ValueError(f"dataset too short for {steps_ahead}-step trajectories")
        return self.rng.integers(0, hi, size=n)

    def unroll(self, x0: torch.Tensor, start: np.ndarray, steps: int) -> list[torch.Tensor]:
        """Predicted stored states for steps 1..T from iterated input ``x0``.

        ``start`` holds the dataset index of each input's valid time.
        """
        preds, cur = [], x0
        for k in range(steps):
            aux = self.aux[start + k]
            nxt, out_only = self.G(cur, aux)
            preds.append(torch.cat((nxt, out_only), dim=1))
            cur = nxt
        return preds

    def adversarial_pairs(self, first_prev: torch.Tensor, preds: list[torch.Tensor]):
        prevs = [first_prev] + preds[:-1]
        if self.config.adv_pair == "as_written":
            nexts = [preds[0]] * len(preds)
        else:
            nexts = preds
        return torch.cat(prevs, dim=0), torch.cat(nexts, dim=0)

    def _truth_batch(self, spec: PhaseSpec):
        anchors = self.sample_anchors(self.config.batch_size, spec.steps_ahead)
        return anchors, np.zeros(len(anchors), dtype=np.int64), self.x[anchors], None

    def _replay_batch(self, spec: PhaseSpec):
        picked = self.replay.sample(self.config.batch_size)
        picked = [e for e in picked if e.anchor + e.lead + spec.steps_ahead < len(self.x)]
        if not picked:
            return None
        anchors = np.array([e.anchor for e in picked])
        leads = np.array([e.lead for e in picked])
        return anchors, leads, torch.stack([e.state for e in picked]).to(self.dtype), picked

    # -- updates ------------------------------------------------------------------------------

    def generator_update(self, spec: PhaseSpec) -> dict[str, float]:
        batch = None
        if spec.replay and self.rng.random() < self.config.replay_prob:
            batch = self._replay_batch(spec)
        if batch is None:
            batch = self._truth_batch(spec)
        anchors, leads, x0, entries = batch
        start = anchors + leads
        weights = (sample_weights(entries, self.config.replay_multiplier) if entries
                   else np.ones(len(anchors)))
        T = spec.steps_ahead
        preds = self.unroll(x0[:, : self.n_iter], start, T)
        truth = torch.stack([self.x[start + k + 1] for k in range(T)], dim=1)
        l_mse = regression_loss(torch.stack(preds, dim=1), truth, self.sigma, self.area,
                                self.var_weights, torch.as_tensor(weights, dtype=self.dtype))
        terms = {"L_MSE": l_mse}
        total = l_mse
        if spec.adversarial:
            D = self.ensure_discriminator()
            D.requires_grad_(False)
            prev, nxt = self.adversarial_pairs(x0, preds)
            prob, _ = D(prev, nxt)
            l_adv = adversarial_loss_G(prob)
            total = generator_loss(l_mse, l_adv, self.config.alpha)
            terms["L_adv"] = l_adv
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        if self.D is not None:
            self.D.requires_grad_(True)
        if not torch.isfinite(total):
            raise TrainingDiverged(f"non-finite generator loss at step {self.g_step}", self.last_checkpoint)
        self.opt_g.step()
        self.g_step += 1
        terms["L_G"] = total
        if spec.replay:
            with torch.no_grad():
                for i in range(len(anchors)):
                    self.replay.push(ReplayEntry(preds[-1][i].detach().clone(), int(leads[i]) + T,
                                                 int(anchors[i])))
        return {k: float(v.detach()) for k, v in terms.items()}

    def discriminator_update(self, spec: PhaseSpec) -> dict[str, float]:
        D = self.ensure_discriminator()
        T = spec.steps_ahead
        anchors = self.sample_anchors(self.config.batch_size, T)
        with torch.no_grad():
            preds = self.unroll(self.x[anchors][:, : self.n_iter], anchors, T)
        fake_prev, fake_next = self.adversarial_pairs(self.x[anchors], preds)
        real_prev = torch.cat([self.x[anchors + k] for k in range(T)], dim=0)
        real_next = torch.cat([self.x[anchors + k + 1] for k in range(T)], dim=0)
        real_pair = torch.cat((real_prev, real_next), dim=1)
        real_p, _ = D(real_prev, real_next)
        fake_p, _ = D(fake_prev.detach(), fake_next.detach())
        penalty = grad_norm_penalty(D.logit, real_pair)
        l_d = discriminator_loss(real_p, fake_p, penalty, self.config.gamma)
        if not torch.isfinite(l_d):
            raise TrainingDiverged(f"non-finite discriminator loss at step {self.d_step}", self.last_checkpoint)
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.opt_d.step()
        self.d_step += 1
        return {"L_D": float(l_d.detach()), "R1": float(penalty.detach()),
                "D_acc_real": float((real_p > 0.5).to(self.dtype).mean()),
                "D_acc_fake": float((fake_p < 0.5).to(self.dtype).mean())}

    def run_phase(self, spec: PhaseSpec) -> None:
        log.info("phase %s: %d generator steps, T=%d, adversarial=%s, D:G=%d:1, replay=%s",
                 spec.phase, spec.budget, spec.steps_ahead, spec.adversarial, spec.d_per_g, spec.replay)
        self.G.train()
        for _ in range(spec.budget):
            if spec.d_per_g and spec.adversarial:
                for _ in range(spec.d_per_g):
                    self._log(spec.phase, self.discriminator_update(spec))
            g_terms = self.generator_update(spec)
            if spec.d_per_g and not spec.adversarial:
                for _ in range(spec.d_per_g):
                    self._log(spec.phase, self.discriminator_update(spec))
            self._log(spec.phase, g_terms)

    def _log(self, phase: str, terms: dict[str, float]) -> None:
        for name, value in terms.items():
            self.log.add(self.g_step, phase, name, value)

    def checkpoint(self, phase: str) -> str | None:
        if not self.config.checkpoint_dir:
            return None
        os.makedirs(self.config.checkpoint_dir, exist_ok=True)
        path = os.path.join(self.config.checkpoint_dir, f"phase_{phase}.ckpt")
        save_checkpoint(path, self.registry, self.G, self.D,
                        counters={"phase": phase, "g_step": self.g_step, "d_step": self.d_step},
                        extra={"config": cfgfile.dump(self.config)})
        self.checkpoints[phase] = path
        self.last_checkpoint = path
        return path

    def branch(self, config: TrainConfig) -> "Trainer":
        """Independent continuation of this run under ``config`` (e.g. the other schedule after phase 1).

        Data tensors are shared; models, optimizer state, counters, log and
        random state are copied.
        """
        config.validate()
        other = copy.copy(self)
        other.config = config
        other.G = copy.deepcopy(self.G)
        other.opt_g = torch.optim.Adam(other.G.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2))
        other.opt_g.load_state_dict(self.opt_g.state_dict())
        other.D, other.opt_d = None, None
        if self.D is not None:
            other.D = copy.deepcopy(self.D)
            other.opt_d = torch.optim.Adam(other.D.parameters(), lr=config.lr_d, betas=(config.beta1, config.beta2))
            other.opt_d.load_state_dict(self.opt_d.state_dict())
        other.rng = copy.deepcopy(self.rng)
        other.replay = copy.deepcopy(self.replay)
        other.log = MetricsLog(None)
        other.log.records = list(self.log.records)
        other.checkpoints = dict(self.checkpoints)
        return other

    @torch.no_grad()
    def forecast(self, starts: Sequence[int], steps: int) -> np.ndarray:
        """Normalized stored-channel rollouts (steps, n_starts, C, H, W) from dataset indices."""
        starts = np.asarray(starts)
        if starts.min() < 0 or starts.max() >= len(self.x):
            raise ValueError("initial-condition index outside the dataset")
        self.G.eval()
        preds = self.unroll(self.x[starts][:, : self.n_iter], starts, steps) if steps else []
        self.G.train()
        return np.stack([p.double().numpy() for p in preds]) if preds else np.zeros((0,) + tuple(self.x[starts].shape))

    def fit(self, phases: Sequence[PhaseSpec] | None = None) -> "Trainer":
        phases = list(phases) if phases is not None else build_phases(self.config)
        for spec in phases:
            if spec.d_per_g:
                self.ensure_discriminator()
            self.run_phase(spec)
            self.checkpoint(spec.phase)
        return self


def train(dataset: Dataset, stats: Statistics, config: TrainConfig, log_path: str | None = None) -> Trainer:
    """Run the configured schedule end to end."""
    return Trainer(dataset, stats, config, log_path).fit()


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def loss_reduction(values: Sequence[float], window: int = 10) -> float:
    """1 - (best later moving average) / (moving average at step ``window``)."""
    ma = moving_average(values, window)
    if ma.size == 0:
        return math.nan
    return 1.0 - float(ma[1:].min() if ma.size > 1 else ma[0]) / float(ma[0])
