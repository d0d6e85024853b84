import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)

from sphcast.objectives import channel_stats, compute_sigma_stats  # noqa: E402
from sphcast.spherical import Grid  # noqa: E402
from sphcast.training import TrainConfig  # noqa: E402
from sphcast.weatherdata import Statistics, synth_generate  # noqa: E402


def fitted(ds, t_max=4):
    """Dataset with registry normalization refit to its own data, plus statistics."""
    names = ds.registry.state_names
    m, s = channel_stats(ds.data, ds.grid.area_weights)
    reg = ds.registry.with_stats(dict(zip(names, m)), dict(zip(names, s)))
    ds.registry = reg
    return ds, Statistics(reg, compute_sigma_stats(ds.data, reg, t_max, ds.grid.area_weights).sigma)


@pytest.fixture(scope="session")
def small_data():
    return fitted(synth_generate(3, Grid(16), 40))


def tiny_config(**kw):
    base = dict(g_widths=(8, 8, 8, 8), g_pairs=1, g_windows=("4x8", "4x8", "2x4", "2x4"),
                d_widths=(4, 4, 4, 4), batch_size=2, steps_phase1=2, steps_phase2=1, steps_phase3=1,
                steps_phase4=1, steps_phase2a=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
