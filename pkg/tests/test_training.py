import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from sphcast.config import ConfigError
from sphcast.models import count_parameters, load_checkpoint
from sphcast.training import (MetricsLog, PhaseSpec, ReplayBuffer, ReplayEntry, Trainer, TrainingDiverged,
                              build_phases, loss_reduction, moving_average, read_metrics, replay_push,
                              replay_sample, sample_weights, train, validate_phase_order)


def entry(k, value=0.0, lead=1):
    return ReplayEntry(torch.full((2, 2, 4), value), lead, k)


def params(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class TestPhases:
    def test_full(self):
        phases = build_phases(tiny_config(schedule="full"))
        assert [p.phase for p in phases] == ["1", "2", "3", "4"]
        p1, p2, p3, p4 = phases
        assert (p1.steps_ahead, p1.adversarial, p1.d_per_g) == (1, False, 0)
        assert (p2.steps_ahead, p2.adversarial, p2.d_per_g) == (1, False, 1)
        assert (p3.steps_ahead, p3.adversarial, p3.d_per_g, p3.replay) == (1, True, 4, False)
        assert (p4.steps_ahead, p4.adversarial, p4.replay) == (4, True, True)

    def test_legacy(self):
        phases = build_phases(tiny_config(schedule="legacy"))
        assert [(p.phase, p.steps_ahead, p.d_per_g) for p in phases] == [("1", 1, 0), ("2a", 4, 0)]

    def test_order_validation(self):
        validate_phase_order(["1", "2", "3", "4"])
        validate_phase_order(["1", "2a"])
        for bad in (["1", "3"], ["2", "1"], ["1", "2", "4", "3"], ["1", "2a", "3"]):
            with pytest.raises(ConfigError):
                validate_phase_order(bad)

    def test_config_validation(self):
        for kw in ({"schedule": "other"}, {"adv_pair": "x"}, {"dtype": "float16"}, {"batch_size": 0},
                   {"steps_phase3": -1}):
            with pytest.raises(ConfigError):
                tiny_config(**kw).validate()


class TestReplay:
    def test_fifo(self):
        buf = ReplayBuffer(2)
        for k in range(3):
            assert replay_push(buf, entry(k))
        assert [e.anchor for e in buf.entries] == [1, 2]

    def test_rejects_non_finite(self):
        buf = ReplayBuffer(4)
        assert not buf.push(entry(0, math.nan))
        assert not buf.push(entry(1, math.inf))
        assert len(buf) == 0

    def test_empty_and_bad_lead(self):
        buf = ReplayBuffer(4)
        assert replay_sample(buf, 3) == []
        with pytest.raises(ValueError):
            buf.push(entry(0, lead=0))
        with pytest.raises(ValueError):
            ReplayBuffer(0)

    def test_sample_without_replacement(self):
        buf = ReplayBuffer(10, np.random.default_rng(3))
        for k in range(10):
            buf.push(entry(k))
        got = buf.sample(6)
        assert len({e.anchor for e in got}) == 6
        assert all(e.replay for e in got) and not any(e.replay for e in buf.entries)
        assert len(buf.sample(50)) == 10

    def test_weights(self):
        entries = [entry(0), ReplayEntry(torch.zeros(1), 2, 1, replay=True)]
        assert list(sample_weights(entries, 0.25)) == [1.0, 0.25]


class TestMetrics:
    def test_file_round_trip(self, tmp_path):
        log = MetricsLog(str(tmp_path / "m.log"))
        log.add(3, "2a", "L_MSE", 0.1)
        log.add(4, "3", "L_D", 1.0 / 3.0)
        assert read_metrics(tmp_path / "m.log") == log.records
        assert log.values("L_D") == [1.0 / 3.0] and log.count("L_MSE", "1") == 0

    def test_moving_average(self):
        assert list(moving_average([1, 2, 3, 4], 2)) == [1.5, 2.5, 3.5]
        assert moving_average([1.0], 2).size == 0
        values = [10.0] * 10 + [5.0] * 10
        assert loss_reduction(values, 10) == 0.5
        assert math.isnan(loss_reduction([1.0] * 3, 10))


class TestTrainer:
    def test_phase_one_only_regression(self, small_data):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config(steps_phase1=3))
        t.fit([build_phases(t.config)[0]])
        assert t.D is None and t.log.count("L_MSE", "1") == 3 and t.log.count("L_adv") == 0

    def test_phase_two_discriminator_ratio(self, small_data):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config(steps_phase2=3))
        t.fit([build_phases(t.config)[1]])
        assert t.log.count("L_D", "2") == 3 and t.log.count("L_MSE", "2") == 3
        assert t.log.count("L_adv", "2") == 0
        assert t.log.values("L_G", "2") == t.log.values("L_MSE", "2")

    def test_phase_three_four_d_updates_first(self, small_data):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config(steps_phase3=3))
        spec = build_phases(t.config)[2]
        t.fit([spec])
        assert t.log.count("L_D", "3") == 12 and t.log.count("L_G", "3") == 3 and t.d_step == 12
        names = [r[2] for r in t.log.records]
        # each generator step is preceded by its four discriminator updates
        first_g = names.index("L_MSE")
        assert names[:first_g].count("L_D") == 4
        assert t.log.count("R1") == 12 and t.log.count("D_acc_real") == 12

    def test_phase_two_generator_ignores_discriminator(self, small_data):
        ds, stats = small_data
        cfg = tiny_config()
        a = Trainer(ds, stats, cfg)
        a.ensure_discriminator()
        b = a.branch(tiny_config())
        with torch.no_grad():
            for p in b.D.parameters():
                p.add_(0.5)
        spec = build_phases(cfg)[1]
        ta = a.generator_update(spec)
        tb = b.generator_update(spec)
        assert ta == tb and "L_adv" not in ta
        assert same(params(a.G), params(b.G))

    def test_legacy_has_no_discriminator(self, small_data):
        ds, stats = small_data
        t = train(ds, stats, tiny_config(schedule="legacy"))
        assert t.D is None and count_parameters(t.D) == 0
        assert t.log.count("L_D") == 0 and t.log.count("L_MSE", "2a") == 1

    def test_phase_four_fills_replay(self, small_data):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config(steps_phase4=2))
        t.fit([build_phases(t.config)[3]])
        assert len(t.replay) > 0
        assert all(e.lead >= 4 and e.lead % 4 == 0 for e in t.replay.entries)
        assert all(e.anchor + e.lead < len(ds) for e in t.replay.entries)

    def test_adversarial_pairs(self, small_data):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config())
        x0 = torch.zeros(1, 2)
        preds = [torch.full((1, 2), float(k + 1)) for k in range(3)]
        prev, nxt = t.adversarial_pairs(x0, preds)
        assert prev[:, 0].tolist() == [0, 1, 2] and nxt[:, 0].tolist() == [1, 2, 3]
        t.config.adv_pair = "as_written"
        prev, nxt = t.adversarial_pairs(x0, preds)
        assert prev[:, 0].tolist() == [0, 1, 2] and nxt[:, 0].tolist() == [1, 1, 1]

    def test_deterministic(self, small_data, tmp_path):
        ds, stats = small_data
        runs = [train(ds, stats, tiny_config(seed=5), log_path=str(tmp_path / f"{k}.log")) for k in range(2)]
        assert same(params(runs[0].G), params(runs[1].G))
        assert same(params(runs[0].D), params(runs[1].D))
        assert (tmp_path / "0.log").read_bytes() == (tmp_path / "1.log").read_bytes()
        other = train(ds, stats, tiny_config(seed=6))
        assert not same(params(runs[0].G), params(other.G))

    def test_checkpoint_at_boundary(self, small_data, tmp_path):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config(checkpoint_dir=str(tmp_path)))
        phases = build_phases(t.config)
        t.fit(phases[:1])
        snapshot = params(t.G)
        t.fit(phases[1:2])
        ck = load_checkpoint(tmp_path / "phase_1.ckpt")
        assert same(params(ck.generator), snapshot)
        assert ck.counters["g_step"] == 2 and ck.discriminator is None
        assert (tmp_path / "phase_2.ckpt").exists()
        assert load_checkpoint(tmp_path / "phase_2.ckpt").discriminator is not None

    def test_divergence_reports_checkpoint(self, small_data, tmp_path):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config(checkpoint_dir=str(tmp_path)))
        phases = build_phases(t.config)
        t.fit(phases[:1])
        with torch.no_grad():
            t.G.head.bias.fill_(math.nan)
        with pytest.raises(TrainingDiverged) as exc:
            t.fit(phases[1:2])
        assert exc.value.last_checkpoint == str(tmp_path / "phase_1.ckpt")

    def test_branch_is_independent(self, small_data):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config())
        t.fit(build_phases(t.config)[:1])
        before = params(t.G)
        b = t.branch(tiny_config(schedule="legacy"))
        b.fit(build_phases(b.config)[1:])
        assert same(params(t.G), before) and not same(params(b.G), before)

    def test_forecast_shape(self, small_data):
        ds, stats = small_data
        t = Trainer(ds, stats, tiny_config())
        out = t.forecast([0, 5], 3)
        assert out.shape == (3, 2, 8, 16, 32) and out.dtype == np.float64
        with pytest.raises(ValueError):
            t.forecast([len(ds)], 1)

    def test_short_sigma_table(self, small_data):
        ds, stats = small_data
        with pytest.raises(ValueError):
            Trainer(ds, stats, tiny_config(long_steps=6))

    def test_phase_spec_is_frozen(self):
        with pytest.raises(Exception):
            PhaseSpec("1", 1, False, 0, 1, False).budget = 3
