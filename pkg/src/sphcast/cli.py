"""Command-line entry point: ``sphcast <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

import numpy as np
import torch

from . import config as cfgfile
from .container import FormatError
from .models import Forecaster, WeatherState, load_checkpoint, save_checkpoint
from .objectives import channel_stats, compute_sigma_stats
from .spherical import Grid, max_degree
from .tracker import DEFAULT_RADIUS_DEG, min_radius, track, write_track
from .training import TrainConfig, TrainingDiverged, train
from .verification import EvalSpec, climatology_id, energy_spectrum, evaluate_run
from .weatherdata import (STATIC, Dataset, Statistics, SynthConfig, climatology,
                          read_dataset, read_statistics, synth_generate, write_dataset, write_statistics)

log = logging.getLogger("sphcast")

DEFAULT_SEED = 0


def _seed(args) -> int:
    if args.seed is None:
        log.info("seed = %d (default)", DEFAULT_SEED)
        return DEFAULT_SEED
    log.info("seed = %d", args.seed)
    return args.seed


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfgfile.ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load_config(cls, path, overrides):
    if path:
        return cfgfile.load(cls, path, overrides)
    return cfgfile.from_mapping(cls, overrides)


# commands --------------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    seed = _seed(args)
    synth = _load_config(SynthConfig, args.config, _overrides(args.set))
    ds = synth_generate(seed, Grid(args.n_lat), args.samples, config=synth)
    write_dataset(ds, args.out)
    log.info("wrote %d samples on %dx%d to %s", len(ds), *ds.grid.shape, args.out)


def cmd_stats(args) -> None:
    ds = read_dataset(args.data)
    reg = ds.registry
    means, stds = channel_stats(ds.data, ds.grid.area_weights)
    names = reg.state_names
    m, s = dict(zip(names, means)), dict(zip(names, stds))
    if reg.by_role(STATIC):
        sm, ss = channel_stats(ds.static[None], ds.grid.area_weights)
        for name, a, b in zip(reg.names(STATIC), sm, ss):
            m[name], s[name] = a, (b if b > 0 else reg.by_role(STATIC)[reg.names(STATIC).index(name)].std)
    reg = reg.with_stats(m, s)
    table = compute_sigma_stats(ds.data, reg, args.t_max, ds.grid.area_weights)
    write_statistics(Statistics(reg, table.sigma), args.out)
    log.info("wrote statistics for %d variables x %d leads to %s", len(names), args.t_max, args.out)


def cmd_train(args) -> None:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.checkpoint_dir:
        overrides["checkpoint_dir"] = args.checkpoint_dir
    cfg = _load_config(TrainConfig, args.config, overrides)
    log.info("seed = %d%s", cfg.seed, "" if "seed" in overrides else " (default)")
    ds = read_dataset(args.data)
    stats = read_statistics(args.stats)
    trainer = train(ds, stats, cfg, log_path=args.log)
    save_checkpoint(args.out, trainer.registry, trainer.G, trainer.D,
                    counters={"g_step": trainer.g_step, "d_step": trainer.d_step, "phase": "final"},
                    extra={"config": cfgfile.dump(cfg)})
    log.info("wrote checkpoint %s after %d generator / %d discriminator steps", args.out, trainer.g_step,
             trainer.d_step)


def cmd_infer(args) -> None:
    ck = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    if ds.registry.names() != ck.registry.names():
        raise ValueError("dataset variables do not match the checkpoint")
    if not 0 <= args.index < len(ds):
        raise ValueError(f"initial index {args.index} outside 0..{len(ds) - 1}")
    fc = Forecaster(ck.generator, ck.registry, ds.static)
    state = WeatherState(int(ds.timestamps[args.index]), ds.data[args.index].astype(np.float64), ck.registry)
    states = fc.rollout(state, args.steps)
    if not states:
        raise ValueError("--steps must be at least 1")
    out = Dataset(ds.registry, ds.grid, np.array([s.valid_time for s in states], dtype=np.int64),
                  np.stack([s.data for s in states]).astype(np.float32), ds.static, ds.timestep)
    write_dataset(out, args.out)
    log.info("wrote %d-step rollout from %d to %s", args.steps, state.valid_time, args.out)


def cmd_evaluate(args) -> None:
    fc = read_dataset(args.forecast)
    truth = read_dataset(args.truth)
    if fc.registry.names() != truth.registry.names() or fc.grid != truth.grid:
        raise ValueError("forecast and truth datasets are not aligned in variables or grid")
    where = {int(t): i for i, t in enumerate(truth.timestamps)}
    missing = [int(t) for t in fc.timestamps if int(t) not in where]
    if missing:
        raise ValueError(f"truth lacks valid times {missing[:3]}")
    idx = [where[int(t)] for t in fc.timestamps]
    clim_ds = read_dataset(args.climatology) if args.climatology else truth
    spec = _load_config(EvalSpec, args.config, _overrides(args.set))
    spec = dataclasses.replace(spec, climatology_id=climatology_id(args.climatology or args.truth))
    report = evaluate_run(fc.data, truth.data[idx], climatology(clim_ds.data), fc.registry.state_names,
                          fc.grid, spec, fc.timestamps, truth.timestamps[idx],
                          step_hours=fc.timestep // 3600)
    report.write(args.out)
    log.info("wrote %d report rows to %s", len(report.rows), args.out)


def cmd_track(args) -> None:
    ds = read_dataset(args.data)
    fields = ds.channel(args.variable)[args.first:]
    radius = args.radius
    if radius is None:
        radius = max(DEFAULT_RADIUS_DEG, 1.5 * min_radius(ds.grid))
        log.info("search radius = %.4f deg", radius)
    points = track(fields, (args.lat, args.lon), radius, ds.grid, [int(t) for t in ds.timestamps[args.first:]])
    write_track(args.out, points)
    log.info("tracked %d points; %s", len(points), points[-1].reason if points else "terminated at start")


def cmd_spectra(args) -> None:
    ds = read_dataset(args.data)
    field = ds.channel(args.variable)[args.index]
    l_max = args.l_max if args.l_max is not None else min((ds.grid.n_lat - 1) // 2, max_degree(ds.grid.n_lat))
    spec = energy_spectrum(field, l_max)
    with open(args.out, "w") as fh:
        for l, e in enumerate(spec):
            fh.write(f"{l}, {float(e)!r}\n")
    log.info("wrote %d-degree spectrum of %s[%d] to %s", l_max + 1, args.variable, args.index, args.out)


def cmd_defaults(args) -> None:
    parts = []
    for title, cls in (("train", TrainConfig), ("gen-data", SynthConfig), ("evaluate", EvalSpec)):
        parts.append(f"# [{title}]\n" + cfgfile.dump(cls()))
    text = "\n".join(parts)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sphcast", description="Desk-scale spherical weather forecasting pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, seed=False, config=False):
        if seed:
            sp.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--threads", type=int, default=None, help="torch intra-op threads (1 = deterministic)")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-lat", type=int, default=32)
    sp.add_argument("--samples", type=int, default=400)
    common(sp, seed=True, config=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("stats", help="fit normalization and per-lead sigma statistics")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--t-max", type=int, default=4)
    common(sp)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("train", help="run the phased training schedule")
    sp.add_argument("--data", required=True)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--out", required=True, help="final checkpoint path")
    sp.add_argument("--log", help="metrics log path")
    sp.add_argument("--checkpoint-dir", help="directory for phase-boundary checkpoints")
    common(sp, seed=True, config=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="autoregressive rollout from one dataset sample")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0, help="initial-condition sample index")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate", help="score a forecast dataset against truth")
    sp.add_argument("--forecast", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--climatology", help="dataset whose time mean is the climatology (default: truth)")
    sp.add_argument("--out", required=True)
    common(sp, config=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("track", help="follow a pressure minimum through a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--lat", type=float, required=True)
    sp.add_argument("--lon", type=float, required=True)
    sp.add_argument("--radius", type=float, default=None, help="search radius in degrees")
    sp.add_argument("--variable", default="sp")
    sp.add_argument("--first", type=int, default=0, help="first sample index")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("spectra", help="per-degree energy of one field")
    sp.add_argument("--data", required=True)
    sp.add_argument("--variable", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--l-max", type=int, default=None)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_spectra)

    sp = sub.add_parser("defaults", help="print every configurable key with its default")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_defaults, threads=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stdout,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads is not None:
        torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except cfgfile.ConfigError as exc:
        print(f"sphcast {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"sphcast {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, FormatError, FloatingPointError, RuntimeError) as exc:
        print(f"sphcast {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
