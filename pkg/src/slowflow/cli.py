"""Generate data, train, roll out, score and plot slow-field emulators.

    slowflow gen-data | train | rollout | evaluate | plot | inspect-graph

Every subcommand takes ``--config FILE`` plus ``--set section.key=value``
overrides; ``--ablate name=value`` is shorthand for ``--set ablate.name=value``.
Exit codes: 0 ok, 1 error, 2 rollout divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .cascade import DivergenceError, ModelStack, rollout
from .config import ConfigError, RunConfig, load_config
from .data import (CHANNELS, N_FORCE, N_PROG, PERIODIC, PROGNOSTIC, ClimatologyTable, DataError, FieldState,
                   NormStats, PhysicsParams, Preprocessor, compute_climatology, generate_synthetic,
                   make_land_mask, split_days, to_anomaly)
from .fileio import atomic_write, read_fields, write_fields
from .graph import GridSpec, build_graph, write_edge_list
from .metrics import Verifier, evaluate_rollouts, stack_forecaster
from .model import GraphConstants
from .plot import write_field_csv, write_ppm
from .training import TrainingError, WindowData, train_stack

log = logging.getLogger("slowflow")

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2
SPLITS = ("train", "valid", "test")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- dataset files


def dataset_files(data_dir) -> dict[str, Path]:
    d = Path(data_dir)
    out = {s: d / f"{s}.nomf" for s in SPLITS}
    out["climatology"] = d / "climatology.nomf"
    out["stats"] = d / "norm_stats.json"
    out["manifest"] = d / "dataset.json"
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"missing {what}: expected {path}")
    return path


def make_grid(cfg: RunConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec.regular(g.n_lat, g.n_lon, make_land_mask(g.n_lat, g.n_lon, g.land_seed, g.land_fraction))


def clim_to_states(clim: ClimatologyTable, land_mask) -> list[FieldState]:
    return [FieldState(k, clim.channels, clim.values[k], land_mask.copy()) for k in range(clim.period)]


def states_to_clim(states: list[FieldState]) -> ClimatologyTable:
    return ClimatologyTable(len(states), states[0].channels, np.stack([s.values for s in states]))


def load_splits(cfg: RunConfig):
    files = dataset_files(cfg.paths.data_dir)
    seqs = {s: read_fields(_require(files[s], f"{s} split")) for s in SPLITS}
    clim = states_to_clim(read_fields(_require(files["climatology"], "climatology file")))
    stats = json.loads(_require(files["stats"], "normalisation stats").read_text())
    return seqs, clim, stats


def preprocessor(cfg: RunConfig, clim_all: ClimatologyTable, stats: dict, land_mask) -> Preprocessor:
    if cfg.ablate.use_climatology:
        return Preprocessor(NormStats.from_dict(stats["anomaly"]), clim_all.subset(PERIODIC), land_mask.copy())
    return Preprocessor(NormStats.from_dict(stats["raw"]), None, land_mask.copy())


def grid_from_states(seq: list[FieldState]) -> GridSpec:
    n_lat, n_lon = seq[0].land_mask.shape
    return GridSpec.regular(n_lat, n_lon, seq[0].land_mask)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    files = dataset_files(cfg.paths.data_dir)
    existing = [p for p in files.values() if p.exists()]
    if existing and not args.force:
        raise CommandError(f"{existing[0]} already exists; pass --force to overwrite")
    grid = make_grid(cfg)
    dc = cfg.data
    states = generate_synthetic(cfg.seed, dc.n_days, grid, PhysicsParams(period=dc.period, noise=dc.noise))
    sp = split_days(states, dc.n_train, dc.n_valid, dc.n_test)
    clim = compute_climatology(sp.train, dc.period, CHANNELS)
    stats = {
        "anomaly": NormStats.from_states([to_anomaly(s, clim.subset(PERIODIC)) for s in sp.train]).to_dict(),
        "raw": NormStats.from_states(sp.train).to_dict(),
    }
    for name in SPLITS:
        write_fields(getattr(sp, name), files[name])
    write_fields(clim_to_states(clim, grid.land_mask), files["climatology"])
    atomic_write(files["stats"], json.dumps(stats, indent=2, sort_keys=True).encode())
    manifest = {"seed": cfg.seed, "grid": cfg.to_dict()["grid"], "data": cfg.to_dict()["data"]}
    atomic_write(files["manifest"], json.dumps(manifest, indent=2, sort_keys=True).encode())
    for p in files.values():
        log.info("wrote %s (%d bytes)", p, p.stat().st_size)
    return EXIT_OK


def _graph_constants(cfg: RunConfig, grid: GridSpec) -> GraphConstants:
    return GraphConstants(build_graph(grid, cfg.mesh.level, cfg.mesh.radius_factor))


def final_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.paths.checkpoint_dir) / "final"


def cmd_train(cfg: RunConfig, args) -> int:
    seqs, clim_all, stats = load_splits(cfg)
    grid = grid_from_states(seqs["train"])
    pre = preprocessor(cfg, clim_all, stats, grid.land_mask)
    tr = WindowData(*pre.arrays(seqs["train"]))
    va = WindowData(*pre.arrays(seqs["valid"]))
    gc = _graph_constants(cfg, grid)
    ab = cfg.ablate
    stack = ModelStack.create(N_PROG, N_FORCE, Q=1, hidden=cfg.model.hidden, blocks=cfg.model.blocks,
                              pei=ab.use_pei, aggregation=ab.mana, seed=cfg.seed + cfg.training.seed)
    ckpt = Path(cfg.paths.checkpoint_dir)
    if (ckpt / "final").exists() and not (args.force or args.resume):
        raise CommandError(f"{ckpt / 'final'} already exists; pass --force to retrain or --resume to continue")
    if args.force and not args.resume and (ckpt / "phases").exists():
        shutil.rmtree(ckpt / "phases")
    report = train_stack(stack, gc, tr, va, cfg.training, prc=ab.use_prc, checkpoint_dir=ckpt / "phases",
                         resume=args.resume)
    stack.metadata = {"config": cfg.to_dict()}
    stack.save(ckpt / "final")
    out = Path(cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "train_report.csv")
    log.info("trained Q=%d stack in %.1fs; report at %s", stack.Q, report.wall_clock, out / "train_report.csv")
    return EXIT_OK


def _load_trained(cfg: RunConfig):
    path = _require(final_checkpoint(cfg) / "stack.json", "trained checkpoint")
    stack = ModelStack.load(path.parent)
    seqs, clim_all, stats = load_splits(cfg)
    grid = grid_from_states(seqs["test"])
    pre = preprocessor(cfg, clim_all, stats, grid.land_mask)
    return stack, seqs, clim_all, grid, pre, _graph_constants(cfg, grid)


def cmd_rollout(cfg: RunConfig, args) -> int:
    stack, seqs, _, grid, pre, gc = _load_trained(cfg)
    test = seqs["test"]
    days = [s.day for s in test]
    init = days[0] if args.init_day is None else args.init_day
    if init not in days:
        raise CommandError(f"init day {init} is not in the test split (days {days[0]}..{days[-1]})")
    i = days.index(init)
    if i + args.horizon >= len(test):
        raise CommandError(f"horizon {args.horizon} from day {init} runs past the test split")
    prog, force, d = pre.arrays(test[i:i + args.horizon + 1])
    out = Path(args.output or Path(cfg.paths.report_dir) / f"trajectory_{init}_{args.horizon}.nomf")
    code = EXIT_OK
    try:
        states = rollout(prog[0], force, stack, gc).states
    except DivergenceError as exc:
        states = exc.partial.states
        log.error("rollout diverged at step %d; writing %d completed steps", exc.step, len(states))
        code = EXIT_DIVERGED
    phys = pre.physical_prognostic(np.stack(states), d[1:len(states) + 1], grid.land_mask.shape) if states else []
    seq = [FieldState(int(d[k + 1]), PROGNOSTIC, phys[k].astype(np.float32), grid.land_mask.copy())
           for k in range(len(states))]
    write_fields(seq, out, PROGNOSTIC, grid.land_mask)
    log.info("wrote %d-step trajectory to %s", len(seq), out)
    return code


def cmd_evaluate(cfg: RunConfig, args) -> int:
    stack, seqs, clim_all, grid, pre, gc = _load_trained(cfg)
    ec = cfg.evaluate
    verifier = Verifier.fit(seqs["train"], clim_all, grid.lat, ec.quantile, ec.conventional_far)
    forecast = stack_forecaster(stack, gc, pre, seqs["test"])
    report = evaluate_rollouts(forecast, seqs["test"], verifier, ec.leads, ec.n_ics, ec.ic_stride)
    out = Path(args.output or Path(cfg.paths.report_dir) / "metrics.csv")
    report.write(out)
    log.info("wrote metric report to %s", out)
    return EXIT_OK


def cmd_plot(cfg: RunConfig, args) -> int:
    seq = read_fields(_require(Path(args.input), "field file"))
    if not seq:
        raise CommandError(f"{args.input} holds no records")
    channels = seq[0].channels
    if args.variable not in channels:
        raise CommandError(f"variable {args.variable!r} not found; available: {', '.join(channels)}")
    if not 0 <= args.step < len(seq):
        raise CommandError(f"step {args.step} out of range 0..{len(seq) - 1}")
    state = seq[args.step]
    field = state.channel(args.variable)
    write_ppm(field, state.land_mask, args.output, args.vmin, args.vmax)
    if args.csv:
        write_field_csv(field, args.csv)
    log.info("wrote %s (%dx%d)", args.output, field.shape[1], field.shape[0])
    return EXIT_OK


def cmd_inspect_graph(cfg: RunConfig, args) -> int:
    g = build_graph(make_grid(cfg), cfg.mesh.level, cfg.mesh.radius_factor)
    summary = g.summary()
    print(json.dumps(summary, indent=2))
    if args.edges_dir:
        d = Path(args.edges_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, edges in (("mesh", g.mesh_edges), ("g2m", g.g2m), ("m2g", g.m2g)):
            write_edge_list(edges, d / f"{name}_edges.txt")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "inspect-graph": cmd_inspect_graph,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. training.Q=3")
    common.add_argument("--ablate", action="append", default=[], metavar="NAME=VALUE",
                        help="prc=on|off, pei=on|off, mana=adaptive|sum_only|mean_only, climatology=on|off")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="slowflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="generate synthetic splits")
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    t = sub.add_parser("train", parents=[common], help="train a model stack")
    t.add_argument("--force", action="store_true", help="retrain over an existing checkpoint")
    t.add_argument("--resume", action="store_true", help="continue from the last completed phase")
    r = sub.add_parser("rollout", parents=[common], help="autoregressive rollout from a test day")
    r.add_argument("--init-day", type=int, help="absolute day index (default: first test day)")
    r.add_argument("--horizon", type=int, default=10)
    r.add_argument("--output", help="trajectory file (NOMF)")
    e = sub.add_parser("evaluate", parents=[common], help="score rollouts on the test split")
    e.add_argument("--output", help="CSV report path")
    e.add_argument("--leads", type=int, nargs="+", help="lead times in days (overrides evaluate.leads)")
    pl = sub.add_parser("plot", parents=[common], help="PPM heatmap of one field")
    pl.add_argument("--input", required=True, help="NOMF field or trajectory file")
    pl.add_argument("--variable", required=True)
    pl.add_argument("--step", type=int, default=0, help="record index")
    pl.add_argument("--vmin", type=float)
    pl.add_argument("--vmax", type=float)
    pl.add_argument("--output", default="field.ppm")
    pl.add_argument("--csv", help="also dump the raw field as CSV")
    ig = sub.add_parser("inspect-graph", parents=[common], help="print graph statistics")
    ig.add_argument("--edges-dir", help="write edge lists here")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    for item in args.ablate:
        overrides.append(f"ablate.{item}" if "=" in item else item)
    cfg = load_config(args.config, overrides)
    if args.command == "evaluate" and getattr(args, "leads", None):
        cfg.evaluate.leads = args.leads
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        log.info("resolved config: %s", cfg.to_json())
        return COMMANDS[args.command](cfg, args)
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (CommandError, ConfigError, DataError, TrainingError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
