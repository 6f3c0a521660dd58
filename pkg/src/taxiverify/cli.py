"""Command line entry points: ``taxiverify <subcommand> [flags]``.

Every subcommand writes into ``--out`` together with ``config.json`` (the
effective configuration and toolkit version).  Settings come from defaults,
then ``--config FILE`` (JSON), then explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, closed_loop, export, recall, training
from .bnb import DEFAULT_BUDGET, DEFAULT_TOL
from .grid import BINS, Grid
from .network import Network, NetworkError, concatenate, evaluate, load, save
from .plant import LatentSource, PlantParams, simulate_batch, write_trajectories
from .render import load_dataset_csv, make_dataset, render_batch
from .zonotope import Box

log = logging.getLogger("taxiverify")

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_DIVERGED = 0, 2, 3, 4

FIG4_STARTS = [[float(p), 0.0] for p in range(-8, 9, 2)]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    out: str = "out"
    seed: int = 0
    threads: int = 1
    tol: float = DEFAULT_TOL
    budget: int = DEFAULT_BUDGET
    latent_lo: list = field(default_factory=lambda: [-closed_loop.LATENT_BOUND] * 2)
    latent_hi: list = field(default_factory=lambda: [closed_loop.LATENT_BOUND] * 2)
    grid_bins: list = field(default_factory=lambda: list(BINS))
    dt: float = 0.1
    v: float = 5.0
    wheelbase: float = 5.0
    # networks and data
    generator: str | None = None
    controller: str | None = None
    passthrough: bool = False
    action_bounds: str | None = None
    dataset: str | None = None
    max_uncertified: float = 0.0
    # train
    n_samples: int = 10000
    gen_hidden: list = field(default_factory=lambda: list(training.GENERATOR_CONFIG.hidden))
    gen_epochs: int = training.GENERATOR_CONFIG.epochs
    gen_lr: float = training.GENERATOR_CONFIG.lr
    ctl_hidden: list = field(default_factory=lambda: list(training.CONTROLLER_CONFIG.hidden))
    ctl_epochs: int = training.CONTROLLER_CONFIG.epochs
    ctl_lr: float = training.CONTROLLER_CONFIG.lr
    ctl_noise: float = training.CONTROLLER_CONFIG.input_noise
    batch_size: int = 64
    optimizer: str = "adam"
    save_dataset: bool = False
    # forward reach
    init_lo: list = field(default_factory=lambda: [-10.0, -10.0])
    init_hi: list = field(default_factory=lambda: [10.0, 10.0])
    max_steps: int = 400
    cross_check: int = 0
    # simulate
    starts: list = field(default_factory=lambda: [list(s) for s in FIG4_STARTS])
    steps: int = 200
    image_source: str = "generator"
    latent_source: str = "random"
    # recall / eval-preds
    n_records: int = 200
    self_targets: bool = False
    n_eval: int = 2000

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.tol > 0, "tol must be positive")
        need(self.budget >= 1, "budget must be at least 1")
        need(self.threads >= 1, "threads must be at least 1")
        need(len(self.grid_bins) == 2 and min(self.grid_bins) >= 1, "grid_bins needs two positive counts")
        need(min(self.dt, self.v, self.wheelbase) > 0, "dt, v and wheelbase must be positive")
        need(len(self.latent_lo) == len(self.latent_hi), "latent_lo and latent_hi differ in length")
        need(all(a <= b for a, b in zip(self.latent_lo, self.latent_hi)), "latent_lo exceeds latent_hi")
        need(len(self.init_lo) == 2 == len(self.init_hi), "init_lo/init_hi are (p, theta) pairs")
        need(0.0 <= self.max_uncertified <= 1.0, "max_uncertified is a fraction")
        need(self.n_samples >= 1 and self.n_records >= 1 and self.n_eval >= 1, "sample counts must be positive")
        need(min(self.gen_epochs, self.ctl_epochs, self.steps, self.max_steps, self.cross_check) >= 0,
             "epochs, steps and cross_check must be non-negative")
        need(self.image_source in ("generator", "render", "state"), "image_source is generator, render or state")
        need(self.latent_source in ("zero", "random"), "latent_source is zero or random")
        need(self.optimizer in ("adam", "sgd"), "optimizer is adam or sgd")
        for s in self.starts:
            need(len(s) == 2, "each start is a (p, theta) pair")

    def echo(self) -> dict:
        """Effective settings written next to the results.

        ``threads`` and ``out`` are left out: neither changes any result, and
        leaving them out keeps output directories comparable byte for byte.
        """
        d = dataclasses.asdict(self)
        d.pop("threads")
        d.pop("out")
        return {"version": __version__, **d}

    @property
    def grid(self) -> Grid:
        return Grid(bins=tuple(self.grid_bins))

    @property
    def plant(self) -> PlantParams:
        return PlantParams(v=self.v, L=self.wheelbase, dt=self.dt)

    @property
    def latent(self) -> Box:
        return Box(self.latent_lo, self.latent_hi)


# -- argument parsing ---------------------------------------------------------------


def _pair(kind):
    def parse(text):
        parts = text.replace(",", " ").split()
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two values, got {text!r}")
        return [kind(v) for v in parts]

    return parse


def _ints(text):
    return [int(v) for v in text.replace(",", " ").split()]


def _bins(text):
    v = _ints(text)
    if len(v) == 1:
        v = v * 2
    if len(v) != 2:
        raise argparse.ArgumentTypeError("--grid-bins takes N or NP,NT")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    # defaults are None so that only flags given on the command line override the config
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes; results do not depend on it")
    p.add_argument("--tol", type=float, help="branch-and-bound gap tolerance")
    p.add_argument("--budget", type=int, help="branch-and-bound node budget per query")
    p.add_argument("--latent-lo", type=_pair(float), help="e.g. -0.8,-0.8")
    p.add_argument("--latent-hi", type=_pair(float))
    p.add_argument("--grid-bins", type=_bins, help="N or NP,NT")
    p.add_argument("--dt", type=float, help="time step, s")
    p.add_argument("-v", "--verbose", action="store_true")


def _networks(p):
    p.add_argument("--generator")
    p.add_argument("--controller")
    p.add_argument("--passthrough", action="store_const", const=True,
                   help="perfect-perception composite instead of generator + controller")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taxiverify", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="render a dataset and train generator and controller")
    _common(p)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--gen-hidden", type=_ints)
    p.add_argument("--gen-epochs", type=int)
    p.add_argument("--ctl-hidden", type=_ints)
    p.add_argument("--ctl-epochs", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--save-dataset", action="store_const", const=True)

    p = sub.add_parser("verify-safety", help="per-cell safety labels")
    _common(p)
    _networks(p)
    p.add_argument("--action-bounds", help="reuse a cached action_bounds.csv")
    p.add_argument("--max-uncertified", type=float, help="tolerated fraction of uncertified cells")

    p = sub.add_parser("forward-reach", help="reachable cell sets over time")
    _common(p)
    _networks(p)
    p.add_argument("--action-bounds")
    p.add_argument("--max-uncertified", type=float)
    p.add_argument("--init-lo", type=_pair(float), help="p,theta; lo > hi gives an empty region")
    p.add_argument("--init-hi", type=_pair(float))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--cross-check", type=int, help="number of simulations checked against the sets")

    p = sub.add_parser("recall", help="certified distances to the generator range")
    _common(p)
    p.add_argument("--generator")
    p.add_argument("--dataset", help="dataset CSV; rendered fresh from --seed if absent")
    p.add_argument("--n-records", type=int)
    p.add_argument("--self-targets", action="store_const", const=True,
                   help="targets are the generator's own images")
    p.add_argument("--full-latent", action="store_const", const=True, help="latent box [-1, 1]^2")
    p.add_argument("--max-uncertified", type=float)

    p = sub.add_parser("simulate", help="closed-loop trajectories")
    _common(p)
    _networks(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--start", action="append", type=_pair(float), dest="starts", help="p,theta (repeatable)")
    p.add_argument("--image-source", choices=["generator", "render", "state"])
    p.add_argument("--latent-source", choices=["zero", "random"])

    p = sub.add_parser("eval-preds", help="controller predictions on rendered and generated images")
    _common(p)
    p.add_argument("--generator")
    p.add_argument("--controller")
    p.add_argument("--n-eval", type=int)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
        base.pop("version", None)
    skip = {"command", "config", "verbose", "full_latent"}
    flags = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    if getattr(args, "full_latent", None):
        flags["latent_lo"], flags["latent_hi"] = [-1.0, -1.0], [1.0, 1.0]
    try:
        cfg = RunConfig.from_dict({**base, **flags})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


# -- helpers -------------------------------------------------------------------------------


def _load_net(path, what) -> Network:
    if not path:
        raise ConfigError(f"--{what} is required")
    try:
        return load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"{what} network not found: {path}") from exc
    except (NetworkError, ValueError) as exc:
        raise ConfigError(f"{what} network {path}: {exc}") from exc


def _composite(cfg: RunConfig) -> Network:
    if cfg.passthrough:
        return closed_loop.passthrough_composite(len(cfg.latent_lo))
    gen, ctl = _load_net(cfg.generator, "generator"), _load_net(cfg.controller, "controller")
    return concatenate(gen, ctl)


def _progress(done, total):
    log.info("action bounds %d/%d", done, total)


def _action_table(cfg: RunConfig, out: Path):
    """Action bounds from the cache file when given, else computed; always written to ``out``."""
    grid = cfg.grid
    if cfg.action_bounds:
        try:
            table = export.read_action_table(cfg.action_bounds, grid)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"action bounds cache: {exc}") from exc
    else:
        table = closed_loop.compute_action_table(
            _composite(cfg), grid, cfg.latent, cfg.tol, cfg.budget, cfg.threads, progress=_progress
        )
    export.write_action_table(out / "action_bounds.csv", table)
    return table


def _budget_status(n_bad: int, n: int, cfg: RunConfig, what: str) -> int:
    if n and n_bad / n > cfg.max_uncertified:
        log.error("%d of %d %s uncertified (allowed fraction %g)", n_bad, n, what, cfg.max_uncertified)
        return EXIT_BUDGET
    return EXIT_OK


def _estimator(cfg: RunConfig):
    if cfg.passthrough or cfg.image_source == "state":
        return lambda s, z: s
    ctl = _load_net(cfg.controller, "controller")
    if cfg.image_source == "render":
        dom = cfg.grid.domain

        def est(s, z):
            # images only exist inside the rendering domain
            return evaluate(ctl, render_batch(np.clip(s, dom.lo, dom.hi), np.clip(z, -1.0, 1.0)))

        return est
    gen = _load_net(cfg.generator, "generator")
    comp = concatenate(gen, ctl)
    ip, it = comp.index_of("p"), comp.index_of("theta")

    def est(s, z):
        x = np.empty((len(s), comp.input_dim))
        lat = [k for k in range(comp.input_dim) if k not in (ip, it)]
        x[:, [ip, it]] = s
        x[:, lat] = z
        return evaluate(comp, x)

    return est


def _latents(cfg: RunConfig, seed_offset: int = 0) -> LatentSource:
    return LatentSource(cfg.latent_source, cfg.latent, seed=cfg.seed + seed_offset)


# -- subcommands ----------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out: Path) -> int:
    ds = make_dataset(cfg.n_samples, cfg.seed)
    if cfg.save_dataset:
        from .render import save_dataset_csv

        save_dataset_csv(ds, out / "dataset.csv")
    common = dict(optimizer=cfg.optimizer, batch_size=cfg.batch_size)
    gcfg = training.TrainConfig(hidden=cfg.gen_hidden, lr=cfg.gen_lr, epochs=cfg.gen_epochs,
                                seed=cfg.seed + 1, **common)
    ccfg = training.TrainConfig(hidden=cfg.ctl_hidden, lr=cfg.ctl_lr, epochs=cfg.ctl_epochs,
                                seed=cfg.seed + 2, input_noise=cfg.ctl_noise, **common)
    try:
        gen, gl = training.train_generator(ds, gcfg)
        ctl, cl = training.train_controller(ds, ccfg)
    except training.TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    save(gen, out / "generator.json")
    save(ctl, out / "controller.json")
    with open(out / "losses.csv", "w") as fh:
        fh.write("network,epoch,loss\n")
        for name, trace in (("generator", gl), ("controller", cl)):
            for e, v in enumerate(trace):
                fh.write(f"{name},{e},{float(v)!r}\n")
    log.info("generator loss %.4g -> %.4g, controller loss %.4g -> %.4g", gl[0], gl[-1], cl[0], cl[-1])
    return EXIT_OK


SAFETY_SHADES = {closed_loop.SAFE: 0.75, closed_loop.INCONCLUSIVE: 0.0}


def cmd_verify_safety(cfg: RunConfig, out: Path) -> int:
    grid = cfg.grid
    table = _action_table(cfg, out)
    tm = closed_loop.build_transitions(grid, table, cfg.plant)
    res = closed_loop.backward_safety(tm)
    export.write_safe_cells(out / "safe_cells.csv", grid, res)
    shades = np.where(res.safe, SAFETY_SHADES[closed_loop.SAFE], SAFETY_SHADES[closed_loop.INCONCLUSIVE])
    export.write_heatmap(out / "safety.pgm", grid, shades)
    with open(out / "summary.csv", "w") as fh:
        fh.write("n_cells,n_safe,n_uncertified,sweeps,grid_bins\n")
        fh.write(f"{grid.n_cells},{int(res.safe.sum())},{table.n_uncertified},{res.sweeps},"
                 f"{grid.bins[0]}x{grid.bins[1]}\n")
    log.info("%d of %d cells SAFE", int(res.safe.sum()), grid.n_cells)
    return _budget_status(table.n_uncertified, grid.n_cells, cfg, "cells")


def cmd_forward_reach(cfg: RunConfig, out: Path) -> int:
    grid = cfg.grid
    table = _action_table(cfg, out)
    tm = closed_loop.build_transitions(grid, table, cfg.plant)
    # an inverted init box stands for the empty region
    empty = any(a > b for a, b in zip(cfg.init_lo, cfg.init_hi))
    init = None if empty else Box(cfg.init_lo, cfg.init_hi)
    reach = closed_loop.forward_reach(tm, init, cfg.max_steps)
    rdir = out / "reach"
    rdir.mkdir(exist_ok=True)
    for t, m in enumerate(reach.sets):
        export.write_cell_set(rdir / f"reach_{t:04d}.csv", grid, m)
        export.write_heatmap(rdir / f"reach_{t:04d}.pgm", grid, m.astype(np.float64))
    export.write_rle(out / "reach_rle.txt", reach.sets)

    final = reach.sets[-1]
    lo, hi = grid.all_bounds()
    cells = np.flatnonzero(final[: grid.n_cells])
    p_min = float(lo[cells, 0].min()) if cells.size else float("nan")
    p_max = float(hi[cells, 0].max()) if cells.size else float("nan")
    half = closed_loop.RUNWAY_HALF_WIDTH
    inside = bool(not final[grid.n_cells] and (cells.size == 0 or (p_min >= -half and p_max <= half)))

    violations = 0
    if cfg.cross_check and init is not None:
        rng = np.random.default_rng(cfg.seed)
        starts = init.sample(rng, cfg.cross_check)
        sims = simulate_batch(_estimator(cfg), starts, cfg.max_steps, cfg.plant, _latents(cfg, 1))
        violations = len(closed_loop.containment_violations(reach, grid, sims))
    conv = "" if reach.converged_at is None else reach.converged_at
    with open(out / "converged.csv", "w") as fh:
        fh.write("converged_at,n_sets,final_cells,sink_reached,p_min,p_max,inside_runway,"
                 "cross_check_runs,cross_check_violations\n")
        fh.write(f"{conv},{len(reach.sets)},{cells.size},{int(final[grid.n_cells])},{p_min!r},{p_max!r},"
                 f"{int(inside)},{cfg.cross_check if init is not None else 0},{violations}\n")
    log.info("converged_at=%s final cells=%d violations=%d", conv, cells.size, violations)
    status = _budget_status(table.n_uncertified, grid.n_cells, cfg, "cells")
    if violations:
        log.error("%d simulated states fell outside the reach sets", violations)
        return max(status, 1)
    return status


def cmd_recall(cfg: RunConfig, out: Path) -> int:
    gen = _load_net(cfg.generator, "generator")
    if cfg.dataset:
        try:
            ds = load_dataset_csv(cfg.dataset)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"dataset: {exc}") from exc
        ds = ds.subset(slice(0, cfg.n_records))
    else:
        ds = make_dataset(cfg.n_records, cfg.seed + 1000)
    states = ds.states
    if cfg.self_targets:
        rng = np.random.default_rng(cfg.seed)
        z = cfg.latent.sample(rng, len(states))
        targets = training.generate(gen, states, z)
    else:
        targets = ds.images
    recs = recall.nearest_distances(gen, states, targets, cfg.latent, cfg.tol, cfg.budget, cfg.threads)
    d = np.array([r.distance for r in recs])
    recall.write_distances(out / "distances.csv", recs)
    recall.write_recall(out / "recall.csv", recall.recall_curve(recs, recall.default_r_grid(d)))
    recall.write_histogram(out / "histogram.csv", d)
    n_bad = sum(not r.certified for r in recs)
    log.info("mean distance %.4g, %d uncertified", d.mean(), n_bad)
    return _budget_status(n_bad, len(recs), cfg, "records")


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    trajs = simulate_batch(_estimator(cfg), cfg.starts, cfg.steps, cfg.plant, _latents(cfg))
    write_trajectories(out / "trajectories.csv", trajs)
    return EXIT_OK


def cmd_eval_preds(cfg: RunConfig, out: Path) -> int:
    gen, ctl = _load_net(cfg.generator, "generator"), _load_net(cfg.controller, "controller")
    ds = make_dataset(cfg.n_eval, cfg.seed + 2000)
    rendered = evaluate(ctl, ds.images)
    generated = evaluate(ctl, training.generate(gen, ds.states, ds.latents))
    with open(out / "predictions.csv", "w") as fh:
        fh.write("source,p,theta,z1,z2,p_hat,theta_hat\n")
        for name, pred in (("render", rendered), ("generator", generated)):
            for s, z, y in zip(ds.states, ds.latents, pred):
                fh.write(f"{name},{s[0]!r},{s[1]!r},{z[0]!r},{z[1]!r},{float(y[0])!r},{float(y[1])!r}\n")
    with open(out / "rmse.csv", "w") as fh:
        fh.write("source,rmse_p,rmse_theta\n")
        for name, pred in (("render", rendered), ("generator", generated)):
            r = np.sqrt(np.mean((pred - ds.states) ** 2, axis=0))
            fh.write(f"{name},{float(r[0])!r},{float(r[1])!r}\n")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "verify-safety": cmd_verify_safety,
    "forward-reach": cmd_forward_reach,
    "recall": cmd_recall,
    "simulate": cmd_simulate,
    "eval-preds": cmd_eval_preds,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.echo(), indent=2, sort_keys=True) + "\n")
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"taxiverify: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
