"""Command-line entry point: generation, training, runs, evaluation, ablations."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .agent import AgentConfig, run_episode
from .alignment import (
    TrainConfig,
    generate_quadruples,
    load_params,
    load_quadruples,
    save_params,
    save_quadruples,
    train,
    write_train_log,
)
from .backend import DEFAULT_TIMEOUT, BackendClient, parse_backend
from .environment import (
    World,
    WorldParams,
    generate_episode,
    generate_world,
    load_episodes,
    load_world,
    save_episodes,
    save_world,
)
from .errors import ConfigurationError, NavError
from .evaluation import (
    evaluate,
    format_buckets,
    format_table,
    load_results,
    run_ablation,
    run_suite,
    save_pgm,
    save_results,
)
from .reasoner import ReasonerConfig

log = logging.getLogger("imagine_nav")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DEFAULTS: dict[str, object] = {
    "seed.world": 0,
    "seed.episode": 0,
    "seed.train": 0,
    "seed.agent": 0,
    "world.count": 1,
    "world.vocab_size": 32,
    "world.height": 16,
    "world.width": 16,
    "world.channels": 8,
    "world.n_nodes": 36,
    "world.n_rooms": None,
    "world.node_spacing": 2.0,
    "episodes.count": 50,
    "episodes.min_path_len": 0.0,
    "paf_data.n": 5000,
    "paf_data.mask_salient": True,
    "train.lr": 1e-4,
    "train.epochs": 50,
    "train.batch": 32,
    "train.patience": 5,
    "train.dim": 16,
    "train.n_heads": 2,
    "train.val_fraction": 0.1,
    "scheduler.tau_u": 0.5,
    "scheduler.tau_s": 0.6,
    "scheduler.alpha": 0.5,
    "scheduler.window": 4,
    "reasoner.w_similarity": 1.0,
    "reasoner.w_attention": 1.0,
    "reasoner.w_entity": 0.5,
    "reasoner.w_revisit": 0.5,
    "reasoner.stop_base": -0.25,
    "reasoner.temperature": 0.5,
    "agent.max_steps": 20,
    "agent.no_imagination": False,
    "agent.no_filter": False,
    "agent.no_ais": False,
    "agent.no_cot": False,
    "backend.spec": "builtin",
    "backend.timeout": DEFAULT_TIMEOUT,
    "backend.reason": False,
}
SEED_KEYS = ("seed.world", "seed.episode", "seed.train", "seed.agent")
NULLABLE = {"world.n_rooms"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------- config

def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None:
        if key in NULLABLE:
            return None
        raise UsageError(f"{key} cannot be null")
    if isinstance(value, str) and key in NULLABLE and value.lower() in ("null", "none", ""):
        return None
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int) or key in NULLABLE:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"bad value {value!r} for {key}") from None


def resolve_config(config_path: str | None, sets: Sequence[str], seed: int | None) -> dict:
    cfg = dict(DEFAULTS)
    if config_path is not None:
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {config_path}") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config file {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise DataError(f"config file {config_path} must hold a JSON object")
        for key, value in loaded.items():
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r} in {config_path}")
            cfg[key] = _coerce(key, value)
    if seed is not None:
        for key in SEED_KEYS:
            cfg[key] = seed
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key = key.strip()
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value.strip())
    parse_backend_or_usage(cfg["backend.spec"])
    return cfg


def parse_backend_or_usage(spec):
    try:
        return parse_backend(spec)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None


def world_params(cfg: dict) -> WorldParams:
    return WorldParams(
        vocab_size=cfg["world.vocab_size"],
        height=cfg["world.height"],
        width=cfg["world.width"],
        channels=cfg["world.channels"],
        n_nodes=cfg["world.n_nodes"],
        n_rooms=cfg["world.n_rooms"],
        node_spacing=cfg["world.node_spacing"],
    )


def agent_config(cfg: dict) -> AgentConfig:
    return AgentConfig(
        max_steps=cfg["agent.max_steps"],
        no_imagination=cfg["agent.no_imagination"],
        no_filter=cfg["agent.no_filter"],
        no_ais=cfg["agent.no_ais"],
        no_cot=cfg["agent.no_cot"],
        tau_u=cfg["scheduler.tau_u"],
        tau_s=cfg["scheduler.tau_s"],
        alpha=cfg["scheduler.alpha"],
        window=cfg["scheduler.window"],
        reasoner=ReasonerConfig(
            w_similarity=cfg["reasoner.w_similarity"],
            w_attention=cfg["reasoner.w_attention"],
            w_entity=cfg["reasoner.w_entity"],
            w_revisit=cfg["reasoner.w_revisit"],
            stop_base=cfg["reasoner.stop_base"],
            temperature=cfg["reasoner.temperature"],
        ),
        seed=cfg["seed.agent"],
        mask_salient=cfg["paf_data.mask_salient"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"],
        epochs=cfg["train.epochs"],
        batch=cfg["train.batch"],
        patience=cfg["train.patience"],
        seed=cfg["seed.train"],
        dim=cfg["train.dim"],
        n_heads=cfg["train.n_heads"],
        val_fraction=cfg["train.val_fraction"],
    )


def backend_hooks(cfg: dict):
    if parse_backend_or_usage(cfg["backend.spec"]) is None:
        return None, None
    client = BackendClient(cfg["backend.spec"], cfg["backend.timeout"], cfg["paf_data.mask_salient"])
    return client, (client.reason if cfg["backend.reason"] else None)


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict, outputs: Sequence[Path]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(p.name for p in outputs),
    }
    path = out / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- inputs

def _require(path: str | None, what: str, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required ({what})")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load(loader: Callable, path: Path, what: str):
    try:
        return loader(path)
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None
    except (OSError, ValueError, KeyError, TypeError, NavError) as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from None


def load_worlds(path: Path) -> list[World]:
    files = sorted(path.glob("world_*.json")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"no world_*.json files in {path}")
    return [_load(load_world, f, "world file") for f in files]


def pair_episodes(worlds: Sequence[World], episodes) -> list[tuple[World, object]]:
    by_seed = {w.seed: w for w in worlds}
    tasks = []
    for ep in episodes:
        world = by_seed.get(ep.world_seed) if len(worlds) > 1 else worlds[0]
        if world is None:
            raise DataError(f"episode {ep.episode_id} refers to world seed {ep.world_seed}, which was not loaded")
        if not (0 <= ep.start < world.graph.n and 0 <= ep.goal < world.graph.n):
            raise DataError(f"episode {ep.episode_id} does not fit its world")
        tasks.append((world, ep))
    return tasks


def _load_tasks(args):
    worlds = load_worlds(_require(args.worlds, "world file or directory", "--worlds"))
    ep_path = _require(args.episodes, "episode file", "--episodes")
    episodes = _load(load_episodes, ep_path, "episode file")
    if not episodes:
        raise DataError(f"episode file {ep_path} is empty")
    return pair_episodes(worlds, episodes)


def _load_params(args):
    return _load(load_params, _require(args.params, "PAF parameter file", "--params"), "PAF parameter file")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_for(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


# --------------------------------------------------------------------------- commands

def cmd_worldgen(args, cfg) -> int:
    out = _out(args)
    params = world_params(cfg)
    try:
        params.validate()
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    (out / "worlds").mkdir(exist_ok=True)
    written = []
    for i in range(cfg["world.count"]):
        world = generate_world(cfg["seed.world"] + i, params)
        path = out / "worlds" / f"world_{i:03d}.json"
        save_world(world, path)
        written.append(path)
        print(f"{path}: {world.graph.n} viewpoints, {len(world.graph.edges)} edges")
    write_manifest(out, "worldgen", cfg, {}, written)
    return EXIT_OK


def cmd_episodes(args, cfg) -> int:
    worlds = load_worlds(_require(args.worlds, "world file or directory", "--worlds"))
    out = _out(args)
    episodes = []
    for i in range(cfg["episodes.count"]):
        world = worlds[i % len(worlds)]
        try:
            ep = generate_episode(world, _seed_for(cfg["seed.episode"], i), cfg["episodes.min_path_len"], i)
        except NavError as exc:
            raise DataError(f"episode {i}: {exc}") from None
        episodes.append(ep)
    path = out / "episodes.jsonl"
    save_episodes(episodes, path)
    print(f"{path}: {len(episodes)} episodes")
    write_manifest(out, "episodes", cfg, {"worlds": args.worlds}, [path])
    return EXIT_OK


def cmd_paf_data(args, cfg) -> int:
    worlds = load_worlds(_require(args.worlds, "world file or directory", "--worlds"))
    out = _out(args)
    try:
        quads = generate_quadruples(worlds, cfg["paf_data.n"], cfg["seed.train"], cfg["paf_data.mask_salient"])
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    except NavError as exc:
        raise DataError(str(exc)) from None
    path = out / "quadruples.npz"
    save_quadruples(quads, path)
    print(f"{path}: {len(quads)} quadruples")
    write_manifest(out, "paf-data", cfg, {"worlds": args.worlds}, [path])
    return EXIT_OK


def cmd_paf_train(args, cfg) -> int:
    data_path = _require(args.data, "quadruple dataset", "--data")
    quads = _load(load_quadruples, data_path, "quadruple dataset")
    if not quads:
        raise DataError(f"dataset {data_path} is empty")
    out = _out(args)
    result = train(quads, train_config(cfg), on_epoch=lambda r: print(
        f"epoch {r.epoch:3d}  train {r.train_loss:.4f}  val {r.val_loss:.4f}  dice {r.val_dice:.4f}", flush=True))
    params_path, log_path = out / "paf.bin", out / "train_log.jsonl"
    save_params(result.params, params_path)
    write_train_log(result.log, log_path)
    print(f"{params_path}: best epoch {result.best_epoch}")
    write_manifest(out, "paf-train", cfg, {"data": args.data}, [params_path, log_path])
    return EXIT_OK


def cmd_run(args, cfg) -> int:
    tasks = _load_tasks(args)
    params = _load_params(args)
    out = _out(args)
    imaginer, reason_hook = backend_hooks(cfg)
    runs = run_suite(tasks, params, agent_config(cfg), args.jobs, imaginer, reason_hook)
    traj_path = out / "trajectories.jsonl"
    trace_path = Path(args.trace_file) if args.trace_file else out / "traces.jsonl"
    results_path = out / "results.jsonl"
    with open(traj_path, "w") as ft, open(trace_path, "w") as fr:
        for traj, _ in runs:
            ft.write(json.dumps(traj.to_json(), sort_keys=True) + "\n")
            for rec in traj.trace_records():
                fr.write(json.dumps(rec, sort_keys=True) + "\n")
    save_results([r for _, r in runs], results_path)
    print(format_table({"run": evaluate([r for _, r in runs])}))
    write_manifest(out, "run", cfg,
                   {"worlds": args.worlds, "episodes": args.episodes, "params": args.params},
                   [traj_path, trace_path, results_path])
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    path = _require(args.results, "results file", "--results")
    results = _load(load_results, path, "results file")
    if not results:
        raise DataError(f"results file {path} is empty")
    out = _out(args)
    agg = evaluate(results)
    table = format_table({"all": agg})
    print(table)
    (out / "metrics.txt").write_text(table + "\n")
    (out / "metrics.json").write_text(json.dumps(agg.to_json(), indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", cfg, {"results": args.results}, [out / "metrics.txt", out / "metrics.json"])
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    tasks = _load_tasks(args)
    params = _load_params(args)
    out = _out(args)
    imaginer, reason_hook = backend_hooks(cfg)
    report = run_ablation(tasks, params, agent_config(cfg), args.jobs, imaginer=imaginer, reason_hook=reason_hook)
    text = format_table(report.overall) + "\n\n" + format_buckets(report.buckets)
    print(text)
    outputs = [out / "ablation.txt", out / "ablation.json"]
    (out / "ablation.txt").write_text(text + "\n")
    payload = report.to_json()
    payload["configs"] = {name: asdict(c) for name, c in report.configs.items()}
    (out / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n")
    for name, results in report.results.items():
        slug = name.lower().replace("w/o ", "no_").replace(" ", "_")
        path = out / f"results_{slug}.jsonl"
        save_results(results, path)
        trace_path = out / f"traces_{slug}.jsonl"
        with open(trace_path, "w") as fh:
            for traj in report.trajectories[name]:
                for rec in traj.trace_records():
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        outputs += [path, trace_path]
    write_manifest(out, "ablate", cfg,
                   {"worlds": args.worlds, "episodes": args.episodes, "params": args.params}, outputs)
    return EXIT_OK


def cmd_export_map(args, cfg) -> int:
    tasks = _load_tasks(args)
    params = _load_params(args)
    out = _out(args)
    chosen = [t for t in tasks if args.episode is None or t[1].episode_id == args.episode]
    if not chosen:
        raise DataError(f"episode {args.episode} is not in {args.episodes}")
    imaginer, _ = backend_hooks(cfg)
    config = agent_config(cfg)
    (out / "maps").mkdir(exist_ok=True)
    written = []
    for world, ep in chosen:
        traj = run_episode(world, ep, params, config, imaginer, keep_maps=True)
        for t, amap in enumerate(traj.attention_maps):
            path = out / "maps" / f"episode_{ep.episode_id:04d}_step_{t:02d}.pgm"
            save_pgm(amap, path)
            written.append(path)
    print(f"{out / 'maps'}: {len(written)} attention maps")
    write_manifest(out, "export-map", cfg,
                   {"worlds": args.worlds, "episodes": args.episodes, "params": args.params}, written)
    return EXIT_OK


COMMANDS = {
    "worldgen": (cmd_worldgen, "generate world files"),
    "episodes": (cmd_episodes, "generate an episode file for existing worlds"),
    "paf-data": (cmd_paf_data, "synthesize an alignment-filter training set"),
    "paf-train": (cmd_paf_train, "train the alignment filter"),
    "run": (cmd_run, "run the agent on episodes"),
    "eval": (cmd_eval, "aggregate a results file into a metrics table"),
    "ablate": (cmd_ablate, "run the five-variant ablation"),
    "export-map": (cmd_export_map, "dump per-step attention maps as PGM images"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON file of flat dotted keys")
    common.add_argument("--set", metavar="K=V", action="append", default=[], dest="sets",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="set every seed.* key")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="episode-parallel worker processes")
    common.add_argument("--trace-file", metavar="PATH", help="where run writes per-step traces")
    common.add_argument("--backend", metavar="SPEC", help='builtin, exec:"CMD" or tcp:HOST:PORT')
    common.add_argument("--worlds", metavar="PATH", help="world file or directory of world_*.json")
    common.add_argument("--episodes", metavar="PATH", help="episode JSON-lines file")
    common.add_argument("--params", metavar="PATH", help="trained alignment-filter parameters")
    common.add_argument("--data", metavar="PATH", help="quadruple dataset (.npz)")
    common.add_argument("--results", metavar="PATH", help="per-episode results JSON-lines file")
    common.add_argument("--episode", type=int, help="export-map: only this episode id")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="imagine-nav", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        sets = list(args.sets)
        if args.backend is not None:
            sets.append(f"backend.spec={args.backend}")
        cfg = resolve_config(args.config, sets, args.seed)
        return COMMANDS[args.command][0](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    raise SystemExit(main())
