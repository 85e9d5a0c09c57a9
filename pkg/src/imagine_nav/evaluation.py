"""Navigation metrics, aggregate evaluation and the ablation harness."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agent import STOPPED, AgentConfig, Trajectory, run_episode
from .alignment import PafParams
from .environment import Episode, NavGraph, World, geodesic_distance
from .errors import ConfigurationError, ContractError

SUCCESS_RADIUS = 3.0
BUCKETS = ("<8", "8-15", ">15")
ABLATIONS = {
    "Full": {},
    "w/o Img": {"no_imagination": True},
    "w/o Filter": {"no_filter": True},
    "w/o AIS": {"no_ais": True},
    "w/o CoT": {"no_cot": True},
}


def success(traj: Trajectory, episode: Episode, graph: NavGraph, radius: float = SUCCESS_RADIUS) -> bool:
    if traj.termination != STOPPED:
        return False
    return geodesic_distance(graph, traj.final_viewpoint, episode.goal) <= radius


def spl(succeeded: bool, gt_length: float, path_length: float) -> float:
    if gt_length < 0 or path_length < 0:
        raise ContractError("path lengths must be nonnegative")
    if not succeeded:
        return 0.0
    if gt_length == 0:
        return 1.0
    return gt_length / max(path_length, gt_length)


def navigation_error(traj: Trajectory, episode: Episode, graph: NavGraph) -> float:
    return geodesic_distance(graph, traj.final_viewpoint, episode.goal)


@dataclass(frozen=True)
class EpisodeResult:
    episode_id: int
    success: bool
    spl: float
    ne: float
    tl: float
    steps: int
    gt_length: float
    failure_flags: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeResult":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def score_episode(traj: Trajectory, episode: Episode, world: World) -> EpisodeResult:
    ok = success(traj, episode, world.graph)
    return EpisodeResult(
        episode_id=episode.episode_id,
        success=ok,
        spl=spl(ok, episode.gt_length, traj.path_length),
        ne=navigation_error(traj, episode, world.graph),
        tl=traj.path_length,
        steps=len(traj.actions),
        gt_length=episode.gt_length,
        failure_flags=dict(traj.failure_flags),
    )


@dataclass(frozen=True)
class Aggregate:
    sr: float
    spl: float
    ne: float
    tl: float
    n: int

    def to_json(self) -> dict:
        return {"SR": self.sr, "SPL": self.spl, "NE": self.ne, "TL": self.tl, "n": self.n}


def evaluate(results: Sequence[EpisodeResult]) -> Aggregate:
    if not results:
        raise ConfigurationError("cannot evaluate an empty result set")
    return Aggregate(
        sr=100.0 * float(np.mean([r.success for r in results])),
        spl=100.0 * float(np.mean([r.spl for r in results])),
        ne=float(np.mean([r.ne for r in results])),
        tl=float(np.mean([r.tl for r in results])),
        n=len(results),
    )


def bucket_of(gt_length: float) -> str:
    if gt_length < 0:
        raise ContractError(f"negative path length {gt_length}")
    if gt_length < 8.0:
        return "<8"
    return "8-15" if gt_length <= 15.0 else ">15"


def by_bucket(results: Sequence[EpisodeResult]) -> dict[str, Aggregate | None]:
    groups: dict[str, list[EpisodeResult]] = {name: [] for name in BUCKETS}
    for r in results:
        groups[bucket_of(r.gt_length)].append(r)
    return {name: evaluate(g) if g else None for name, g in groups.items()}


# --------------------------------------------------------------------------- running

Task = tuple[World, Episode]


def _run_one(args) -> tuple[Trajectory, EpisodeResult]:
    world, episode, params, config, imaginer, reason_hook = args
    traj = run_episode(world, episode, params, config, imaginer, reason_hook)
    return traj, score_episode(traj, episode, world)


def run_suite(
    tasks: Sequence[Task],
    params: PafParams,
    config: AgentConfig,
    jobs: int = 1,
    imaginer: Callable | None = None,
    reason_hook: Callable | None = None,
) -> list[tuple[Trajectory, EpisodeResult]]:
    """Run every episode; results come back ordered by episode id."""
    ordered = sorted(tasks, key=lambda t: t[1].episode_id)
    ids = [ep.episode_id for _, ep in ordered]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("episode ids must be unique within a suite")
    work = [(w, ep, params, config, imaginer, reason_hook) for w, ep in ordered]
    if jobs <= 1 or len(work) <= 1:
        return [_run_one(a) for a in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work, chunksize=max(1, len(work) // (4 * jobs))))


@dataclass
class AblationReport:
    overall: dict[str, Aggregate]
    buckets: dict[str, dict[str, Aggregate | None]]
    results: dict[str, list[EpisodeResult]]
    trajectories: dict[str, list[Trajectory]]
    configs: dict[str, AgentConfig]

    def to_json(self) -> dict:
        return {
            "variants": {name: agg.to_json() for name, agg in self.overall.items()},
            "buckets": {
                name: {b: (a.to_json() if a else None) for b, a in row.items()}
                for name, row in self.buckets.items()
            },
        }


def run_ablation(
    tasks: Sequence[Task],
    params: PafParams,
    config: AgentConfig | None = None,
    jobs: int = 1,
    variants: dict[str, dict] | None = None,
    imaginer: Callable | None = None,
    reason_hook: Callable | None = None,
) -> AblationReport:
    if not tasks:
        raise ConfigurationError("ablation needs at least one episode")
    base = config or AgentConfig()
    variants = variants or ABLATIONS
    overall, buckets, results, trajs, configs = {}, {}, {}, {}, {}
    for name, flags in variants.items():
        off = {"no_imagination": False, "no_filter": False, "no_ais": False, "no_cot": False}
        cfg = replace(base, **{**off, **flags})
        runs = run_suite(tasks, params, cfg, jobs, imaginer, reason_hook)
        res = [r for _, r in runs]
        overall[name] = evaluate(res)
        buckets[name] = by_bucket(res)
        results[name] = res
        trajs[name] = [t for t, _ in runs]
        configs[name] = cfg
    return AblationReport(overall, buckets, results, trajs, configs)


# --------------------------------------------------------------------------- output

def format_table(rows: dict[str, Aggregate]) -> str:
    """Aligned plain-text table with TL, NE, SR and SPL columns."""
    name_w = max([len("Variant")] + [len(k) for k in rows])
    header = f"{'Variant':<{name_w}}  {'TL':>7}  {'NE':>7}  {'SR':>6}  {'SPL':>6}  {'n':>5}"
    lines = [header, "-" * len(header)]
    for name, a in rows.items():
        lines.append(f"{name:<{name_w}}  {a.tl:7.2f}  {a.ne:7.2f}  {a.sr:6.1f}  {a.spl:6.1f}  {a.n:5d}")
    return "\n".join(lines)


def format_buckets(buckets: dict[str, dict[str, Aggregate | None]]) -> str:
    names = list(BUCKETS)
    name_w = max([len("Variant")] + [len(k) for k in buckets])
    header = f"{'Variant':<{name_w}}" + "".join(f"  {'SR ' + b:>12}" for b in names)
    lines = [header, "-" * len(header)]
    for variant, row in buckets.items():
        cells = []
        for b in names:
            a = row.get(b)
            cells.append(f"  {'-':>12}" if a is None else f"  {f'{a.sr:.1f} ({a.n})':>12}")
        lines.append(f"{variant:<{name_w}}" + "".join(cells))
    return "\n".join(lines)


def save_results(results: Sequence[EpisodeResult], path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_results(path) -> list[EpisodeResult]:
    with open(path) as fh:
        return [EpisodeResult.from_json(json.loads(line)) for line in fh if line.strip()]


def attention_to_pgm(attention: np.ndarray) -> bytes:
    a = np.asarray(attention, float)
    if a.ndim != 2:
        raise ContractError(f"attention map must be 2-D, got shape {a.shape}")
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ContractError("attention values must lie in [0, 1]")
    pixels = np.round(255.0 * a).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def save_pgm(attention: np.ndarray, path) -> None:
    Path(path).write_bytes(attention_to_pgm(attention))


def read_pgm(data: bytes) -> np.ndarray:
    """Parse the PGM layout written by :func:`attention_to_pgm`."""
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ContractError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    if int(parts[2]) != 255:
        raise ContractError(f"unsupported maxval {parts[2]!r}")
    pixels = np.frombuffer(parts[3][: w * h], np.uint8)
    return pixels.reshape(h, w)
