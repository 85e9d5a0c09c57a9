"""Procedural indoor worlds: navigation graph, semantic sectors, rendering, episodes."""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, GenerationError, LookupFailure, UnreachableError

WORLD_FORMAT_VERSION = 1
GRID_MAGIC = b"VGRD"
BACKGROUND_MAX = 0.1
CODE_TABLE_SEED = 20240611

ENTITY_NAMES = (
    "kitchen", "sofa", "stairs", "bed", "bathtub", "sink", "television", "fireplace",
    "dining table", "bookshelf", "piano", "wardrobe", "desk", "armchair", "plant", "mirror",
    "washing machine", "refrigerator", "painting", "rug", "lamp", "toilet", "shower", "oven",
    "window", "doorway", "railing", "counter", "cabinet", "chandelier", "shelf", "bench",
)


def entity_name(entity: int) -> str:
    if 0 <= entity < len(ENTITY_NAMES):
        return ENTITY_NAMES[entity]
    return f"entity {entity}"


@dataclass(frozen=True)
class WorldParams:
    vocab_size: int = 32
    height: int = 16
    width: int = 16
    channels: int = 8
    n_nodes: int = 36
    # None draws 3..8 clusters from the seed
    n_rooms: int | None = None
    node_spacing: float = 2.0

    def validate(self) -> None:
        if self.vocab_size < 4:
            raise ConfigurationError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.height < 4 or self.width < 4:
            raise ConfigurationError(f"grid must be at least 4x4, got {self.height}x{self.width}")
        if self.channels < 4:
            raise ConfigurationError(f"channels must be >= 4, got {self.channels}")
        if not 10 <= self.n_nodes <= 500:
            raise ConfigurationError(f"n_nodes must be in [10, 500], got {self.n_nodes}")
        if self.n_rooms is not None and not 3 <= self.n_rooms <= 8:
            raise ConfigurationError(f"n_rooms must be in [3, 8], got {self.n_rooms}")
        if self.node_spacing <= 0:
            raise ConfigurationError("node_spacing must be positive")
        _code_weight(self.vocab_size, self.channels)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


def _code_weight(vocab_size: int, channels: int) -> int:
    for k in range(1, channels + 1):
        if math.comb(channels, k) >= vocab_size:
            return k
    raise ConfigurationError(
        f"vocabulary of {vocab_size} cannot be coded in {channels} channels"
    )


@lru_cache(maxsize=32)
def _code_table_cached(vocab_size: int, channels: int) -> np.ndarray:
    k = _code_weight(vocab_size, channels)
    supports = list(combinations(range(channels), k))
    order = np.random.default_rng(CODE_TABLE_SEED).permutation(len(supports))[:vocab_size]
    table = np.zeros((vocab_size, channels))
    for row, idx in enumerate(order):
        table[row, list(supports[idx])] = 1.0 / math.sqrt(k)
    table.setflags(write=False)
    return table


def code_table(vocab_size: int, channels: int) -> np.ndarray:
    """Fixed per-entity appearance codes: nonnegative, unit-norm, pairwise distinct k-hot rows.

    k is the smallest support size with enough combinations for the vocabulary,
    which keeps the largest pairwise cosine at (k-1)/k.
    """
    return _code_table_cached(vocab_size, channels)


# --------------------------------------------------------------------------- graph

@dataclass(frozen=True)
class NavGraph:
    positions: np.ndarray  # (N, 3) meters
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        n = len(self.positions)
        seen = set()
        adj: list[list[int]] = [[] for _ in range(n)]
        for a, b in self.edges:
            if a == b:
                raise ConfigurationError(f"self-loop at viewpoint {a}")
            if not (0 <= a < n and 0 <= b < n):
                raise ConfigurationError(f"edge ({a}, {b}) references unknown viewpoint")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ConfigurationError(f"duplicate edge {key}")
            seen.add(key)
            if self.edge_length(a, b) <= 0:
                raise ConfigurationError(f"edge {key} has zero length")
            adj[a].append(b)
            adj[b].append(a)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(x)) for x in adj))

    @property
    def n(self) -> int:
        return len(self.positions)

    def neighbors(self, v: int) -> tuple[int, ...]:
        self._check(v)
        return self._adj[v]

    def edge_length(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def heading(self, a: int, b: int) -> float:
        d = self.positions[b] - self.positions[a]
        return math.atan2(d[1], d[0]) % (2 * math.pi)

    def sectors(self, v: int) -> list[int]:
        """Neighbors of ``v`` ordered by increasing heading (ties by id)."""
        return sorted(self.neighbors(v), key=lambda u: (self.heading(v, u), u))

    def has_edge(self, a: int, b: int) -> bool:
        return b in self._adj[a]

    def _check(self, v: int) -> None:
        if not (isinstance(v, (int, np.integer)) and 0 <= v < self.n):
            raise LookupFailure(f"unknown viewpoint {v!r}")

    def is_connected(self) -> bool:
        if self.n == 0:
            return True
        seen = {0}
        frontier = [0]
        while frontier:
            v = frontier.pop()
            for u in self._adj[v]:
                if u not in seen:
                    seen.add(u)
                    frontier.append(u)
        return len(seen) == self.n


def dijkstra(graph: NavGraph, source: int) -> tuple[np.ndarray, np.ndarray]:
    """Distances and predecessor array from ``source``; unreachable nodes get inf / -1."""
    graph._check(source)
    dist = np.full(graph.n, np.inf)
    prev = np.full(graph.n, -1, dtype=int)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, v = heapq.heappop(heap)
        if d > dist[v]:
            continue
        for u in graph.neighbors(v):
            nd = d + graph.edge_length(v, u)
            # deterministic tie-break towards the lower predecessor id
            if nd < dist[u] - 1e-12 or (abs(nd - dist[u]) <= 1e-12 and v < prev[u]):
                dist[u] = nd
                prev[u] = v
                heapq.heappush(heap, (nd, u))
    return dist, prev


def shortest_path(graph: NavGraph, a: int, b: int) -> tuple[list[int], float]:
    graph._check(a)
    graph._check(b)
    if a == b:
        return [a], 0.0
    dist, prev = dijkstra(graph, a)
    if not np.isfinite(dist[b]):
        raise UnreachableError(f"viewpoint {b} is unreachable from {a}")
    path = [b]
    while path[-1] != a:
        path.append(int(prev[path[-1]]))
    path.reverse()
    length = sum(graph.edge_length(u, v) for u, v in zip(path, path[1:]))
    return path, length


def geodesic_distance(graph: NavGraph, a: int, b: int) -> float:
    return shortest_path(graph, a, b)[1]


def route_through(graph: NavGraph, stops: Sequence[int]) -> tuple[list[int], float]:
    """Shortest route visiting ``stops`` in order."""
    path = [stops[0]]
    total = 0.0
    for a, b in zip(stops, stops[1:]):
        seg, length = shortest_path(graph, a, b)
        path.extend(seg[1:])
        total += length
    return path, total


# --------------------------------------------------------------------------- world

@dataclass(frozen=True)
class World:
    graph: NavGraph
    # semantics[v][sector] -> entity ids, dominant first; sector order == graph.sectors(v)
    semantics: tuple[tuple[tuple[int, ...], ...], ...]
    params: WorldParams
    seed: int | None = None
    rooms: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.semantics) != self.graph.n:
            raise ConfigurationError("semantics must cover every viewpoint")
        for v, sectors in enumerate(self.semantics):
            if len(sectors) != len(self.graph.neighbors(v)) or not sectors:
                raise ConfigurationError(f"viewpoint {v} needs one sector per neighbor")
            for ents in sectors:
                if not ents or any(not 0 <= e < self.params.vocab_size for e in ents):
                    raise ConfigurationError(f"viewpoint {v} has an invalid sector entity list")

    def sector_entities(self, v: int, neighbor: int) -> tuple[int, ...]:
        order = self.graph.sectors(v)
        return self.semantics[v][order.index(neighbor)]

    def marker(self, v: int) -> int:
        """Dominant entity seen when looking at ``v`` from any neighbor."""
        u = self.graph.neighbors(v)[0]
        return self.sector_entities(u, v)[0]

    def entities_at(self, v: int) -> set[int]:
        return {e for sector in self.semantics[v] for e in sector}


def generate_world(seed: int, params: WorldParams | None = None) -> World:
    params = params or WorldParams()
    params.validate()
    rng = np.random.default_rng([seed, 0x57])
    n_rooms = params.n_rooms or int(rng.integers(3, 9))
    n_rooms = min(n_rooms, params.n_nodes // 2)
    positions, rooms = _layout(rng, params, n_rooms)
    edges = _connect(positions, rooms, params.node_spacing, rng)
    graph = NavGraph(positions, tuple(edges))
    markers, themes = _assign_markers(rng, params, rooms, n_rooms)
    semantics = _sector_semantics(graph, rooms, markers, themes)
    return World(graph, semantics, params, seed, tuple(int(r) for r in rooms))


def _layout(rng, params: WorldParams, n_rooms: int):
    sizes = np.full(n_rooms, params.n_nodes // n_rooms)
    sizes[: params.n_nodes % n_rooms] += 1
    room_cols = math.ceil(math.sqrt(n_rooms))
    spacing = params.node_spacing
    cell = spacing * (math.ceil(math.sqrt(sizes.max())) + 0.5)
    positions, rooms = [], []
    for r, size in enumerate(sizes):
        origin = np.array([(r % room_cols) * cell, (r // room_cols) * cell])
        cols = math.ceil(math.sqrt(size))
        for i in range(size):
            jitter = rng.uniform(-0.15, 0.15, size=2) * spacing
            xy = origin + np.array([i % cols, i // cols]) * spacing + jitter
            positions.append([xy[0], xy[1], 0.0])
            rooms.append(r)
    return np.round(np.array(positions), 6), np.array(rooms)


def _mst(points: np.ndarray) -> list[tuple[int, int]]:
    n = len(points)
    in_tree = np.zeros(n, bool)
    in_tree[0] = True
    best = np.linalg.norm(points - points[0], axis=1)
    parent = np.zeros(n, int)
    out = []
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        v = int(np.argmin(cand))
        out.append((int(parent[v]), v))
        in_tree[v] = True
        d = np.linalg.norm(points - points[v], axis=1)
        closer = d < best
        best = np.where(closer, d, best)
        parent = np.where(closer, v, parent)
    return out


def _connect(positions, rooms, spacing, rng) -> list[tuple[int, int]]:
    edges: set[tuple[int, int]] = set()
    n_rooms = rooms.max() + 1
    for r in range(n_rooms):
        idx = np.flatnonzero(rooms == r)
        pts = positions[idx]
        for a, b in _mst(pts):
            edges.add(tuple(sorted((int(idx[a]), int(idx[b])))))
        for i, j in combinations(range(len(idx)), 2):
            if np.linalg.norm(pts[i] - pts[j]) <= 1.3 * spacing:
                edges.add(tuple(sorted((int(idx[i]), int(idx[j])))))
    centers = np.array([positions[rooms == r].mean(axis=0) for r in range(n_rooms)])
    doors = set(_mst(centers))
    # one extra doorway so layouts are not always trees of rooms
    if n_rooms > 2:
        extra = sorted(
            (float(np.linalg.norm(centers[a] - centers[b])), a, b)
            for a, b in combinations(range(n_rooms), 2)
            if (a, b) not in doors and (b, a) not in doors
        )
        if extra and rng.random() < 0.5:
            doors.add((extra[0][1], extra[0][2]))
    for ra, rb in sorted(doors):
        ia, ib = np.flatnonzero(rooms == ra), np.flatnonzero(rooms == rb)
        d = np.linalg.norm(positions[ia][:, None] - positions[ib][None], axis=2)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        edges.add(tuple(sorted((int(ia[i]), int(ib[j])))))
    return sorted(edges)


def _assign_markers(rng, params: WorldParams, rooms: np.ndarray, n_rooms: int):
    table = code_table(params.vocab_size, params.channels)
    sims = table @ table.T
    themes = [int(t) for t in rng.choice(params.vocab_size, size=n_rooms, replace=False)]
    usage = np.zeros(params.vocab_size, int)
    usage[themes] = 1_000  # themes are room-scale cues, never point markers
    markers = np.zeros(len(rooms), int)
    for r in range(n_rooms):
        theme = themes[r]
        order = np.argsort(-sims[theme] + rng.uniform(0, 1e-3, params.vocab_size))
        palette = [int(e) for e in order if e not in themes][: max(6, np.sum(rooms == r))]
        for v in np.flatnonzero(rooms == r):
            choice = min(palette, key=lambda e: (usage[e], -sims[theme, e], rng.random()))
            markers[v] = choice
            usage[choice] += 1
    return markers, themes


def _sector_semantics(graph: NavGraph, rooms, markers, themes):
    semantics = []
    for v in range(graph.n):
        sectors = []
        for u in graph.sectors(v):
            ents = [int(markers[u])]
            beyond = _beyond(graph, v, u)
            if beyond is not None and markers[beyond] not in ents:
                ents.append(int(markers[beyond]))
            # a doorway view shows the theme of the room beyond it
            seen_rooms = [rooms[u]] + ([rooms[beyond]] if beyond is not None else [])
            other = [r for r in seen_rooms if r != rooms[v]]
            if other and len(ents) < 3 and themes[other[0]] not in ents:
                ents.append(int(themes[other[0]]))
            sectors.append(tuple(ents))
        semantics.append(tuple(sectors))
    return tuple(semantics)


def _beyond(graph: NavGraph, v: int, u: int) -> int | None:
    """Neighbor of ``u`` that continues the line of sight from ``v`` (within 60 degrees)."""
    h = graph.heading(v, u)
    best, best_dev = None, math.radians(60)
    for w in graph.neighbors(u):
        if w == v:
            continue
        dev = abs((graph.heading(u, w) - h + math.pi) % (2 * math.pi) - math.pi)
        if dev < best_dev - 1e-12:
            best, best_dev = w, dev
    return best


# --------------------------------------------------------------------------- rendering

@dataclass(frozen=True)
class Panorama:
    candidates: tuple[int, ...]
    headings: tuple[float, ...]
    tiles: tuple[np.ndarray, ...]
    entities: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.tiles)

    @property
    def grid(self) -> np.ndarray:
        return np.concatenate(self.tiles, axis=1)

    @property
    def tile_width(self) -> int:
        return self.tiles[0].shape[1]


def entity_regions(height: int, width: int, n_entities: int) -> list[tuple[slice, slice]]:
    """Rectangular cell regions for a sector view: dominant entity fills the lower
    three quarters, up to two distant entities share the top band."""
    band = max(1, height // 4)
    regions = [(slice(band, height), slice(0, width))]
    top = 1 if band >= 2 else 0
    gap = 1 if width >= 8 else 0
    half = width // 2
    for j in range(min(n_entities - 1, 2)):
        regions.append((slice(top, band), slice(j * half + gap, (j + 1) * half)))
    return regions


def render_tile(entities: Sequence[int], params: WorldParams, rng: np.random.Generator) -> np.ndarray:
    table = code_table(params.vocab_size, params.channels)
    tile = rng.uniform(0.0, BACKGROUND_MAX, size=params.grid_shape)
    for e, (rows, cols) in zip(entities, entity_regions(params.height, params.width, len(entities))):
        tile[rows, cols] = table[e]
    return np.clip(tile, 0.0, 1.0)


def render_observation(world: World, viewpoint: int, rng_seed: int) -> Panorama:
    order = world.graph.sectors(viewpoint)
    rng = np.random.default_rng([rng_seed, viewpoint])
    tiles = []
    for sector, _ in enumerate(order):
        tiles.append(render_tile(world.semantics[viewpoint][sector], world.params, rng))
    return Panorama(
        candidates=tuple(order),
        headings=tuple(world.graph.heading(viewpoint, u) for u in order),
        tiles=tuple(tiles),
        entities=tuple(world.semantics[viewpoint]),
    )


def decode_entities(grid: np.ndarray, table: np.ndarray, threshold: float = 0.5) -> list[int]:
    """Entities whose code is the argmax for at least one sufficiently bright cell."""
    scores = grid.reshape(-1, grid.shape[-1]) @ table.T
    present = scores.max(axis=1) > threshold
    return sorted({int(e) for e in np.argmax(scores[present], axis=1)}) if present.any() else []


def region_labels(grid: np.ndarray, table: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Per-cell entity id (argmax over the code table) or -1 for background cells."""
    scores = grid @ table.T
    labels = np.argmax(scores, axis=-1)
    return np.where(scores.max(axis=-1) > threshold, labels, -1)


# --------------------------------------------------------------------------- episodes

@dataclass(frozen=True)
class Episode:
    episode_id: int
    start: int
    goal: int
    instruction_text: str
    entities: tuple[int, ...]
    landmarks: tuple[int, ...]
    gt_path: tuple[int, ...]
    gt_length: float
    world_seed: int | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["instruction"] = {"text": d.pop("instruction_text"), "entities": list(d.pop("entities"))}
        d["landmarks"] = list(self.landmarks)
        d["gt_path"] = list(self.gt_path)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        return cls(
            episode_id=int(d["episode_id"]),
            start=int(d["start"]),
            goal=int(d["goal"]),
            instruction_text=d["instruction"]["text"],
            entities=tuple(int(e) for e in d["instruction"]["entities"]),
            landmarks=tuple(int(v) for v in d["landmarks"]),
            gt_path=tuple(int(v) for v in d["gt_path"]),
            gt_length=float(d["gt_length"]),
            world_seed=d.get("world_seed"),
        )


def instruction_text(entities: Sequence[int]) -> str:
    names = [entity_name(e) for e in entities]
    if len(names) == 1:
        return f"find the {names[0]}"
    middle = "".join(f", then the {n}" for n in names[1:-1])
    return f"go to the {names[0]}{middle}, then find the {names[-1]}"


def generate_episode(world: World, seed: int, min_path_len: float = 0.0, episode_id: int = 0) -> Episode:
    rng = np.random.default_rng([seed, 0xE9])
    graph = world.graph
    pairs = []
    for a in range(graph.n):
        dist, _ = dijkstra(graph, a)
        for b in range(graph.n):
            if a != b and dist[b] >= min_path_len:
                pairs.append((a, b))
    if not pairs:
        raise GenerationError(f"no viewpoint pair is at least {min_path_len} m apart")
    start, goal = pairs[int(rng.integers(len(pairs)))]
    path, _ = shortest_path(graph, start, goal)
    goal_entity = world.marker(goal)
    interior = [v for v in path[1:-1] if world.marker(v) != goal_entity]
    n_land = min(int(rng.integers(1, 4)), len(interior))
    landmarks: list[int] = []
    if n_land:
        # distinct, consecutive-distinct markers keep the instruction unambiguous
        for idx in sorted(rng.choice(len(interior), size=n_land, replace=False)):
            v = interior[idx]
            if all(world.marker(v) != world.marker(w) for w in landmarks):
                landmarks.append(v)
    entities = tuple(world.marker(v) for v in landmarks) + (goal_entity,)
    gt_path, gt_length = route_through(graph, [start, *landmarks, goal])
    return Episode(
        episode_id=episode_id,
        start=start,
        goal=goal,
        instruction_text=instruction_text(entities),
        entities=entities,
        landmarks=tuple(landmarks),
        gt_path=tuple(gt_path),
        gt_length=gt_length,
        world_seed=world.seed,
    )


# --------------------------------------------------------------------------- files

def world_to_json(world: World) -> dict:
    p = world.params
    return {
        "version": WORLD_FORMAT_VERSION,
        "seed": world.seed,
        "params": asdict(p),
        "viewpoints": [{"id": i, "pos": [float(x) for x in pos]} for i, pos in enumerate(world.graph.positions)],
        "edges": [list(e) for e in world.graph.edges],
        "semantics": {
            str(v): {str(s): list(ents) for s, ents in enumerate(sectors)}
            for v, sectors in enumerate(world.semantics)
        },
        "rooms": list(world.rooms),
    }


def world_from_json(d: dict) -> World:
    if d.get("version") != WORLD_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported world file version {d.get('version')!r}")
    params = WorldParams(**d["params"])
    vps = sorted(d["viewpoints"], key=lambda x: x["id"])
    if [x["id"] for x in vps] != list(range(len(vps))):
        raise ConfigurationError("viewpoint ids must be 0..N-1")
    graph = NavGraph(np.array([x["pos"] for x in vps], float), tuple(tuple(map(int, e)) for e in d["edges"]))
    sem = d["semantics"]
    semantics = tuple(
        tuple(tuple(int(e) for e in sem[str(v)][str(s)]) for s in range(len(sem[str(v)])))
        for v in range(graph.n)
    )
    return World(graph, semantics, params, d.get("seed"), tuple(d.get("rooms", ())))


def save_world(world: World, path) -> None:
    with open(path, "w") as fh:
        json.dump(world_to_json(world), fh, sort_keys=True)


def load_world(path) -> World:
    with open(path) as fh:
        return world_from_json(json.load(fh))


def save_episodes(episodes: Iterable[Episode], path) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), sort_keys=True) + "\n")


def load_episodes(path) -> list[Episode]:
    with open(path) as fh:
        return [Episode.from_json(json.loads(line)) for line in fh if line.strip()]


def grid_to_bytes(grid: np.ndarray) -> bytes:
    h, w, c = grid.shape
    return GRID_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(grid, "<f4").tobytes()


def grid_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:4] != GRID_MAGIC:
        raise ConfigurationError("not a grid file (bad magic)")
    h, w, c = struct.unpack("<III", data[4:16])
    body = data[16:]
    if len(body) != 4 * h * w * c:
        raise ConfigurationError(f"grid body has {len(body)} bytes, expected {4 * h * w * c}")
    return np.frombuffer(body, "<f4").reshape(h, w, c).copy()


def save_grid(grid: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(grid))


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())
