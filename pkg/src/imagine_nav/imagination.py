"""Goal imagination: entity prototypes rendered as feature grids, plus inpainting."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .environment import BACKGROUND_MAX, Panorama, WorldParams, code_table
from .errors import ContractError, NoGoalError

IMAGINATION_SEED = 0x1A9
PRESENCE_THRESHOLD = 0.5
SALIENCY_THRESHOLD = 0.3

STATIC = "static"
DYNAMIC = "dynamic"


@dataclass(frozen=True)
class InstructionState:
    entities: tuple[int, ...]
    cursor: int = 0

    def __post_init__(self):
        if not 0 <= self.cursor <= len(self.entities):
            raise ContractError(f"cursor {self.cursor} outside [0, {len(self.entities)}]")

    @property
    def met(self) -> tuple[bool, ...]:
        return tuple(i < self.cursor for i in range(len(self.entities)))

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.entities)

    @property
    def next_entity(self) -> int | None:
        return None if self.exhausted else self.entities[self.cursor]

    def advance(self) -> "InstructionState":
        if self.exhausted:
            return self
        return replace(self, cursor=self.cursor + 1)


@dataclass(frozen=True)
class SceneHypothesis:
    imagined: np.ndarray
    inpainted: np.ndarray
    target_entity: int
    mode: str
    inpaint_tile: int | None = None


def embed(grid: np.ndarray) -> np.ndarray:
    """Channel-wise mean over all cells."""
    grid = np.asarray(grid)
    return grid.reshape(-1, grid.shape[-1]).mean(axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def prototype_grid(entity: int, params: WorldParams, seed) -> np.ndarray:
    """Entity code over the centered H/2 x W/2 rectangle, background noise elsewhere."""
    h, w, c = params.grid_shape
    rng = np.random.default_rng(seed)
    grid = rng.uniform(0.0, BACKGROUND_MAX, size=(h, w, c))
    grid[h // 4 : h // 4 + h // 2, w // 4 : w // 4 + w // 2] = code_table(params.vocab_size, c)[entity]
    return np.clip(grid, 0.0, 1.0)


def inpaint(obs_tile: np.ndarray, imagined: np.ndarray, mask: np.ndarray) -> np.ndarray:
    obs_tile = np.asarray(obs_tile)
    imagined = np.asarray(imagined)
    mask = np.asarray(mask, bool)
    if obs_tile.shape != imagined.shape or mask.shape != obs_tile.shape[:2]:
        raise ContractError(
            f"inpaint shapes disagree: obs {obs_tile.shape}, imagined {imagined.shape}, mask {mask.shape}"
        )
    return np.where(mask[..., None], imagined, obs_tile)


def saliency_mask(tile: np.ndarray, salient: bool = True) -> np.ndarray:
    """Cells whose max channel reaches the saliency threshold (or the complement)."""
    bright = tile.max(axis=-1) >= SALIENCY_THRESHOLD
    return bright if salient else ~bright


def inpaint_panorama(pano: Panorama, imagined: np.ndarray, mask_salient: bool = True) -> tuple[np.ndarray, int]:
    """Inpaint imagined content into the panorama tile that best matches it.

    The tile is the one whose embedding is most cosine-similar to the imagined
    grid (lowest index on ties). With ``mask_salient`` the observed objects are
    overwritten by imagined content and the observed background kept.
    """
    target = embed(imagined)
    sims = [cosine(target, embed(t)) for t in pano.tiles]
    k = int(np.argmax(sims))
    tile = pano.tiles[k]
    return inpaint(tile, imagined, saliency_mask(tile, mask_salient)), k


def imagine_static(
    instr: InstructionState,
    params: WorldParams,
    obs: Panorama | None = None,
    mask_salient: bool = True,
) -> SceneHypothesis:
    if instr.exhausted:
        raise NoGoalError("instruction exhausted: nothing left to imagine")
    target = instr.next_entity
    imagined = prototype_grid(target, params, IMAGINATION_SEED)
    return _finish(imagined, target, STATIC, obs, mask_salient)


def visible_entities(obs: Panorama, table: np.ndarray, tiles: Sequence[int] | None = None) -> list[int]:
    """Entities decoded from the panorama, or from the listed tile indices only."""
    grid = obs.grid if tiles is None else np.concatenate([obs.tiles[i] for i in tiles], axis=1)
    cells = grid.reshape(-1, table.shape[1])
    scores = cells @ table.T
    present = scores.max(axis=1) > PRESENCE_THRESHOLD
    return sorted({int(e) for e in np.argmax(scores[present], axis=1)})


def dynamic_target(visible: Sequence[int], wanted: int, table: np.ndarray) -> int:
    """Visible entity most code-similar to ``wanted``; ties go to the lower id."""
    best, best_sim = None, -np.inf
    for e in sorted(visible):
        s = float(table[e] @ table[wanted])
        if s > best_sim + 1e-12:
            best, best_sim = e, s
    return best


def imagine_dynamic(
    obs: Panorama,
    history: Sequence[int],
    instr: InstructionState,
    params: WorldParams,
    viewpoint: int,
    mask_salient: bool = True,
) -> SceneHypothesis:
    """Observation-driven goal: the visible entity closest in code space to the next
    unmet instruction entity.

    Entities in tiles that lead back to viewpoints in ``history`` are only
    proposed when nothing is recognisable toward unvisited ones, so the
    proposal points somewhere new.
    """
    if obs.k == 0:
        raise ContractError("dynamic imagination needs a non-empty observation")
    if instr.exhausted:
        raise NoGoalError("instruction exhausted: nothing left to imagine")
    table = code_table(params.vocab_size, params.channels)
    seen = set(history)
    fresh = [i for i, c in enumerate(obs.candidates) if c not in seen]
    visible = visible_entities(obs, table, fresh) if fresh else []
    if not visible:
        visible = visible_entities(obs, table)
    # nothing recognisable in view: fall back to the instruction's entity
    target = dynamic_target(visible, instr.next_entity, table) if visible else instr.next_entity
    imagined = prototype_grid(target, params, [IMAGINATION_SEED, viewpoint])
    return _finish(imagined, target, DYNAMIC, obs, mask_salient)


def _finish(imagined, target, mode, obs, mask_salient) -> SceneHypothesis:
    if obs is None:
        return SceneHypothesis(imagined, imagined.copy(), target, mode)
    inpainted, k = inpaint_panorama(obs, imagined, mask_salient)
    return SceneHypothesis(imagined, inpainted, target, mode, k)


def blank_hypothesis(target: int, params: WorldParams, mode: str) -> SceneHypothesis:
    """Zero grids standing in for a removed imagination module."""
    zero = np.zeros(params.grid_shape)
    return SceneHypothesis(zero, zero.copy(), target, mode)
