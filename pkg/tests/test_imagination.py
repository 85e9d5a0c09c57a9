import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imagine_nav.environment import Panorama, WorldParams, code_table, generate_world, render_observation
from imagine_nav.errors import ContractError, NoGoalError
from imagine_nav.imagination import (
    InstructionState,
    blank_hypothesis,
    cosine,
    dynamic_target,
    embed,
    imagine_dynamic,
    imagine_static,
    inpaint,
    inpaint_panorama,
    saliency_mask,
    visible_entities,
)

from oracles import naive_embed

P = WorldParams()
TABLE = code_table(P.vocab_size, P.channels)


def tile_of(entities, seed=0):
    rng = np.random.default_rng(seed)
    tile = rng.uniform(0, 0.1, size=P.grid_shape)
    for e, rows in zip(entities, (slice(4, 16), slice(1, 4))):
        tile[rows, :] = TABLE[e]
    return tile


def pano_of(*tiles):
    return Panorama(tuple(range(len(tiles))), tuple(float(i) for i in range(len(tiles))), tuple(tiles),
                    tuple(() for _ in tiles))


# -- instruction state

def test_instruction_state_progress():
    s = InstructionState((3, 5))
    assert s.next_entity == 3 and s.met == (False, False)
    s = s.advance()
    assert s.next_entity == 5 and s.met == (True, False)
    s = s.advance().advance()
    assert s.exhausted and s.next_entity is None and s.cursor == 2


def test_instruction_state_cursor_bounds():
    with pytest.raises(ContractError):
        InstructionState((1,), cursor=2)


# -- static

def test_static_center_decodes_to_target():
    h = imagine_static(InstructionState((1,)), P)
    center = h.imagined[4:12, 4:12].reshape(-1, 8)
    assert all(int(np.argmax(TABLE @ cell)) == 1 for cell in center)
    assert h.target_entity == 1 and h.mode == "static"
    assert h.imagined.shape == P.grid_shape


def test_static_deterministic():
    a = imagine_static(InstructionState((4, 2)), P)
    b = imagine_static(InstructionState((4, 2)), P)
    assert np.array_equal(a.imagined, b.imagined)


def test_static_exhausted_is_no_goal():
    with pytest.raises(NoGoalError):
        imagine_static(InstructionState((1,), cursor=1), P)


# -- dynamic

def test_dynamic_picks_visible_next_entity():
    h = imagine_dynamic(pano_of(tile_of([7, 2])), [0], InstructionState((2,)), P, viewpoint=3)
    assert h.target_entity == 2 and h.mode == "dynamic"


def test_dynamic_fallback_when_nothing_visible():
    dark = np.full(P.grid_shape, 0.05)
    instr = InstructionState((9,))
    h = imagine_dynamic(pano_of(dark), [0], instr, P, viewpoint=0)
    assert h.target_entity == imagine_static(instr, P).target_entity == 9


def test_dynamic_matches_exhaustive_cosine_scan():
    rng = np.random.default_rng(5)
    for _ in range(30):
        a, b, wanted = (int(x) for x in rng.choice(32, size=3, replace=False))
        h = imagine_dynamic(pano_of(tile_of([a, b])), [0], InstructionState((wanted,)), P, viewpoint=1)
        sims = {e: float(TABLE[e] @ TABLE[wanted]) for e in (a, b)}
        best = max(sims.values())
        assert h.target_entity == min(e for e, s in sims.items() if abs(s - best) < 1e-12)


def test_dynamic_prefers_tiles_toward_unvisited_viewpoints():
    wanted = 2
    sims = TABLE @ TABLE[wanted]
    close = int(next(e for e in np.argsort(-sims) if e != wanted))
    far = int(np.argmin(sims))
    pano = pano_of(tile_of([close]), tile_of([far]))
    instr = InstructionState((wanted,))
    assert imagine_dynamic(pano, [5], instr, P, viewpoint=5).target_entity == close
    # tile 0 leads back to viewpoint 0, already visited
    assert imagine_dynamic(pano, [0, 5], instr, P, viewpoint=5).target_entity == far
    # every tile visited: all of them are considered again
    assert imagine_dynamic(pano, [0, 1], instr, P, viewpoint=1).target_entity == close


def test_dynamic_seeded_by_viewpoint():
    pano = pano_of(tile_of([3]))
    a = imagine_dynamic(pano, [0], InstructionState((3,)), P, viewpoint=1)
    b = imagine_dynamic(pano, [0], InstructionState((3,)), P, viewpoint=2)
    assert not np.array_equal(a.imagined, b.imagined)


def test_dynamic_empty_observation_rejected():
    with pytest.raises(ContractError):
        imagine_dynamic(Panorama((), (), (), ()), [], InstructionState((1,)), P, 0)


def test_dynamic_target_tie_goes_to_lower_id():
    table = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0]])
    assert dynamic_target([2, 1], 1, table) == 1


def test_visible_entities():
    assert visible_entities(pano_of(tile_of([4, 11])), TABLE) == [4, 11]


# -- inpainting

def test_inpaint_identities():
    rng = np.random.default_rng(0)
    obs, img = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    assert np.array_equal(inpaint(obs, img, np.zeros((4, 4), bool)), obs)
    assert np.array_equal(inpaint(obs, img, np.ones((4, 4), bool)), img)


def test_inpaint_checkerboard_cell_by_cell():
    rng = np.random.default_rng(1)
    obs, img = rng.uniform(size=(5, 6, 3)), rng.uniform(size=(5, 6, 3))
    mask = (np.add.outer(np.arange(5), np.arange(6)) % 2).astype(bool)
    out = inpaint(obs, img, mask)
    for i in range(5):
        for j in range(6):
            assert np.array_equal(out[i, j], img[i, j] if mask[i, j] else obs[i, j])


def test_inpaint_shape_mismatch():
    with pytest.raises(ContractError):
        inpaint(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4), bool))


def test_saliency_mask_complement():
    tile = tile_of([2])
    assert np.array_equal(saliency_mask(tile, True), ~saliency_mask(tile, False))
    assert saliency_mask(tile, True)[8, 8] and not saliency_mask(tile, True)[0, 0]


def test_inpaint_panorama_chooses_most_similar_tile():
    pano = pano_of(tile_of([1]), tile_of([6]))
    imagined = imagine_static(InstructionState((6,)), P).imagined
    inpainted, k = inpaint_panorama(pano, imagined)
    assert k == 1
    assert inpainted.shape == P.grid_shape


# -- embeddings

def test_embed_constant_and_linear():
    g = np.full((3, 4, 5), 0.3)
    assert np.allclose(embed(g), 0.3)
    rng = np.random.default_rng(2)
    g = rng.uniform(size=(4, 4, 8))
    assert np.allclose(embed(0.5 * g), 0.5 * embed(g))


def test_embed_matches_double_loop():
    g = np.random.default_rng(3).uniform(size=(5, 7, 4))
    assert np.allclose(embed(g), naive_embed(g), atol=1e-12)


def test_cosine_zero_vector():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_blank_hypothesis():
    h = blank_hypothesis(3, P, "static")
    assert not h.imagined.any() and not h.inpainted.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 30), st.integers(0, 10_000), st.booleans())
def test_hypothesis_grids_in_unit_interval(world_seed, render_seed, dynamic):
    w = generate_world(world_seed, WorldParams(n_nodes=12))
    v = render_seed % w.graph.n
    pano = render_observation(w, v, render_seed)
    instr = InstructionState((w.marker(v),))
    h = imagine_dynamic(pano, [v], instr, w.params, v) if dynamic else imagine_static(instr, w.params, pano)
    for g in (h.imagined, h.inpainted):
        assert g.shape == w.params.grid_shape
        assert np.all((g >= 0) & (g <= 1))
