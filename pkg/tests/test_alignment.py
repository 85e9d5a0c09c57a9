import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imagine_nav.alignment import (
    PafParams,
    Quadruple,
    TrainConfig,
    backward,
    dice_coefficient,
    encode,
    finite_difference_grads,
    fuse_and_decode,
    fuse_and_decode_naive,
    generate_quadruples,
    init_params,
    load_params,
    load_quadruples,
    loss,
    max_relative_error,
    params_from_bytes,
    random_quadruple,
    save_params,
    save_quadruples,
    train,
    write_train_log,
)
from imagine_nav.environment import WorldParams, code_table, generate_world
from imagine_nav.errors import ConfigurationError, ContractError

from oracles import naive_encode, unrolled_attention


def params64(c=4, d=8, heads=2, seed=0):
    return init_params(c, d, heads, seed, dtype=np.float64)


# -- encoder

def test_encode_zero_params():
    p = params64().map(np.zeros_like)
    out = encode(p, np.random.default_rng(0).uniform(size=(3, 3, 4)))
    assert out.shape == (3, 3, 8) and not out.any()


def test_encode_matches_double_loop():
    rng = np.random.default_rng(1)
    p = params64(seed=3)
    g = rng.uniform(size=(3, 5, 4))
    assert np.allclose(encode(p, g), naive_encode(p.enc_w, p.enc_b, g), atol=1e-12)
    assert np.all(np.abs(encode(p, g)) < 1)


def test_encode_channel_mismatch():
    with pytest.raises(ContractError):
        encode(params64(), np.zeros((2, 2, 5)))


# -- forward

def test_zero_output_head_gives_half():
    p = params64(seed=2)
    p.out_w[:] = 0
    p.out_b[...] = 0
    q = random_quadruple(np.random.default_rng(0), 4, 4, 2, 4)
    assert np.allclose(fuse_and_decode(p, q.obs, q.imagined, q.inpainted), 0.5)


def test_forward_matches_unrolled_attention():
    rng = np.random.default_rng(7)
    for seed in range(3):
        p = params64(seed=seed)
        q = random_quadruple(rng, 2, 2, 1, 4)
        got = fuse_and_decode(p, q.obs, q.imagined, q.inpainted)
        assert np.allclose(got, unrolled_attention(p, q.obs, q.imagined, q.inpainted), atol=1e-12)


def test_fast_path_matches_naive_with_repeated_cells():
    rng = np.random.default_rng(8)
    p = params64(seed=1)
    obs = np.repeat(rng.uniform(size=(2, 3, 4)), 2, axis=1)
    img = np.zeros((2, 3, 4))
    img[0] = rng.uniform(size=4)
    inp = np.where(rng.random((2, 3, 1)) < 0.5, img, rng.uniform(size=(2, 3, 4)))
    assert np.allclose(fuse_and_decode(p, obs, img, inp), fuse_and_decode_naive(p, obs, img, inp), atol=1e-13)


def test_forward_channel_mismatch():
    p = params64()
    with pytest.raises(ContractError):
        fuse_and_decode(p, np.zeros((4, 8, 3)), np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_map_bounds_and_key_order_invariance(seed):
    rng = np.random.default_rng(seed)
    p = init_params(4, 8, 2, int(rng.integers(1000)), dtype=np.float64)
    for a in p.arrays():
        a *= rng.uniform(0.5, 4.0)
    q = random_quadruple(rng, 3, 3, 2, 4)
    out = fuse_and_decode(p, q.obs, q.imagined, q.inpainted)
    assert np.all((out >= 0) & (out <= 1))
    cells = np.concatenate([q.imagined.reshape(-1, 4), q.inpainted.reshape(-1, 4)])
    perm = cells[rng.permutation(len(cells))]
    img2, inp2 = perm[:9].reshape(3, 3, 4), perm[9:].reshape(3, 3, 4)
    assert np.max(np.abs(fuse_and_decode(p, q.obs, img2, inp2) - out)) <= 1e-6


# -- loss

def test_loss_perfect_prediction():
    ones = np.ones((4, 4))
    assert loss(ones, ones).dice == pytest.approx(0.0, abs=1e-12)


def test_bce_of_half_against_zero_is_ln2():
    value = loss(np.full((3, 5), 0.5), np.zeros((3, 5)))
    assert value.bce == pytest.approx(math.log(2), abs=1e-12)


def test_dice_of_disjoint_halves():
    n = 16
    pred = np.zeros(n)
    pred[: n // 2] = 1
    gt = 1 - pred
    assert loss(pred, gt).dice == pytest.approx(1 - 1 / (n + 1), abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        loss(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.uniform(size=(4, 6)), rng.random((4, 6)) < 0.3
    v = loss(pred, gt)
    assert v.bce >= 0 and 0 <= v.dice < 1 and v.total >= 0


def test_hard_dice_coefficient():
    assert dice_coefficient(np.array([0.9, 0.1]), np.array([True, False])) == 1.0
    assert dice_coefficient(np.array([0.9, 0.9]), np.array([True, False])) == pytest.approx(2 / 3)
    assert dice_coefficient(np.zeros(3), np.zeros(3, bool)) == 1.0


# -- gradients

def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for seed in range(3):
        p = params64(seed=seed)
        q = random_quadruple(rng, 3, 3, 2, 4)
        assert max_relative_error(backward(p, q), finite_difference_grads(p, q)) <= 1e-4


def test_gradients_finite_on_zero_inputs_and_deterministic():
    p = params64(seed=4)
    q = Quadruple(np.zeros((4, 8, 4)), np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), np.zeros((4, 8), bool))
    g1, g2 = backward(p, q), backward(p, q)
    assert g1.is_finite()
    assert all(np.array_equal(a, b) for a, b in zip(g1.arrays(), g2.arrays()))


# -- data

def test_quadruples_contract():
    worlds = [generate_world(s, WorldParams(n_nodes=12)) for s in range(3)]
    quads = generate_quadruples(worlds, 20, seed=4)
    table = code_table(32, 8)
    for q in quads:
        assert q.gt_mask.any()
        assert q.gt_mask.shape == q.obs.shape[:2]
        labels = np.argmax(q.obs @ table.T, axis=-1)[q.gt_mask]
        assert len(set(labels.tolist())) == 1
    again = generate_quadruples(worlds, 1, seed=4)[0]
    assert np.array_equal(again.obs, quads[0].obs) and np.array_equal(again.gt_mask, quads[0].gt_mask)


def test_quadruples_need_worlds_and_count():
    with pytest.raises(ConfigurationError):
        generate_quadruples([], 3, 0)
    with pytest.raises(ConfigurationError):
        generate_quadruples([generate_world(0)], 0, 0)


def test_quadruple_file_round_trip(tmp_path):
    quads = generate_quadruples([generate_world(1, WorldParams(n_nodes=12))], 4, seed=0)
    save_quadruples(quads, tmp_path / "q.npz")
    back = load_quadruples(tmp_path / "q.npz")
    assert len(back) == 4
    assert np.allclose(back[2].obs, quads[2].obs, atol=1e-7)
    assert np.array_equal(back[2].gt_mask, quads[2].gt_mask)


# -- training

@pytest.fixture(scope="module")
def small_dataset():
    return generate_quadruples([generate_world(s, WorldParams(n_nodes=12)) for s in range(2)], 40, seed=1)


def test_zero_learning_rate_keeps_params(small_dataset):
    init = init_params(8, seed=5)
    result = train(small_dataset, TrainConfig(lr=0.0, epochs=2), init=init)
    assert all(np.array_equal(a, b) for a, b in zip(result.params.arrays(), init.arrays()))


def test_training_deterministic_and_logged(small_dataset, tmp_path):
    cfg = TrainConfig(lr=1e-2, epochs=3, patience=5)
    a, b = train(small_dataset, cfg), train(small_dataset, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))
    assert [r.epoch for r in a.log] == [1, 2, 3]
    best = [r.best_val_loss for r in a.log]
    assert all(x >= y for x, y in zip(best, best[1:]))
    write_train_log(a.log, tmp_path / "log.jsonl")
    first = (tmp_path / "log.jsonl").read_text().splitlines()[0]
    assert set(__import__("json").loads(first)) == {"epoch", "train_loss", "val_loss", "val_dice"}


def test_training_improves_loss(small_dataset):
    result = train(small_dataset, TrainConfig(lr=1e-2, epochs=6, patience=10))
    assert result.log[-1].val_loss < result.log[0].val_loss


def test_early_stopping_returns_best(small_dataset):
    result = train(small_dataset, TrainConfig(lr=0.5, epochs=30, patience=2))
    assert result.stopped_early or len(result.log) == 30
    assert result.best_epoch == min(result.log, key=lambda r: r.val_loss).epoch


def test_empty_dataset_rejected():
    with pytest.raises(ConfigurationError):
        train([])


# -- params file

def test_params_file_round_trip(tmp_path):
    p = init_params(8, seed=9)
    save_params(p, tmp_path / "p.bin")
    data = (tmp_path / "p.bin").read_bytes()
    assert data[:4] == b"VPAF"
    back = load_params(tmp_path / "p.bin")
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), back.arrays()))
    n_floats = sum(a.size for a in p.arrays())
    assert len(data) == 20 + 4 * n_floats


def test_params_file_bad_magic():
    with pytest.raises(ConfigurationError):
        params_from_bytes(b"NOPE" + b"\0" * 40)


def test_params_need_divisible_heads():
    with pytest.raises(ConfigurationError):
        init_params(8, dim=15, n_heads=2)
    assert isinstance(init_params(8), PafParams)


def test_init_prior_sets_output_bias_log_odds():
    p = init_params(4, 8, 2, seed=0, dtype=np.float64, prior=0.2)
    assert float(p.out_b) == pytest.approx(np.log(0.25))
    assert float(init_params(4, 8, 2, seed=0).out_b) == 0.0
    with pytest.raises(ConfigurationError):
        init_params(4, 8, 2, prior=1.0)
