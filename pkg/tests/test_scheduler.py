import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imagine_nav.errors import ContractError
from imagine_nav.scheduler import (
    ModeDecision,
    action_entropy,
    path_deviation,
    select_mode,
    trajectory_uncertainty,
    visual_similarity,
)


def test_entropy_uniform_is_one():
    assert action_entropy([0.25] * 4) == pytest.approx(1.0)


def test_entropy_one_hot_is_zero():
    assert action_entropy([0.0, 1.0, 0.0]) == 0.0


def test_entropy_half_half_over_four():
    expected = -(0.5 * math.log(0.5) * 2) / math.log(4)
    assert action_entropy([0.5, 0.5, 0.0, 0.0]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5)


def test_entropy_single_action():
    assert action_entropy([1.0]) == 0.0


@pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [], [[0.5, 0.5]]])
def test_entropy_rejects_non_distributions(bad):
    with pytest.raises(ContractError):
        action_entropy(bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8).filter(lambda x: sum(x) > 1e-3))
def test_entropy_bounded_and_permutation_invariant(raw):
    p = np.array(raw) / sum(raw)
    h = action_entropy(p)
    assert 0.0 <= h <= 1.0
    assert action_entropy(p[::-1]) == pytest.approx(h, abs=1e-12)


def test_path_deviation_examples():
    assert path_deviation([0, 1, 2, 3]) == 0.0
    assert path_deviation(["a", "b", "a", "b"], window=4) == 0.5
    assert path_deviation([5]) == 0.0
    assert path_deviation([]) == 0.0


def test_path_deviation_counts_by_replay():
    history = [0, 1, 0, 2, 2, 1, 3]
    window = 4
    recent = range(len(history) - window, len(history))
    revisits = sum(1 for i in recent if history[i] in history[:i])
    assert path_deviation(history, window) == revisits / window


def test_path_deviation_window_validation():
    with pytest.raises(ContractError):
        path_deviation([1, 2], window=0)


def test_uncertainty_arithmetic():
    assert trajectory_uncertainty(0, 0, 0.3) == 0
    assert trajectory_uncertainty(1, 1, 0.3) == pytest.approx(1)
    assert trajectory_uncertainty(0.4, 0.8, 0.5) == pytest.approx(0.6)


@pytest.mark.parametrize("args", [(1.2, 0, 0.5), (0, -0.1, 0.5), (0, 0, 1.5)])
def test_uncertainty_range_checked(args):
    with pytest.raises(ContractError):
        trajectory_uncertainty(*args)


def test_visual_similarity_cases():
    v = np.array([1.0, 2.0, 3.0])
    assert visual_similarity(v, v) == pytest.approx(1.0)
    assert visual_similarity([1, 0], [0, 1]) == 0.0
    assert visual_similarity(v, -v) == pytest.approx(-1.0)
    assert visual_similarity(np.zeros(3), v) == 0.0


def test_select_mode_examples():
    assert select_mode(0.2, 0.9, 0.5, 0.6, step=3).mode == "static"
    assert select_mode(0.6, 0.9, 0.5, 0.6, step=3).mode == "dynamic"
    assert select_mode(0.5, 0.6, 0.5, 0.6, step=3).mode == "dynamic"


def test_select_mode_step_zero_bootstrap():
    d = select_mode(0.9, -0.5, 0.5, 0.6, step=0)
    assert (d.mode, d.u_t, d.s_t, d.step) == ("static", 0.0, 1.0, 0)


def test_select_mode_rejects_non_finite_thresholds():
    with pytest.raises(ContractError):
        select_mode(0.1, 0.9, math.nan, 0.6)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(-1, 1), st.floats(0, 1), st.floats(-1, 1), st.integers(1, 50))
def test_quadrant_and_monotonicity(u, s, tu, ts, step):
    d = select_mode(u, s, tu, ts, step)
    assert (d.mode == "static") == (u < tu and s > ts)
    assert d.is_valid()
    if d.mode == "static":
        assert select_mode(u / 2, s, tu, ts, step).mode == "static"
        assert select_mode(u, min(1.0, s + 0.1), tu, ts, step).mode == "static"


def test_mode_decision_validity():
    assert not ModeDecision("dynamic", 0.1, 0.9, 0.5, 0.6, 0).is_valid()
    assert ModeDecision("static", 0.9, 0.1, 0.5, 0.6, 4, forced=True).is_valid()
    assert not ModeDecision("static", 0.9, 0.1, 0.5, 0.6, 4).is_valid()
    assert not ModeDecision("sideways", 0.1, 0.9, 0.5, 0.6, 4).is_valid()
