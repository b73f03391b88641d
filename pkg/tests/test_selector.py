"""Tests for deadline computation and preset selection."""

import numpy as np
import pytest

from caps_preset.ladder import HLS_LADDER, LadderConfig, Representation
from caps_preset.selector import DeadlineSpec, preset_name, select_preset, target_time
from caps_preset.utils import ConfigurationError, InputError


def exhaustive_choice(times, T):
    """Constrained argmin by enumeration; ties go to the higher preset."""
    feasible = [p for p in times if times[p] <= T]
    if not feasible:
        return min(times), False
    best_gap = min(T - times[p] for p in feasible)
    return max(p for p in feasible if T - times[p] == best_gap), True


@pytest.mark.parametrize("n,f,expected", [(120, 24, 5.0), (1, 1, 1.0), (300, 60, 5.0)])
def test_target_time(n, f, expected):
    assert target_time(n, f) == expected
    assert DeadlineSpec(n, f).T == expected


@pytest.mark.parametrize("n,f", [(0, 24), (120, 0), (120, -1), (-5, 24)])
def test_target_time_rejects_non_positive(n, f):
    with pytest.raises(InputError):
        target_time(n, f)


def test_closest_feasible_preset():
    decision = select_preset({0: 6.1, 1: 4.8, 2: 3.2}, 5.0)
    assert decision.preset == 1
    assert decision.predicted_time == 4.8
    assert decision.deadline_met
    assert decision.margin == pytest.approx(0.2)


def test_infeasible_falls_back_to_fastest():
    decision = select_preset({0: 6.0, 1: 7.0}, 5.0)
    assert decision.preset == 0
    assert decision.predicted_time == 6.0
    assert not decision.deadline_met
    assert decision.margin == pytest.approx(-1.0)


def test_fallback_uses_lowest_preset_of_range():
    decision = select_preset({3: 9.0, 4: 8.0, 5: 7.0}, 5.0)
    assert decision.preset == 3
    assert not decision.deadline_met


def test_ties_go_to_slower_preset():
    decision = select_preset({0: 1.0, 1: 4.0, 2: 4.0, 3: 6.0}, 5.0)
    assert decision.preset == 2


def test_exact_deadline_is_feasible():
    assert select_preset({0: 2.0, 1: 5.0}, 5.0).preset == 1


def test_non_monotone_times():
    decision = select_preset({0: 4.0, 1: 6.0, 2: 4.9, 3: 5.5}, 5.0)
    assert decision.preset == 2


def test_empty_map_rejected():
    with pytest.raises(InputError):
        select_preset({}, 5.0)


def test_non_contiguous_map_rejected():
    with pytest.raises(InputError):
        select_preset({0: 1.0, 2: 2.0}, 5.0)


def test_non_positive_time_rejected():
    with pytest.raises(InputError):
        select_preset({0: 0.0, 1: 1.0}, 5.0)


def test_matches_exhaustive_search(rng):
    for _ in range(10000):
        p_min = int(rng.integers(0, 3))
        count = int(rng.integers(1, 10))
        # coarse grid so ties happen
        values = rng.integers(1, 40, size=count) / 4.0
        times = {p_min + i: float(v) for i, v in enumerate(values)}
        T = float(rng.integers(1, 40)) / 4.0
        decision = select_preset(times, T)
        expected, met = exhaustive_choice(times, T)
        assert decision.preset == expected
        assert decision.deadline_met == met
        assert decision.predicted_time == times[expected]
        if met:
            assert decision.predicted_time <= T
            assert not any(T - times[p] < T - decision.predicted_time for p in times if times[p] <= T)


def test_easier_content_never_lowers_preset(rng):
    for _ in range(1000):
        base = np.cumsum(rng.uniform(0.1, 2.0, size=9))
        scale = float(rng.uniform(0.3, 1.0))
        T = float(rng.uniform(1.0, 10.0))
        hard = select_preset({p: float(t) for p, t in enumerate(base)}, T)
        easy = select_preset({p: float(t) * scale for p, t in enumerate(base)}, T)
        if hard.deadline_met:
            assert easy.preset >= hard.preset


def test_preset_names():
    assert preset_name(0) == "ultrafast"
    assert preset_name(6) == "slow"
    assert preset_name(8) == "veryslow"
    with pytest.raises(InputError):
        preset_name(10)


# Ladder


def test_hls_ladder_shape():
    ladder = LadderConfig()
    assert len(ladder.rungs) == 12
    assert ladder.rungs[0] == Representation(360, 145)
    assert ladder.rungs[-1] == Representation(2160, 16800)
    assert ladder.target_time == 5.0
    assert len(ladder.widths) == 7
    assert list(ladder.presets) == list(range(9))
    assert ladder.rung_label(0) == "01"


def test_ladder_bitrates_must_increase():
    with pytest.raises(ConfigurationError):
        LadderConfig(rungs=(HLS_LADDER[1], HLS_LADDER[0]))


def test_invalid_representation():
    with pytest.raises(ConfigurationError):
        Representation(0, 145)
