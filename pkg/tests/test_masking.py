import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpdlab.masking import (MaskState, NoiseSchedule, corrupt, exact_mask_count,
                            init_draft, remask, select_top_confidence)
from fpdlab.rng import RngStream

MASK = 3  # vocab {0,1,2} in these tests


def test_schedule_endpoints_exact():
    for kind in ("linear", "cosine"):
        s = NoiseSchedule(kind)
        assert s.gamma(0.0) == 0.0
        assert s.gamma(1.0) == 1.0


def test_schedule_monotone_on_grid():
    grid = np.linspace(0.0, 1.0, 1001)
    for kind in ("linear", "cosine"):
        vals = NoiseSchedule(kind).gamma(grid)
        assert (np.diff(vals) >= 0).all()


def test_cosine_midpoint_value():
    s = NoiseSchedule("cosine")
    assert abs(s.gamma(0.5) - (1.0 - np.cos(np.pi / 4))) < 1e-15
    assert abs(s.gamma(0.5) - 0.2929) < 1e-4
    assert NoiseSchedule("linear").gamma(0.5) == 0.5


def test_gamma_inverse_bisection():
    for kind in ("linear", "cosine"):
        s = NoiseSchedule(kind)
        for r in (0.0, 0.1, 0.5, 0.93, 1.0):
            t = s.gamma_inv(r)
            assert abs(s.gamma(t) - r) < 1e-8


def test_schedule_rejects_unknown_kind():
    with pytest.raises(ValueError, match="schedule.kind"):
        NoiseSchedule("arccos")


def test_corrupt_endpoints():
    z = np.array([0, 1, 2, 1])
    s = NoiseSchedule("linear")
    state0 = corrupt(z, 0.0, s, seed=1, mask_id=MASK)
    assert not state0.mask.any()
    assert np.array_equal(state0.tokens, z)
    state1 = corrupt(z, 1.0, s, seed=1, mask_id=MASK)
    assert state1.mask.all()


def test_corrupt_rejects_bad_time():
    with pytest.raises(ValueError, match="t must lie"):
        corrupt(np.zeros(4, dtype=int), 1.5, NoiseSchedule("linear"), 0, MASK)


def test_corrupt_binomial_mean():
    z = np.zeros(16, dtype=int)
    s = NoiseSchedule("linear")
    rng = RngStream(42)
    counts = [corrupt(z, 0.5, s, rng, mask_id=99).mask.sum() for _ in range(10000)]
    assert abs(np.mean(counts) - 8.0) < 0.3


def test_corrupt_preserves_unmasked_tokens():
    rng = RngStream(3)
    s = NoiseSchedule("cosine")
    for _ in range(200):
        z = rng.integers(0, 3, size=8).astype(np.int64)
        t = float(rng.random())
        state = corrupt(z, t, s, rng, mask_id=MASK)
        assert np.array_equal(state.tokens[~state.mask], z[~state.mask])


def test_remask_exact_count_and_reveal_roundtrip():
    rng = RngStream(5)
    z = rng.integers(0, 3, size=16).astype(np.int64)
    state = remask(z, 0.5, rng, mask_id=MASK)
    assert state.mask.sum() == 8
    restored = state.tokens.copy()
    restored[state.mask] = z[state.mask]
    assert np.array_equal(restored, z)


def test_remask_ceiling_masks_at_least_one():
    z = np.zeros(16, dtype=int)
    state = remask(z, 1.0 / 16 - 1e-9, RngStream(0), mask_id=MASK)
    assert state.mask.sum() == 1


def test_remask_rejects_bad_ratio():
    z = np.zeros(4, dtype=int)
    for r in (0.0, 1.0, -0.2, 1.3):
        with pytest.raises(ValueError, match="ratio"):
            remask(z, r, RngStream(0), mask_id=MASK)


def test_remask_uniform_positions():
    rng = RngStream(11)
    z = np.zeros(16, dtype=int)
    freq = np.zeros(16)
    runs = 20000
    for _ in range(runs):
        freq += remask(z, 0.25, rng, mask_id=MASK).mask
    np.testing.assert_allclose(freq / runs, 0.25, atol=0.02)


def test_init_draft_fully_masked():
    state = init_draft(1.0, 16, 3, RngStream(0), mask_id=MASK)
    assert state.mask.all()
    state = init_draft(0.95, 16, 3, RngStream(0), mask_id=MASK)
    assert state.mask.sum() == 16  # ceil(15.2) = 16


def test_init_draft_unmasked_tokens_uniform():
    rng = RngStream(9)
    counts = np.zeros(3)
    runs = 20000
    for _ in range(runs):
        state = init_draft(0.75, 16, 3, rng, mask_id=MASK)
        assert state.mask.sum() == 12
        vals, c = np.unique(state.tokens[~state.mask], return_counts=True)
        counts[vals] += c
    np.testing.assert_allclose(counts / (runs * 4), 1.0 / 3, atol=0.02)


def test_select_top_confidence_all_and_none():
    probs = np.full((4, 3), 1.0 / 3)
    sampled = np.zeros(4, dtype=int)
    masked = np.array([0, 2, 3])
    assert np.array_equal(select_top_confidence(probs, sampled, masked, 3), masked)
    assert select_top_confidence(probs, sampled, masked, 0).size == 0


def test_select_top_confidence_ordering():
    probs = np.zeros((3, 3))
    probs[0, 1] = 0.9
    probs[1, 0] = 0.5
    probs[2, 2] = 0.7
    sampled = np.array([1, 0, 2])
    chosen = select_top_confidence(probs, sampled, np.array([0, 1, 2]), 2)
    assert np.array_equal(chosen, [0, 2])


def test_select_top_confidence_tie_breaks_low_index():
    probs = np.full((4, 2), 0.5)
    sampled = np.zeros(4, dtype=int)
    chosen = select_top_confidence(probs, sampled, np.array([0, 1, 2, 3]), 2)
    assert np.array_equal(chosen, [0, 1])


def test_select_top_confidence_rejects_overdraw():
    probs = np.full((2, 2), 0.5)
    with pytest.raises(ValueError, match="keep"):
        select_top_confidence(probs, np.zeros(2, dtype=int), np.array([0]), 2)


def test_mask_state_invariant_enforced():
    with pytest.raises(ValueError, match="mask"):
        MaskState(tokens=np.array([0, MASK]), mask=np.array([True, True]), mask_id=MASK)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 31), st.integers(2, 32), st.integers(0, 2**31 - 1))
def test_remask_count_property(num, length, seed):
    ratio = num / 32.0
    if not 0.0 < ratio < 1.0:
        return
    z = np.zeros(length, dtype=int)
    state = remask(z, ratio, RngStream(seed), mask_id=MASK)
    assert state.mask.sum() == exact_mask_count(ratio, length)
