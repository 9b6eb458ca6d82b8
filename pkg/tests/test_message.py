import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlfcode.errors import ConfigurationError
from vlfcode.message import (
    BeliefMatrix,
    group_to_index,
    hard_decision,
    index_to_group,
    initial_mask,
    partition_bits,
    uniform_beliefs,
    update_mask,
    validate_threshold,
)


def test_group_index_examples():
    assert group_to_index(np.array([1, 0, 1])) == 5
    assert group_to_index(np.array([0, 0, 0])) == 0
    assert group_to_index(np.array([1, 1, 1])) == 7
    assert group_to_index(np.array([0, 1])) == 1


@given(st.integers(min_value=1, max_value=8), st.data())
@settings(max_examples=60, deadline=None)
def test_group_index_roundtrip(m, data):
    idx = data.draw(st.integers(min_value=0, max_value=2**m - 1))
    g = index_to_group(idx, m)
    assert g.shape == (m,)
    assert group_to_index(g) == idx


def test_partition_shapes_and_indices():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, size=48)
    block = partition_bits(bits, 16)
    assert block.Q == 16 and block.m == 3 and block.K == 48
    assert block.groups.shape == (16, 3)
    assert np.array_equal(block.groups.reshape(-1), bits)
    for q in range(16):
        assert block.pattern_indices[q] == group_to_index(block.groups[q])


def test_partition_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        partition_bits(np.zeros(10, dtype=int), 4)  # 10 % 4 != 0
    with pytest.raises(ConfigurationError):
        partition_bits(np.array([0, 1, 2, 0]), 2)  # non-bit
    with pytest.raises(ConfigurationError):
        partition_bits(np.zeros((2, 2), dtype=int), 2)  # not 1-D


def test_belief_matrix_validation():
    ok = BeliefMatrix(np.array([[0.25, 0.75], [1.0, 0.0]]))
    assert ok.Q == 2 and ok.m == 1
    with pytest.raises(ConfigurationError):
        BeliefMatrix(np.array([[0.5, 0.6]]))  # sums to 1.1
    with pytest.raises(ConfigurationError):
        BeliefMatrix(np.array([[-0.1, 1.1]]))  # negative entry
    with pytest.raises(ConfigurationError):
        BeliefMatrix(np.array([[np.nan, 1.0]]))
    # Within tolerance passes.
    BeliefMatrix(np.array([[0.5, 0.5 + 5e-7]]))


def test_uniform_beliefs():
    u = uniform_beliefs(4, 3)
    assert u.columns.shape == (4, 8)
    assert np.allclose(u.columns, 1 / 8)
    assert np.allclose(u.peak(), 1 / 8)


def test_hard_decision_point_masses_and_ties():
    cols = np.zeros((2, 8))
    cols[0, 0] = 1.0
    cols[1, 5] = 1.0
    bits = hard_decision(BeliefMatrix(cols))
    assert np.array_equal(bits, [0, 0, 0, 1, 0, 1])
    # Uniform row ties toward pattern 0.
    u = uniform_beliefs(1, 2)
    assert np.array_equal(hard_decision(u), [0, 0])


def test_threshold_domain():
    with pytest.raises(ConfigurationError):
        validate_threshold(0.1, 3)  # below 1/8
    with pytest.raises(ConfigurationError):
        validate_threshold(1.0, 3)
    assert validate_threshold(0.9, 3) == 0.9


def test_update_mask_monotone_freeze():
    mask = initial_mask(3)
    assert mask.n_active == 3 and mask.round == 1
    cols = np.array(
        [
            [0.95, 0.05, 0.0, 0.0],
            [0.40, 0.60, 0.0, 0.0],
            [0.25, 0.25, 0.25, 0.25],
        ]
    )
    mask2 = update_mask(mask, BeliefMatrix(cols), 0.9)
    assert mask2.round == 2
    assert np.array_equal(mask2.flags, [False, True, True])
    # A frozen group stays frozen even if its peak later drops below gamma.
    cols2 = np.array(
        [
            [0.5, 0.5, 0.0, 0.0],
            [0.05, 0.95, 0.0, 0.0],
            [0.25, 0.25, 0.25, 0.25],
        ]
    )
    mask3 = update_mask(mask2, BeliefMatrix(cols2), 0.9)
    assert np.array_equal(mask3.flags, [False, False, True])
    assert mask3.round == 3


@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=40, deadline=None)
def test_mask_never_unfreezes(Q, m, seed):
    rng = np.random.default_rng(seed)
    mask = initial_mask(Q)
    gamma = float(rng.uniform(1 / 2**m + 1e-6, 1 - 1e-6))
    for _ in range(4):
        raw = rng.dirichlet(np.ones(2**m), size=Q)
        new = update_mask(mask, BeliefMatrix(raw), gamma)
        assert not (new.flags & ~mask.flags).any()
        mask = new
