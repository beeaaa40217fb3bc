import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrsfm_dsp.dspbuild import DynamicShapePrior, build_dsp, canonicalize_states, dsp_cardinality_curve
from nrsfm_dsp.errors import InvalidInput
from nrsfm_dsp.geomcore import rotation_about


def scaled_states(scales, n=4):
    # single unit entry: norms are exact
    base = np.zeros((3, n))
    base[0, 0] = 1.0
    return [s * base for s in scales]


def test_sorted_and_thinned():
    dsp = build_dsp(scaled_states([3.0, 1.0, 1.05, 2.0, 2.5]), mu=0.2)
    np.testing.assert_allclose(dsp.norms, [1.0, 2.0, 2.5, 3.0])
    assert dsp.source_ids.tolist() == [1, 3, 4, 0]
    assert dsp.mu == 0.2


def test_gap_must_be_strictly_greater():
    dsp = build_dsp(scaled_states([1.0, 1.5, 2.0]), mu=0.5)
    # 1.5 - 1.0 == 0.5 exactly, which is not a gap above mu
    assert dsp.size == 2
    np.testing.assert_allclose(dsp.norms, [1.0, 2.0])


def test_mu_zero_keeps_distinct_norms_drops_ties():
    dsp = build_dsp(scaled_states([2.0, 1.0, 2.0, 3.0]), mu=0.0)
    assert dsp.source_ids.tolist() == [1, 0, 3]


def test_large_mu_keeps_smallest():
    dsp = build_dsp(scaled_states([5.0, 4.0, 6.0]), mu=100.0)
    assert dsp.size == 1 and dsp.source_ids.tolist() == [1]


def test_errors():
    with pytest.raises(InvalidInput):
        build_dsp([], 0.0)
    with pytest.raises(InvalidInput):
        build_dsp(scaled_states([1.0]), -1.0)
    with pytest.raises(InvalidInput):
        build_dsp([np.full((3, 2), np.nan)], 0.0)
    with pytest.raises(InvalidInput):
        dsp_cardinality_curve(scaled_states([1.0]), [0.5, 0.1])


def test_prior_is_read_only():
    dsp = build_dsp(scaled_states([1.0, 2.0]), 0.0)
    with pytest.raises(ValueError):
        dsp.states[0, 0, 0] = 1.0


def test_from_states_recomputes_norms():
    dsp = DynamicShapePrior.from_states(np.stack(scaled_states([1.0, 3.0])))
    np.testing.assert_allclose(dsp.norms, [1.0, 3.0])
    assert dsp.source_ids.tolist() == [-1, -1]


def test_canonicalize_accepts_stacked_and_rotates():
    s = np.random.default_rng(0).standard_normal((6, 4))
    states = canonicalize_states(s)
    np.testing.assert_array_equal(states[1], s[3:])
    g = rotation_about("z", 0.3)
    rotated = canonicalize_states(s, global_rotation=g)
    np.testing.assert_allclose(rotated[0], g @ s[:3])
    with pytest.raises(InvalidInput):
        canonicalize_states(s, poses=[np.eye(3)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=1, max_size=40), st.floats(0, 5))
def test_invariants(scales, mu):
    dsp = build_dsp(scaled_states(scales), mu)
    assert np.all(np.diff(dsp.norms) > mu)
    assert len(set(dsp.source_ids.tolist())) == dsp.size
    assert 1 <= dsp.size <= len(scales)
    assert dsp.norms[0] == pytest.approx(min(scales))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=1, max_size=30))
def test_cardinality_non_increasing_in_mu(scales):
    curve = dsp_cardinality_curve(scaled_states(scales), [0, 0.5, 1, 2, 5, 50])
    qs = [q for _, q in curve]
    assert all(b <= a for a, b in zip(qs, qs[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 3))
def test_retained_states_are_inputs(seed, mu):
    states = list(np.random.default_rng(seed).standard_normal((12, 3, 5)))
    dsp = build_dsp(states, mu)
    for state, src in zip(dsp.states, dsp.source_ids):
        assert np.array_equal(state, states[src])
