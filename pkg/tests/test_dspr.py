import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrsfm_dsp.dspbuild import DynamicShapePrior, build_dsp
from nrsfm_dsp.dspr import (
    CompressedStream,
    DspIndicator,
    DsprConfig,
    DsprWeights,
    compress,
    decompress,
    dspr_energy,
    dspr_frame,
    dspr_sequence,
    exhaustive_select,
    id_width,
    msgd_select,
    seed_indices,
)
from nrsfm_dsp.errors import CorruptStream, IdWidthOverflow, InvalidInput
from nrsfm_dsp.geomcore import axis_angle_to_rotation, is_rotation, random_rotation, rotation_about


def family_prior(q=24, n=30, seed=0):
    """Norm-ordered states ``base + a mode`` with increasing ``a``."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((3, n)) * 10
    base -= base.mean(axis=1, keepdims=True)
    mode = rng.standard_normal((3, n))
    mode -= mode.mean(axis=1, keepdims=True)
    mode -= np.sum(mode * base) / np.sum(base * base) * base
    states = [base + a * mode for a in np.linspace(0.0, 8.0, q)]
    return build_dsp(states, 0.0)


def test_energy_value():
    state = np.zeros((3, 2))
    state[0, 0] = 3.0
    w = np.zeros((2, 2))
    w[1, 0] = 4.0
    prev = np.zeros((3, 2))
    # ||w - R2 state|| = 5; ||state - prev|| = 3
    assert dspr_energy(w, state, np.eye(3), prev, DsprWeights(2.0, 0.5)) == pytest.approx(11.5)


def test_indicator():
    ind = DspIndicator(2, 5)
    np.testing.assert_array_equal(ind.vector, [0, 0, 1, 0, 0])
    assert ind.penalty(10.0) == 0.0
    with pytest.raises(InvalidInput):
        DspIndicator(5, 5)


def test_weights_validation():
    with pytest.raises(InvalidInput):
        DsprWeights(alpha=0)
    with pytest.raises(InvalidInput):
        DsprWeights(beta=float("nan"))


def test_seed_indices():
    assert seed_indices(10, 1) == [0]
    assert seed_indices(10, 4) == [0, 3, 6, 9]
    assert seed_indices(5, 20) == [0, 1, 2, 3, 4]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_msgd_all_seeds_equals_exhaustive(seed, q):
    rng = np.random.default_rng(seed)
    states = rng.standard_normal((q, 3, 8))
    dsp = DynamicShapePrior.from_states(states[np.argsort(np.einsum("qij,qij->q", states, states))])
    w = rng.standard_normal((2, 8))
    pose = random_rotation(rng)
    prev = rng.standard_normal((3, 8))
    i, e, _ = msgd_select(w, pose, dsp, prev, seeds=q)
    j, e2 = exhaustive_select(w, pose, dsp, prev)
    assert (i, e) == (j, e2)


def test_msgd_unimodal_few_seeds():
    dsp = family_prior()
    rng = np.random.default_rng(1)
    for _ in range(30):
        target = rng.integers(dsp.size)
        r = random_rotation(rng)
        w = r[:2] @ dsp.states[target]
        i, _, trace = msgd_select(w, r, dsp, dsp.states[target], seeds=3)
        assert i == target == exhaustive_select(w, r, dsp, dsp.states[target])[0]
        assert len(trace) == 3


def test_msgd_tie_goes_to_lower_index():
    s = np.zeros((3, 3))
    s[0, 0] = 1.0
    dsp = DynamicShapePrior.from_states(np.stack([s, 3 * s]))
    w = np.zeros((2, 3))
    w[0, 0] = 2.0
    i, _, _ = msgd_select(w, np.eye(3), dsp, None, DsprWeights(beta=0.0), seeds=2)
    assert i == 0


def test_msgd_errors():
    dsp = family_prior(4, 5)
    with pytest.raises(InvalidInput):
        msgd_select(np.zeros((2, 5)), np.eye(3), dsp, None, seeds=0)
    with pytest.raises(InvalidInput):
        msgd_select(np.zeros((2, 4)), np.eye(3), dsp, None)


def test_frame_recovers_state_and_pose():
    dsp = family_prior()
    rng = np.random.default_rng(3)
    r = random_rotation(rng)
    w = r[:2] @ dsp.states[9]
    res = dspr_frame(w, dsp, dsp.states[8])
    assert res.index == 9
    np.testing.assert_allclose(np.asarray(res.pose), r, atol=1e-8)
    np.testing.assert_allclose(res.shape, r @ dsp.states[9], atol=1e-7)
    assert not res.low_confidence


def test_frame_result_is_stationary():
    dsp = family_prior(seed=4)
    rng = np.random.default_rng(4)
    r = random_rotation(rng)
    w = r[:2] @ dsp.states[15] + rng.normal(0, 0.5, (2, 30))
    w -= w.mean(axis=1, keepdims=True)
    prev = dsp.states[14]
    res = dspr_frame(w, dsp, prev)
    # no neighbouring index at the returned pose is better
    for j in (res.index - 1, res.index + 1):
        if 0 <= j < dsp.size:
            assert dspr_energy(w, dsp.states[j], res.pose, prev) >= res.energy - 1e-12
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))


def test_frame_with_erroneous_entries_returns_result():
    dsp = family_prior()
    rng = np.random.default_rng(5)
    r = random_rotation(rng)
    w = r[:2] @ dsp.states[5]
    ref = rotation_about("y", 0.1)[:2] @ dsp.states[0]
    mask = rng.random(w.shape[1]) < 0.5
    w[:, mask] = ref[:, mask]
    res = dspr_frame(w, dsp, dsp.states[5])
    assert 0 <= res.index < dsp.size
    assert np.isfinite(res.energy)


def test_frame_zero_tracks_low_confidence():
    dsp = family_prior(4, 6)
    res = dspr_frame(np.zeros((2, 6)), dsp, dsp.states[0])
    assert res.low_confidence


def test_sequence_point_mismatch():
    with pytest.raises(InvalidInput):
        dspr_sequence(np.zeros((4, 7)), family_prior(4, 6))


def test_sequence_self_convergence_small():
    dsp = family_prior(12, 25, seed=6)
    ids = [0, 1, 2, 4, 6, 7, 9, 11, 10, 8]
    rots = [rotation_about("y", a) @ rotation_about("x", 0.2) for a in np.linspace(-0.5, 0.5, len(ids))]
    w = np.vstack([r[:2] @ dsp.states[i] for r, i in zip(rots, ids)])
    res = dspr_sequence(w, dsp)
    assert [r.index for r in res] == ids
    for r, got in zip(rots, res):
        np.testing.assert_allclose(np.asarray(got.pose), r, atol=1e-8)


def test_id_width():
    assert id_width(1) == 1 and id_width(255) == 1
    assert id_width(256) == 2 and id_width(65535) == 2
    with pytest.raises(IdWidthOverflow):
        id_width(65536)


def _stream(frames=7):
    dsp = family_prior(10, 12, seed=7)
    rng = np.random.default_rng(7)
    ids = rng.integers(0, 10, frames)
    rots = [random_rotation(rng) for _ in range(frames)]
    w = np.vstack([r[:2] @ dsp.states[i] for r, i in zip(rots, ids)])
    stream, results = compress(w, dsp)
    return dsp, stream, results


def test_codec_round_trip():
    dsp, stream, results = _stream()
    buf = stream.to_bytes()
    back = CompressedStream.from_bytes(buf)
    np.testing.assert_array_equal(back.ids, stream.ids)
    np.testing.assert_array_equal(back.axis_angles, stream.axis_angles)
    shapes = np.asarray(decompress(buf)).reshape(len(results), 3, -1)
    for s, r in zip(shapes, results):
        assert np.linalg.norm(s) == pytest.approx(dsp.norms[r.index], rel=1e-12)
        np.testing.assert_allclose(s, r.shape, atol=1e-4)
    assert stream.record_bytes == 13
    assert stream.ratio == pytest.approx(0.7)


def test_codec_rejects_corruption():
    _, stream, _ = _stream()
    buf = stream.to_bytes()
    with pytest.raises(CorruptStream):
        CompressedStream.from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(CorruptStream):
        CompressedStream.from_bytes(buf[:-1])
    with pytest.raises(CorruptStream):
        CompressedStream.from_bytes(buf[:10])
    bad_width = bytearray(buf)
    bad_width[5] = 2
    with pytest.raises(CorruptStream):
        CompressedStream.from_bytes(bytes(bad_width))
    bad_id = CompressedStream(stream.q, stream.n, stream.dsp_blob,
                              np.full(stream.frames, 200), stream.axis_angles)
    with pytest.raises(CorruptStream):
        decompress(bad_id)


def test_codec_pose_precision():
    _, stream, results = _stream(20)
    back = CompressedStream.from_bytes(stream.to_bytes())
    for aa, r in zip(back.axis_angles, results):
        assert np.max(np.abs(axis_angle_to_rotation(aa.astype(float)) - np.asarray(r.pose))) < 1e-5


def test_dspr_config_defaults():
    cfg = DsprConfig()
    assert cfg.seeds == 20 and cfg.weights.beta == 0.01


def test_selection_invariant_to_pose():
    dsp = family_prior(16, 20, seed=8)
    rng = np.random.default_rng(8)
    chosen = set()
    for _ in range(50):
        r = random_rotation(rng)
        res = dspr_frame(r[:2] @ dsp.states[11], dsp, dsp.states[11])
        assert is_rotation(np.asarray(res.pose))
        chosen.add(res.index)
    assert chosen == {11}
