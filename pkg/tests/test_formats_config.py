import io

import numpy as np
import pytest

from nrsfm_dsp import formats
from nrsfm_dsp.config import PARAMS, RunConfig
from nrsfm_dsp.dspbuild import build_dsp
from nrsfm_dsp.errors import CorruptStream, InvalidInput
from nrsfm_dsp.geomcore import MeasurementMatrix, ShapeSequence, random_rotation


def test_header_layout_is_bit_exact():
    data = formats.encode_matrix("W", np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert data.startswith(b"NRSM1 W 1 2\n")
    assert data[12:] == np.array([1.0, 2.0, 3.0, 4.0], dtype="<f8").tobytes()


def test_round_trip_all_kinds(tmp_path):
    rng = np.random.default_rng(0)
    w = rng.standard_normal((6, 5))
    s = rng.standard_normal((9, 5))
    poses = [random_rotation(rng) for _ in range(3)]
    dsp = build_dsp(list(rng.standard_normal((4, 3, 5))), 0.0)
    formats.write(tmp_path / "w", "W", w)
    formats.write(tmp_path / "s", "S", ShapeSequence(s))
    formats.write(tmp_path / "r", "R", poses)
    formats.write(tmp_path / "d", "DSP", dsp)
    assert isinstance(formats.read(tmp_path / "w", "W"), MeasurementMatrix)
    np.testing.assert_array_equal(np.asarray(formats.read(tmp_path / "w")), w)
    np.testing.assert_array_equal(np.asarray(formats.read(tmp_path / "s")), s)
    for a, b in zip(formats.read(tmp_path / "r", "R"), poses):
        np.testing.assert_array_equal(np.asarray(a), b)
    back = formats.read(tmp_path / "d", "DSP")
    np.testing.assert_array_equal(back.states, dsp.states)
    np.testing.assert_array_equal(back.norms, dsp.norms)


def test_writes_are_byte_identical(tmp_path):
    w = np.random.default_rng(1).standard_normal((4, 3))
    formats.write(tmp_path / "a", "W", w)
    formats.write(tmp_path / "b", "W", w)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_read_errors(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"")
    with pytest.raises(InvalidInput):
        formats.read(p)
    p.write_bytes(b"NRSM1 W 0 0\n")
    with pytest.raises(InvalidInput):
        formats.read(p)
    good = formats.encode_matrix("W", np.ones((2, 2)))
    p.write_bytes(good[:-3])
    with pytest.raises(CorruptStream):
        formats.read(p)
    p.write_bytes(good + b"\0")
    with pytest.raises(CorruptStream):
        formats.read(p)
    p.write_bytes(b"NRSM2 W 1 2\n" + good[12:])
    with pytest.raises(CorruptStream):
        formats.read(p)
    p.write_bytes(b"NRSM1 Q 1 2\n" + good[12:])
    with pytest.raises(CorruptStream):
        formats.read(p)
    p.write_bytes(good)
    with pytest.raises(InvalidInput):
        formats.read(p, "S")
    with pytest.raises(InvalidInput):
        formats.encode_matrix("S", np.ones((2, 2)))


def test_write_tsv():
    buf = io.StringIO()
    formats.write_tsv(buf, ("a", "b"), [(1, 0.5), (2, 0.25)])
    assert buf.getvalue() == "a\tb\n1\t0.5\n2\t0.25\n"


def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig("dcmdr")
    assert cfg["alpha"] == 1.0 and cfg["beta"] is None and cfg["max_iters"] == 50
    p = tmp_path / "c.txt"
    p.write_text("# weights\nalpha = 2.5\nmax_iters=7  # short\n")
    cfg = RunConfig.load("dcmdr", p, {"max_iters": "9"})
    assert cfg["alpha"] == 2.5 and cfg["max_iters"] == 9


def test_config_round_trip():
    cfg = RunConfig("dspr", {"seeds": "5", "refit_pose": "false"})
    again = RunConfig("dspr", RunConfig.parse_text(cfg.dumps()))
    assert again.values == cfg.values


@pytest.mark.parametrize("command,values", [
    ("dcmdr", {"mu": "1"}),
    ("dcmdr", {"alpha": "0"}),
    ("dcmdr", {"beta": "-1"}),
    ("dcmdr", {"max_iters": "abc"}),
    ("dcmdr", {"rel_tol": "nan"}),
    ("knockout", {"ratio": "1.5"}),
    ("synth", {"schedule": "c"}),
    ("dspr", {"refit_pose": "maybe"}),
])
def test_config_rejects(command, values):
    with pytest.raises(InvalidInput):
        RunConfig(command, values)


def test_config_text_errors():
    with pytest.raises(InvalidInput):
        RunConfig.parse_text("alpha=1\nalpha=2\n")
    with pytest.raises(InvalidInput):
        RunConfig.parse_text("alpha\n")
    with pytest.raises(InvalidInput):
        RunConfig.parse_text("=3\n")
    with pytest.raises(InvalidInput):
        RunConfig("nope")


def test_every_param_default_parses():
    for name, p in PARAMS.items():
        if p.default is not None:
            assert p.parse(name, p.default) == p.default
