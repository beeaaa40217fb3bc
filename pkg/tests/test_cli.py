import io

import numpy as np
import pytest

from nrsfm_dsp import formats
from nrsfm_dsp.cli import main


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out=out, err=err)
    return code, parse(out.getvalue()), err.getvalue()


def parse(text):
    pairs = {}
    for line in text.splitlines():
        if "=" in line and "\t" not in line:
            k, v = line.split("=", 1)
            pairs[k] = v
    return pairs


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("e2e")
    p = lambda name: str(d / name)  # noqa: E731
    code, rep, _ = run("synth", "--frames", 30, "--points", 400, "--schedule", "a", "--seed", 7, "--out", p("sc"))
    assert code == 0 and rep["frames"] == "30"
    code, rep, _ = run("dcmdr", "--tracks", p("sc.tracks.nrsm"), "--k", 8,
                       "--out-shapes", p("est.nrsm"), "--out-poses", p("estp.nrsm"), "--out-trace", p("trace.tsv"))
    assert code == 0
    code, rep, _ = run("dsp-build", "--shapes", p("est.nrsm"), "--poses", p("estp.nrsm"), "--mu", 0,
                       "--out-dsp", p("prior.dsp"), "--mu-grid", "0,1,10", "--out-curve", p("curve.tsv"))
    assert code == 0 and 1 <= int(rep["q"]) <= 30
    code, rep, _ = run("dspr", "--tracks", p("sc.tracks.nrsm"), "--dsp", p("prior.dsp"), "--out", p("frames.tsv"),
                       "--out-shapes", p("dshapes.nrsm"), "--out-poses", p("dposes.nrsm"), "--out-ids", p("ids.txt"))
    assert code == 0 and float(rep["fps"]) > 0
    return p


def test_end_to_end_pipeline(pipeline):
    p = pipeline
    code, rep, _ = run("eval", "--gt-shapes", p("sc.shapes.nrsm"), "--est-shapes", p("dshapes.nrsm"),
                       "--gt-poses", p("sc.poses.nrsm"), "--est-poses", p("dposes.nrsm"), "--table", p("t.tsv"))
    assert code == 0
    assert float(rep["e3d"]) < 0.05
    header = open(p("t.tsv")).readline().split()
    assert header == ["frame", "e3d", "qe"]
    rows = open(p("frames.tsv")).read().splitlines()
    assert len(rows) == 31 and rows[0].startswith("frame\tindex")
    trace = np.loadtxt(p("trace.tsv"), skiprows=1)[:, 1]
    assert np.all(np.diff(trace) <= 0)


def test_compress_decompress(pipeline, tmp_path):
    p = pipeline
    code, rep, _ = run("compress", "--tracks", p("sc.tracks.nrsm"), "--dsp", p("prior.dsp"), "--out", tmp_path / "s.dspc")
    assert code == 0
    assert int(rep["bytes"]) == (tmp_path / "s.dspc").stat().st_size
    assert rep["id_width"] == "1" and rep["record_bytes"] == "13"
    code, rep, _ = run("decompress", "--stream", tmp_path / "s.dspc", "--out-shapes", tmp_path / "d.nrsm",
                       "--out-ids", tmp_path / "ids.txt")
    assert code == 0
    assert float(rep["max_rel_norm_deviation"]) < 1e-12
    assert open(tmp_path / "ids.txt").read() == open(p("ids.txt")).read()


def test_commands_are_deterministic(tmp_path):
    for tag in ("x", "y"):
        assert run("synth", "--frames", 5, "--points", 16, "--bases", 3, "--out", tmp_path / tag)[0] == 0
    assert (tmp_path / "x.tracks.nrsm").read_bytes() == (tmp_path / "y.tracks.nrsm").read_bytes()


def test_perturb_knockout(tmp_path):
    run("synth", "--frames", 4, "--points", 9, "--schedule", "b", "--out", tmp_path / "s")
    code, _, _ = run("perturb", "--tracks", tmp_path / "s.tracks.nrsm", "--magnitude", 2, "--out", tmp_path / "p.nrsm")
    assert code == 0
    diff = np.asarray(formats.read(tmp_path / "p.nrsm")) - np.asarray(formats.read(tmp_path / "s.tracks.nrsm"))
    assert np.abs(diff).max() <= 2
    code, rep, _ = run("knockout", "--tracks", tmp_path / "s.tracks.nrsm", "--ratio", 0.5,
                       "--out", tmp_path / "k.nrsm", "--out-mask", tmp_path / "m.tsv")
    assert code == 0 and rep["altered"] == "18"
    assert np.loadtxt(tmp_path / "m.tsv").sum() == 18


def test_dsp_build_ids_and_eval_eta(tmp_path):
    run("synth", "--frames", 6, "--points", 9, "--bases", 3, "--out", tmp_path / "s")
    code, rep, _ = run("dsp-build", "--shapes", tmp_path / "s.shapes.nrsm", "--mu", 1e9, "--out-ids", tmp_path / "i")
    assert code == 0 and rep["q"] == "1"
    code, rep, _ = run("eval", "--gt-ids", tmp_path / "s.ids.txt", "--est-ids", tmp_path / "s.ids.txt", "--q", 2)
    assert code == 0 and rep["eta_mean"] == "0.0" and rep["ratio"] == "3.0"


def test_empty_tracks_is_invalid_input(tmp_path):
    (tmp_path / "empty.nrsm").write_bytes(b"")
    run("synth", "--frames", 3, "--points", 9, "--out", tmp_path / "s")
    run("dsp-build", "--shapes", tmp_path / "s.shapes.nrsm", "--out-dsp", tmp_path / "d")
    code, _, err = run("dspr", "--tracks", tmp_path / "empty.nrsm", "--dsp", tmp_path / "d")
    assert code == 2
    assert "error=InvalidInput" in err


@pytest.mark.parametrize("argv,code,cls", [
    (["bogus"], 2, "InvalidInput"),
    (["synth", "--points", "10", "--out", "x"], 2, "InvalidInput"),
    (["dcmdr", "--tracks", "/nonexistent/file"], 2, "InvalidInput"),
    (["eval"], 2, "InvalidInput"),
])
def test_error_exit_codes(argv, code, cls):
    got, _, err = run(*argv)
    assert got == code
    assert f"error={cls}" in err


def test_corrupt_stream_exit_code(tmp_path):
    (tmp_path / "bad").write_bytes(b"DSPC" + b"\0" * 40)
    code, _, err = run("decompress", "--stream", tmp_path / "bad", "--out-shapes", tmp_path / "o")
    assert code == 7 and "error=CorruptStream" in err


def test_config_file_is_used(tmp_path):
    (tmp_path / "c.txt").write_text("frames=4\npoints=9\n")
    code, rep, _ = run("synth", "--config", tmp_path / "c.txt", "--out", tmp_path / "s")
    assert code == 0 and rep["frames"] == "4" and rep["points"] == "9"
    (tmp_path / "bad.txt").write_text("mu=3\n")
    assert run("synth", "--config", tmp_path / "bad.txt", "--out", tmp_path / "s")[0] == 2
