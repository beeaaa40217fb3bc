"""``nrsfm-dsp`` command line: synthesis, batch solve, prior building, sequential solve, codec, metrics."""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time

import numpy as np

from . import formats
from .config import COMMAND_KEYS, RunConfig
from .dcmdr import AdjacencyTable, DcmdrConfig, DcmdrWeights, build_adjacency, dcmdr_reconstruct
from .dspbuild import build_dsp, canonicalize_states, dsp_cardinality_curve
from .dspr import CompressedStream, DsprConfig, DsprWeights, compress, decompress, dspr_sequence
from .errors import InvalidInput, NrsfmError
from .evalkit import (
    compression_ratio,
    convergence_pattern,
    corrective_rotation,
    quaternionic_error,
    rmse_3d,
    align_shapes,
)
from .geomcore import rotation_to_axis_angle
from .synthgen import (
    SceneConfig,
    expression_bases,
    generate_scene,
    knockout_tracks,
    perturb_tracks,
)

logger = logging.getLogger("nrsfm_dsp")

FLAG_KEYS = {
    "--frames": "frames", "--points": "points", "--schedule": "schedule", "--bases": "bases",
    "--secondary": "secondary", "--seed": "seed", "--k": "k", "--alpha": "alpha", "--beta": "beta",
    "--lambda": "lambda", "--rho": "rho", "--epsilon": "epsilon", "--max-iters": "max_iters",
    "--rel-tol": "rel_tol", "--grid": "grid", "--mu": "mu", "--mu-grid": "mu_grid", "--seeds": "seeds",
    "--gamma": "gamma", "--max-alternations": "max_alternations", "--dspr-rel-tol": "dspr_rel_tol",
    "--refit-pose": "refit_pose", "--magnitude": "magnitude", "--ratio": "ratio", "--fill": "fill",
    "--align": "align", "--q": "q",
}


def emit(stream, /, **pairs):
    for k, v in pairs.items():
        if isinstance(v, float):
            v = repr(v)
        stream.write(f"{k}={v}\n")


def _write_ids(path, ids):
    with open(path, "w") as fh:
        fh.write("".join(f"{int(i)}\n" for i in ids))


def _read_ids(path):
    with open(path) as fh:
        rows = [ln.split("\t")[0].strip() for ln in fh if ln.strip()]
    try:
        return np.array([int(r) for r in rows], dtype=np.int64)
    except ValueError:
        raise InvalidInput(f"{path}: expected one integer per line") from None


def _grid_dims(points):
    side = math.isqrt(points)
    if side * side != points:
        raise InvalidInput(f"--points {points} is not a square grid size")
    return side, side


def _adjacency(spec, n_points):
    if spec == "none":
        return AdjacencyTable.empty(n_points), "none"
    if spec == "auto":
        side = math.isqrt(n_points)
        if side * side != n_points:
            return AdjacencyTable.empty(n_points), "none"
        return build_adjacency((side, side)), f"grid{side}x{side}"
    try:
        rows, cols = (int(x) for x in spec.lower().split("x"))
    except ValueError:
        raise InvalidInput(f"grid must be 'auto', 'none' or RxC, got {spec!r}") from None
    if rows * cols != n_points:
        raise InvalidInput(f"grid {rows}x{cols} does not cover {n_points} points")
    return build_adjacency((rows, cols)), f"grid{rows}x{cols}"


def _dspr_config(cfg):
    beta = 0.01 if cfg["beta"] is None else cfg["beta"]
    return DsprConfig(DsprWeights(cfg["alpha"], beta, cfg["gamma"]), cfg["seeds"],
                      cfg["max_alternations"], cfg["dspr_rel_tol"], refit_pose=cfg["refit_pose"])


# -- subcommands -------------------------------------------------------------


def cmd_synth(args, cfg, out):
    rows, cols = _grid_dims(cfg["points"])
    bases = None
    if cfg["bases"]:
        if cfg["bases"] < 2:
            raise InvalidInput("--bases must be 0 (deforming sheet) or >= 2")
        bases = expression_bases(cfg["bases"], rows, cols, seed=cfg["seed"], secondary=cfg["secondary"])
    scene = generate_scene(SceneConfig(frames=cfg["frames"], base_shapes=bases,
                                       rotation_schedule=cfg["schedule"], seed=cfg["seed"], grid=(rows, cols)))
    prefix = args.out
    formats.write(f"{prefix}.tracks.nrsm", "W", scene.w_clean)
    formats.write(f"{prefix}.shapes.nrsm", "S", scene.gt_shapes)
    formats.write(f"{prefix}.poses.nrsm", "R", scene.gt_poses)
    _write_ids(f"{prefix}.ids.txt", scene.gt_state_ids)
    emit(out, frames=scene.frames, points=scene.w_clean.points, schedule=cfg["schedule"],
         seed=cfg["seed"], tracks=f"{prefix}.tracks.nrsm", shapes=f"{prefix}.shapes.nrsm",
         poses=f"{prefix}.poses.nrsm", ids=f"{prefix}.ids.txt")
    return 0


def cmd_dcmdr(args, cfg, out):
    w = formats.read(args.tracks, "W")
    adj, label = _adjacency(cfg["grid"], w.points)
    beta = 0.1 if cfg["beta"] is None else cfg["beta"]
    weights = DcmdrWeights(cfg["alpha"], beta, cfg["lambda"], cfg["rho"], cfg["epsilon"])
    config = DcmdrConfig(rank=cfg["k"] or None, weights=weights,
                         max_iterations=cfg["max_iters"], rel_tol=cfg["rel_tol"])
    started = time.perf_counter()
    res = dcmdr_reconstruct(w, adj, config)
    elapsed = time.perf_counter() - started
    if args.out_shapes:
        formats.write(args.out_shapes, "S", res.shapes)
    if args.out_poses:
        formats.write(args.out_poses, "R", res.poses)
    if args.out_trace:
        formats.write_tsv(args.out_trace, ("iteration", "energy"), enumerate(res.trace))
    emit(out, frames=w.frames, points=w.points, k=res.basis.rank, adjacency=label,
         iterations=len(res.trace) - 1, energy_initial=float(res.trace[0]),
         energy_final=float(res.trace[-1]), seconds=round(elapsed, 6))
    return 0


def _parse_grid(text):
    if not text:
        return []
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidInput(f"mu grid must be comma-separated numbers, got {text!r}") from None


def cmd_dsp_build(args, cfg, out):
    shapes = formats.read(args.shapes, "S")
    poses = formats.read(args.poses, "R") if args.poses else None
    states = canonicalize_states(shapes, poses)
    dsp = build_dsp(states, cfg["mu"])
    if args.out_dsp:
        formats.write(args.out_dsp, "DSP", dsp)
    if args.out_ids:
        _write_ids(args.out_ids, dsp.source_ids)
    emit(out, states=len(states), mu=cfg["mu"], q=dsp.size,
         ratio=compression_ratio(len(states), dsp.size))
    grid = _parse_grid(cfg["mu_grid"])
    if grid:
        curve = dsp_cardinality_curve(states, grid)
        if args.out_curve:
            formats.write_tsv(args.out_curve, ("mu", "q"), curve)
        for mu, q in curve:
            emit(out, **{f"curve_q[{mu!r}]": q})
    return 0


def _frame_rows(results):
    for f, r in enumerate(results):
        aa = rotation_to_axis_angle(r.pose)
        yield (f, r.index, float(r.energy), r.iterations, int(r.low_confidence),
               float(r.seconds), float(aa[0]), float(aa[1]), float(aa[2]))


FRAME_HEADER = ("frame", "index", "energy", "alternations", "low_confidence", "seconds", "aa_x", "aa_y", "aa_z")


def cmd_dspr(args, cfg, out):
    w = formats.read(args.tracks, "W")
    dsp = formats.read(args.dsp, "DSP")
    started = time.perf_counter()
    results = dspr_sequence(w, dsp, _dspr_config(cfg))
    elapsed = time.perf_counter() - started
    if args.out:
        formats.write_tsv(args.out, FRAME_HEADER, _frame_rows(results))
    else:
        formats.write_tsv(out, FRAME_HEADER, _frame_rows(results))
    if args.out_shapes:
        formats.write(args.out_shapes, "S", np.concatenate([dsp.states[r.index] for r in results]))
    if args.out_poses:
        formats.write(args.out_poses, "R", [r.pose for r in results])
    if args.out_ids:
        _write_ids(args.out_ids, [r.index for r in results])
    emit(out, frames=len(results), q=dsp.size, seconds=round(elapsed, 6),
         fps=round(len(results) / max(elapsed, 1e-12), 3),
         low_confidence=sum(r.low_confidence for r in results))
    return 0


def cmd_compress(args, cfg, out):
    w = formats.read(args.tracks, "W")
    dsp = formats.read(args.dsp, "DSP")
    stream, _ = compress(w, dsp, _dspr_config(cfg))
    data = stream.to_bytes()
    with open(args.out, "wb") as fh:
        fh.write(data)
    emit(out, frames=stream.frames, q=stream.q, id_width=stream.id_width, bytes=len(data),
         dsp_bytes=len(stream.dsp_blob), record_bytes=stream.record_bytes, ratio=stream.ratio)
    return 0


def cmd_decompress(args, cfg, out):
    with open(args.stream, "rb") as fh:
        stream = CompressedStream.from_bytes(fh.read())
    shapes = decompress(stream)
    formats.write(args.out_shapes, "S", shapes)
    if args.out_ids:
        _write_ids(args.out_ids, stream.ids)
    dsp = stream.prior()
    frames = np.asarray(shapes).reshape(stream.frames, 3, -1)
    fn = np.sqrt(np.einsum("fij,fij->f", frames, frames))
    dev = np.abs(fn - dsp.norms[stream.ids]) / np.maximum(dsp.norms[stream.ids], 1e-300)
    emit(out, frames=stream.frames, q=stream.q, max_rel_norm_deviation=float(np.max(dev)))
    return 0


def cmd_perturb(args, cfg, out):
    w = formats.read(args.tracks, "W")
    formats.write(args.out, "W", perturb_tracks(w, cfg["magnitude"], cfg["seed"]))
    emit(out, magnitude=cfg["magnitude"], seed=cfg["seed"], out=args.out)
    return 0


def cmd_knockout(args, cfg, out):
    w = formats.read(args.tracks, "W")
    res, mask = knockout_tracks(w, cfg["ratio"], cfg["fill"], cfg["seed"])
    formats.write(args.out, "W", res)
    if args.out_mask:
        np.savetxt(args.out_mask, mask.astype(np.int8), fmt="%d", delimiter="\t")
    emit(out, ratio=cfg["ratio"], fill=cfg["fill"], altered=int(mask.sum()), out=args.out)
    return 0


def cmd_eval(args, cfg, out):
    report = {}
    columns = {}
    if args.gt_shapes and args.est_shapes:
        gt = np.asarray(formats.read(args.gt_shapes, "S"))
        est = np.asarray(formats.read(args.est_shapes, "S"))
        if gt.shape != est.shape:
            raise InvalidInput(f"shape files differ: {gt.shape} vs {est.shape}")
        g = gt.reshape(-1, 3, gt.shape[1])
        e = est.reshape(g.shape)
        if cfg["align"]:
            e, _ = align_shapes(g, e)
        report["e3d"] = rmse_3d(g, e)
        columns["e3d"] = [rmse_3d(g[i:i + 1], e[i:i + 1]) for i in range(len(g))]
    if args.gt_poses and args.est_poses:
        gp = formats.read(args.gt_poses, "R")
        ep = formats.read(args.est_poses, "R")
        al = corrective_rotation(gp, ep)
        report["qe"] = quaternionic_error(gp, ep, al.corrective, al.reflected)
        report["reflected"] = int(al.reflected)
        columns["qe"] = [quaternionic_error([a], [b], al.corrective, al.reflected) for a, b in zip(gp, ep)]
    if args.gt_ids and args.est_ids:
        eta = convergence_pattern(_read_ids(args.est_ids), _read_ids(args.gt_ids))
        report["eta_mean"] = float(np.mean(eta))
        report["eta_zero_fraction"] = float(np.mean(eta == 0))
        columns["eta"] = eta.tolist()
    if cfg["q"]:
        frames = max((len(v) for v in columns.values()), default=0)
        if not frames:
            raise InvalidInput("compression ratio needs a frame count from another metric")
        report["ratio"] = compression_ratio(frames, cfg["q"])
    if not report:
        raise InvalidInput("nothing to evaluate: pass matching --gt-*/--est-* files")
    emit(out, **report)
    if args.table and columns:
        names = list(columns)
        frames = len(columns[names[0]])
        rows = ((f, *(columns[n][f] for n in names)) for f in range(frames))
        formats.write_tsv(args.table, ("frame", *names), rows)
    return 0


COMMANDS = {
    "synth": cmd_synth, "dcmdr": cmd_dcmdr, "dsp-build": cmd_dsp_build, "dspr": cmd_dspr,
    "compress": cmd_compress, "decompress": cmd_decompress, "perturb": cmd_perturb,
    "knockout": cmd_knockout, "eval": cmd_eval,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidInput(message)


def build_parser():
    parser = _Parser(prog="nrsfm-dsp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def tunables(p, command):
        p.add_argument("--config", help="key=value config file")
        for flag, key in FLAG_KEYS.items():
            if key in COMMAND_KEYS[command]:
                p.add_argument(flag, dest=key, default=None)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    tunables(p, "synth")
    p.add_argument("--out", required=True, help="output prefix")

    p = sub.add_parser("dcmdr", help="batch reconstruction")
    tunables(p, "dcmdr")
    p.add_argument("--tracks", required=True)
    p.add_argument("--out-shapes")
    p.add_argument("--out-poses")
    p.add_argument("--out-trace")

    p = sub.add_parser("dsp-build", help="build a dynamic shape prior")
    tunables(p, "dsp-build")
    p.add_argument("--shapes", required=True)
    p.add_argument("--poses")
    p.add_argument("--out-dsp")
    p.add_argument("--out-ids")
    p.add_argument("--out-curve")

    for name in ("dspr", "compress"):
        p = sub.add_parser(name, help="sequential reconstruction" if name == "dspr" else "compress tracks")
        tunables(p, name)
        p.add_argument("--tracks", required=True)
        p.add_argument("--dsp", required=True)
        p.add_argument("--out", required=name == "compress")
        if name == "dspr":
            p.add_argument("--out-shapes")
            p.add_argument("--out-poses")
            p.add_argument("--out-ids")

    p = sub.add_parser("decompress", help="expand a compressed stream")
    tunables(p, "decompress")
    p.add_argument("--stream", required=True)
    p.add_argument("--out-shapes", required=True)
    p.add_argument("--out-ids")

    p = sub.add_parser("perturb", help="add uniform track noise")
    tunables(p, "perturb")
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("knockout", help="replace tracks by erroneous values")
    tunables(p, "knockout")
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-mask")

    p = sub.add_parser("eval", help="metrics against ground truth")
    tunables(p, "eval")
    for name in ("gt-shapes", "est-shapes", "gt-poses", "est-poses", "gt-ids", "est-ids", "table"):
        p.add_argument(f"--{name}")
    return parser


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=err)
        overrides = {k: getattr(args, k) for k in COMMAND_KEYS[args.command]}
        cfg = RunConfig.load(args.command, args.config, overrides)
        return COMMANDS[args.command](args, cfg, out)
    except NrsfmError as exc:
        err.write(f"error={type(exc).__name__}\nmessage={exc}\n")
        return exc.exit_code
    except OSError as exc:
        err.write(f"error=InvalidInput\nmessage={exc}\n")
        return InvalidInput.exit_code


if __name__ == "__main__":
    sys.exit(main())
