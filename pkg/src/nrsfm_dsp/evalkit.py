"""Evaluation metrics: shape RMSE, corrective rotation, quaternionic error, eta, compression ratio."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .geomcore import (
    Z_REFLECTION,
    CameraPose,
    as_rotation,
    project_to_so3,
    rotation_to_quaternion,
)


@dataclass(frozen=True)
class AlignmentResult:
    corrective: CameraPose
    reflected: bool
    residual: float


def _frames(seq):
    data = np.asarray(seq, dtype=float)
    if data.ndim == 3:
        return data
    if data.ndim != 2 or data.shape[0] % 3:
        raise InvalidInput(f"expected a 3F x N shape sequence, got {data.shape}")
    return data.reshape(data.shape[0] // 3, 3, data.shape[1])


def align_shapes(gt, est, allow_reflection: bool = True):
    """Single orthogonal transform ``Q`` minimising ``sum_f ||gt_f - Q est_f||_F``.

    Returns ``(aligned_est, Q)``; ``Q`` is a rotation, or a rotation times a
    reflection when that fits better and ``allow_reflection`` is set.
    """
    g, e = _frames(gt), _frames(est)
    if g.shape != e.shape:
        raise InvalidInput(f"shape mismatch {g.shape} vs {e.shape}")
    cross = np.einsum("fin,fjn->ij", g, e)
    u, _, vt = np.linalg.svd(cross)
    q = u @ vt
    if not allow_reflection and np.linalg.det(q) < 0:
        q = (u * np.array([1.0, 1.0, -1.0])) @ vt
    return np.einsum("ij,fjn->fin", q, e), q


def rmse_3d(gt, est, align: bool = False, allow_reflection: bool = True) -> float:
    """Mean over frames of ``||gt_f - est_f||_F / ||gt_f||_F``.

    With ``align`` the estimate is first mapped by one global rotation
    (optionally with reflection) fitted over the whole sequence.
    """
    g, e = _frames(gt), _frames(est)
    if g.shape != e.shape:
        raise InvalidInput(f"shape mismatch {g.shape} vs {e.shape}")
    if align:
        e, _ = align_shapes(g, e, allow_reflection)
    denom = np.sqrt(np.einsum("fin,fin->f", g, g))
    if np.any(denom == 0):
        raise InvalidInput("ground-truth frame with zero norm")
    num = np.sqrt(np.einsum("fin,fin->f", g - e, g - e))
    return float(np.mean(num / denom))


def _huber_frame(d, eps):
    return np.where(d <= eps, 0.5 * d * d, eps * d - 0.5 * eps * eps)


def _corrective_once(gt, est, epsilon, rounds, tol, side):
    def dists(c):
        comp = np.einsum("ij,fjk->fik", c, est) if side == "left" else np.einsum("fij,jk->fik", est, c)
        return np.sqrt(np.einsum("fij,fij->f", gt - comp, gt - comp))

    weights = np.ones(len(gt))
    prev = None
    c = np.eye(3)
    for _ in range(rounds):
        if side == "left":
            m = np.einsum("f,fij,fkj->ik", weights, gt, est)
        else:
            m = np.einsum("f,fji,fjk->ik", weights, est, gt)
        c = np.asarray(project_to_so3(m))
        d = dists(c)
        obj = float(np.sum(_huber_frame(d, epsilon)))
        weights = np.where(d <= epsilon, 1.0, epsilon / np.maximum(d, epsilon))
        if prev is not None and abs(prev - obj) <= tol * max(prev, 1e-300):
            break
        prev = obj
    d = dists(c)
    return c, float(np.sum(_huber_frame(d, epsilon)))


def corrective_rotation(gt_poses, est_poses, epsilon: float = 1.0, rounds: int = 20,
                        tol: float = 1e-10, side: str = "left") -> AlignmentResult:
    """Robust global rotation reconciling two pose streams.

    Minimises ``sum_f huber_eps(||R'_f - C R_f||_F)`` (``side="left"``) or
    ``||R'_f - R_f C||_F`` (``side="right"``, the world-frame ambiguity of a
    reconstruction) by reweighted closed-form Procrustes. The estimate is also
    tried with the camera z-reflection ``Z R_f Z`` applied; the better fit wins.
    """
    if len(gt_poses) != len(est_poses) or not len(gt_poses):
        raise InvalidInput("pose streams must be non-empty and of equal length")
    if side not in ("left", "right"):
        raise InvalidInput(f"unknown side {side!r}")
    gt = np.stack([as_rotation(p) for p in gt_poses])
    est = np.stack([as_rotation(p) for p in est_poses])
    c0, r0 = _corrective_once(gt, est, epsilon, rounds, tol, side)
    est_z = np.einsum("ij,fjk,kl->fil", Z_REFLECTION, est, Z_REFLECTION)
    c1, r1 = _corrective_once(gt, est_z, epsilon, rounds, tol, side)
    if r1 < r0:
        return AlignmentResult(CameraPose(c1), True, r1)
    return AlignmentResult(CameraPose(c0), False, r0)


def apply_corrective(est_poses, alignment: AlignmentResult, side: str = "left"):
    c = np.asarray(alignment.corrective)
    out = []
    for p in est_poses:
        r = as_rotation(p)
        if alignment.reflected:
            r = Z_REFLECTION @ r @ Z_REFLECTION
        out.append(c @ r if side == "left" else r @ c)
    return out


def quaternionic_error(gt_poses, est_poses, corrective=None, reflected: bool = False,
                       side: str = "left") -> float:
    """Mean ``|q'_f - q_f|`` between sign-normalised quaternions of ``R'_f`` and ``C R_f``."""
    if len(gt_poses) != len(est_poses):
        raise InvalidInput("pose streams must have equal length")
    if not len(gt_poses):
        return 0.0
    c = np.eye(3) if corrective is None else as_rotation(corrective)
    dists = []
    for g, e in zip(gt_poses, est_poses):
        r = as_rotation(e)
        if reflected:
            r = Z_REFLECTION @ r @ Z_REFLECTION
        r = c @ r if side == "left" else r @ c
        dists.append(float(np.linalg.norm(rotation_to_quaternion(g) - rotation_to_quaternion(r))))
    return math.fsum(dists) / len(dists)


def convergence_pattern(chosen, gt) -> np.ndarray:
    chosen, gt = np.asarray(chosen, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    if chosen.shape != gt.shape:
        raise InvalidInput("index lists must have equal length")
    return np.abs(chosen - gt)


def nearest_norm_indices(norms, shapes) -> np.ndarray:
    """Per frame, the index in ``norms`` closest to the frame's Frobenius norm.

    For a prior built from the ground-truth shapes themselves this is the
    ground-truth DSP state of every frame.
    """
    norms = np.asarray(norms, dtype=float)
    f = _frames(shapes)
    fn = np.sqrt(np.einsum("fij,fij->f", f, f))
    return np.argmin(np.abs(fn[:, None] - norms[None, :]), axis=1)


def convergence_heatmap(patterns: dict) -> str:
    """Tab-separated heat-map: one row per noise level, one column per frame."""
    if not patterns:
        return ""
    frames = max(len(v) for v in patterns.values())
    lines = ["level\t" + "\t".join(str(f) for f in range(frames))]
    for level, etas in patterns.items():
        lines.append(f"{level}\t" + "\t".join(str(int(e)) for e in etas))
    return "\n".join(lines) + "\n"


def compression_ratio(frames: int, dsp_cardinality: int) -> float:
    if dsp_cardinality < 1:
        raise InvalidInput("DSP cardinality must be >= 1")
    return frames / dsp_cardinality
