"""Rigid orthographic factorisation (Tomasi-Kanade) used to seed the batch solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, DegenerateMotion
from .geomcore import CameraPose, MeasurementMatrix, project_to_so3


@dataclass(frozen=True)
class RigidInitResult:
    """Output of :func:`rigid_factorize`.

    ``rest_shape`` is centred and expressed in the reference frame fixed by
    the factorisation; ``translations[f]`` is the 2D centroid removed from
    frame ``f``. The reconstruction is defined up to a global rotation and a
    reflection about the camera z-axis.
    """

    poses: list
    rest_shape: np.ndarray
    translations: np.ndarray
    orthonormality_residual: float


def center_measurements(w):
    """Subtract per-row means. Returns ``(centred, centroids)`` with centroids ``F x 2``."""
    data = np.asarray(w, dtype=float)
    mean = data.mean(axis=1, keepdims=True)
    return data - mean, mean.reshape(-1, 2)


def _sym_row(a, b):
    # coefficients of a^T G b over the 6 unknowns (g11, g12, g13, g22, g23, g33)
    return np.stack([
        a[:, 0] * b[:, 0],
        a[:, 0] * b[:, 1] + a[:, 1] * b[:, 0],
        a[:, 0] * b[:, 2] + a[:, 2] * b[:, 0],
        a[:, 1] * b[:, 1],
        a[:, 1] * b[:, 2] + a[:, 2] * b[:, 1],
        a[:, 2] * b[:, 2],
    ], axis=1)


def _gram_residual(m_hat, g):
    rows = m_hat.reshape(-1, 2, 3)
    a, b = rows[:, 0], rows[:, 1]
    aa = np.einsum("fi,ij,fj->f", a, g, a) - 1.0
    bb = np.einsum("fi,ij,fj->f", b, g, b) - 1.0
    ab = np.einsum("fi,ij,fj->f", a, g, b)
    return float(np.max(np.abs(np.concatenate([aa, bb, ab]))))


def rigid_factorize(w) -> RigidInitResult:
    """Factor measurements as ``W = [I_{2x3} R_f] S`` under rigidity.

    Steps: centre each frame, take the rank-3 truncated SVD, solve for the
    symmetric Gram matrix ``G = Q Q^T`` that makes every frame's two camera
    rows orthonormal, upgrade ``M Q`` / ``Q^{-1} X``, then complete each
    camera block to a rotation with a cross product and an SO(3) projection.

    Raises
    ------
    DegenerateMotion
        No frame-to-frame motion, or the Gram system is underdetermined /
        indefinite.
    DegenerateGeometry
        Centred measurements have rank below three (e.g. a planar scene).
    """
    w = w if isinstance(w, MeasurementMatrix) else MeasurementMatrix(w)
    n_frames = w.frames
    centred, centroids = center_measurements(w.data)

    frames = centred.reshape(n_frames, 2, -1)
    scale = max(np.max(np.abs(centred)), 1e-300)
    if n_frames < 2 or np.max(np.abs(frames - frames[:1])) <= 1e-12 * scale:
        raise DegenerateMotion("measurements are identical in every frame")

    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    if s.size < 3 or s[2] <= 1e-9 * s[0]:
        raise DegenerateGeometry("centred measurement matrix has rank < 3")
    root = np.sqrt(s[:3])
    m_hat = u[:, :3] * root
    x_hat = root[:, None] * vt[:3]

    rows = m_hat.reshape(n_frames, 2, 3)
    a, b = rows[:, 0], rows[:, 1]
    lhs = np.concatenate([_sym_row(a, a), _sym_row(b, b), _sym_row(a, b)])
    rhs = np.concatenate([np.ones(n_frames), np.ones(n_frames), np.zeros(n_frames)])
    g_vec, _, rank, _ = np.linalg.lstsq(lhs, rhs, rcond=None)
    if rank < 6:
        raise DegenerateMotion("metric upgrade system is underdetermined")
    g = np.array([[g_vec[0], g_vec[1], g_vec[2]],
                  [g_vec[1], g_vec[3], g_vec[4]],
                  [g_vec[2], g_vec[4], g_vec[5]]])

    evals, evecs = np.linalg.eigh(g)
    if evals[-1] <= 0 or evals[0] < -0.1 * evals[-1] or np.sum(evals <= 0) > 1:
        raise DegenerateMotion("Gram matrix is not positive definite")
    evals = np.maximum(evals, 1e-10)
    q = evecs * np.sqrt(evals)
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]

    motion = (m_hat @ q).reshape(n_frames, 2, 3)
    rest = np.linalg.solve(q, x_hat)
    rest = rest - rest.mean(axis=1, keepdims=True)

    poses = []
    for m in motion:
        third = np.cross(m[0], m[1])
        third /= max(np.linalg.norm(third), 1e-300)
        poses.append(project_to_so3(np.vstack([m, third])))

    return RigidInitResult(
        poses=poses,
        rest_shape=rest,
        translations=centroids,
        orthonormality_residual=_gram_residual(m_hat, q @ q.T),
    )
