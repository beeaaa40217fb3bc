"""Closed-form orthographic pose update shared by the batch and sequential solvers."""

import numpy as np

from .errors import DegenerateGeometry, InvalidInput
from .geomcore import CameraPose, project_to_so3


def update_pose(w_f, state, weights=None) -> CameraPose:
    """Rotation explaining ``w_f`` (2 x N) as the projection of ``state`` (3 x N).

    Solves the affine least-squares problem ``min_M ||W_f - M state||``
    (optionally with per-point ``weights``), completes the two rows of ``M``
    with their normalised cross product and projects the result to SO(3).
    """
    w_f = np.asarray(w_f, dtype=float)
    state = np.asarray(state, dtype=float)
    if w_f.ndim != 2 or w_f.shape[0] != 2 or state.shape != (3, w_f.shape[1]):
        raise InvalidInput(f"shape mismatch: W_f {w_f.shape}, state {state.shape}")
    sw = state if weights is None else state * weights
    gram = sw @ state.T
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise DegenerateGeometry("state points are collinear or coincident")
    m = np.linalg.solve(gram, sw @ w_f.T).T
    third = np.cross(m[0], m[1])
    norm = np.linalg.norm(third)
    if norm <= 1e-12 * max(np.linalg.norm(m) ** 2, 1e-300):
        raise DegenerateGeometry("affine camera rows are parallel; measurements carry no pose")
    return project_to_so3(np.vstack([m, third / norm]))
