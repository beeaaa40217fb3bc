"""Numeric primitives shared by every solver: value types, norms, SO(3) helpers.

Conventions
-----------
- Measurements ``W`` are stacked ``2F x N`` (rows ``u, v`` per frame).
- Shapes ``S`` are stacked ``3F x N`` (rows ``x, y, z`` per frame).
- A pose ``R`` maps a shape into the camera frame; the orthographic camera
  keeps the first two rows of ``R @ S``.
- Quaternions are ``(w, x, y, z)`` with ``w >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, InvalidInput

ROTATION_TOL = 1e-9

# reflection about the camera z-axis; the orthographic sign ambiguity
Z_REFLECTION = np.diag([1.0, 1.0, -1.0])


def _finite_matrix(m, name="matrix"):
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m[np.newaxis, :]
    if m.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class MeasurementMatrix:
    """Stacked orthographic observations, two rows per frame."""

    data: np.ndarray

    def __post_init__(self):
        d = _finite_matrix(self.data, "measurement matrix")
        if d.shape[0] == 0 or d.shape[1] == 0 or d.shape[0] % 2:
            raise InvalidInput(f"measurement matrix must be 2F x N with F, N >= 1, got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @classmethod
    def from_frames(cls, frames):
        return cls(np.vstack([np.asarray(f, dtype=float).reshape(2, -1) for f in frames]))

    @property
    def frames(self) -> int:
        return self.data.shape[0] // 2

    @property
    def points(self) -> int:
        return self.data.shape[1]

    def frame(self, f: int) -> np.ndarray:
        return self.data[2 * f:2 * f + 2]

    def __array__(self, dtype=None, copy=None):
        if copy:
            return np.array(self.data, dtype=dtype)
        return np.asarray(self.data, dtype=dtype)


@dataclass(frozen=True)
class ShapeSequence:
    """Stacked 3D point sets, three rows per frame."""

    data: np.ndarray

    def __post_init__(self):
        d = _finite_matrix(self.data, "shape sequence")
        if d.shape[0] == 0 or d.shape[1] == 0 or d.shape[0] % 3:
            raise InvalidInput(f"shape sequence must be 3F x N with F, N >= 1, got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @classmethod
    def from_frames(cls, frames):
        return cls(np.vstack([np.asarray(f, dtype=float).reshape(3, -1) for f in frames]))

    @property
    def frames(self) -> int:
        return self.data.shape[0] // 3

    @property
    def points(self) -> int:
        return self.data.shape[1]

    def frame(self, f: int) -> np.ndarray:
        return self.data[3 * f:3 * f + 3]

    def stack(self) -> np.ndarray:
        """Frames as an ``(F, 3, N)`` array (copy)."""
        return self.data.reshape(self.frames, 3, self.points).copy()

    def __array__(self, dtype=None, copy=None):
        if copy:
            return np.array(self.data, dtype=dtype)
        return np.asarray(self.data, dtype=dtype)


def is_rotation(r, tol: float = ROTATION_TOL) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return (np.max(np.abs(r.T @ r - np.eye(3))) <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol)


@dataclass(frozen=True)
class CameraPose:
    """A proper rotation. ``np.asarray(pose)`` gives the 3x3 matrix."""

    rotation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        if not is_rotation(r):
            raise InvalidInput("pose is not a proper rotation within 1e-9")
        r.setflags(write=False)
        object.__setattr__(self, "rotation", r)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def __array__(self, dtype=None, copy=None):
        if copy:
            return np.array(self.rotation, dtype=dtype)
        return np.asarray(self.rotation, dtype=dtype)


def as_rotation(pose) -> np.ndarray:
    """Accept a CameraPose or a raw 3x3 array."""
    r = np.asarray(pose.rotation if isinstance(pose, CameraPose) else pose, dtype=float)
    if r.shape != (3, 3):
        raise InvalidInput(f"rotation must be 3x3, got {r.shape}")
    return r


@dataclass(frozen=True)
class OrthographicProjector:
    """The constant truncation operator ``I_{2x3}``."""

    matrix = np.eye(2, 3)

    def __call__(self, m):
        return np.asarray(m, dtype=float)[:2]


@dataclass(frozen=True)
class RobustNormConfig:
    """Per-element residual penalty.

    ``huber`` sums Huber losses; ``frobenius`` is the plain least-squares
    penalty ``0.5 * ||m||_F^2`` (the large-epsilon limit of ``huber``).
    """

    epsilon: float = 0.1
    mode: str = "huber"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidInput("epsilon must be positive")
        if self.mode not in ("huber", "frobenius"):
            raise InvalidInput(f"unknown norm mode {self.mode!r}")

    def loss(self, m) -> float:
        if self.mode == "huber":
            return huber_loss(m, self.epsilon)
        return 0.5 * frobenius_norm(m) ** 2

    def weights(self, r):
        """IRLS weights ``rho'(r) / r`` for residual array ``r``."""
        if self.mode == "huber":
            return huber_weights(r, self.epsilon)
        return np.ones_like(np.asarray(r, dtype=float))

    def derivative(self, r):
        if self.mode == "huber":
            return huber_derivative(r, self.epsilon)
        return np.asarray(r, dtype=float)


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise InvalidInput("matrix has non-finite entries")
    return float(np.sqrt(np.sum(m * m)))


def huber_elementwise(r, epsilon: float):
    a = np.abs(r)
    return np.where(a <= epsilon, 0.5 * r * r, epsilon * a - 0.5 * epsilon * epsilon)


def huber_loss(m, epsilon: float) -> float:
    """Sum of per-element Huber penalties.

    ``rho(r) = r^2 / 2`` for ``|r| <= epsilon`` and
    ``epsilon * |r| - epsilon^2 / 2`` otherwise.
    """
    if not epsilon > 0:
        raise InvalidInput("epsilon must be positive")
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise InvalidInput("matrix has non-finite entries")
    return float(np.sum(huber_elementwise(m, epsilon)))


def huber_derivative(r, epsilon: float):
    r = np.asarray(r, dtype=float)
    return np.clip(r, -epsilon, epsilon)


def huber_weights(r, epsilon: float):
    a = np.abs(np.asarray(r, dtype=float))
    return np.where(a <= epsilon, 1.0, epsilon / np.maximum(a, epsilon))


def project_to_so3(m) -> CameraPose:
    """Closest proper rotation to ``m`` in the Frobenius sense."""
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidInput("expected a finite 3x3 matrix")
    u, s, vt = np.linalg.svd(m)
    if s[-1] <= 1e-12 * max(1.0, s[0]):
        raise DegenerateGeometry("matrix is rank deficient; no unique rotation")
    d = np.sign(np.linalg.det(u @ vt))
    r = (u * np.array([1.0, 1.0, d])) @ vt
    return CameraPose(r)


def orthographic_project(pose, shape) -> np.ndarray:
    shape = _finite_matrix(shape, "shape")
    if shape.shape[0] != 3:
        raise InvalidInput(f"shape must be 3 x N, got {shape.shape}")
    return as_rotation(pose)[:2] @ shape


def rotation_to_quaternion(pose) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    r = as_rotation(pose)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0))
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _first_nonzero_positive(v):
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def rotation_to_axis_angle(pose) -> np.ndarray:
    """Rotation vector ``axis * angle`` with ``angle`` in ``[0, pi]``.

    At exactly ``pi`` the axis is chosen with its first nonzero component
    positive.
    """
    q = rotation_to_quaternion(pose)
    w, v = q[0], q[1:]
    sin_half = np.linalg.norm(v)
    if sin_half < 1e-15:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(sin_half, w)
    axis = v / sin_half
    if np.pi - angle < 1e-12:
        axis = _first_nonzero_positive(axis)
    return axis * angle


def axis_angle_to_rotation(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=float).reshape(3)
    angle = np.linalg.norm(vec)
    if angle < 1e-300:
        return np.eye(3)
    k = vec / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def axis_angle_codec(value):
    """Encode a pose to a 3-vector, or decode a 3-vector to a CameraPose."""
    arr = np.asarray(value.rotation if isinstance(value, CameraPose) else value, dtype=float)
    if arr.shape == (3, 3):
        return rotation_to_axis_angle(arr)
    if arr.shape == (3,):
        return CameraPose(project_to_so3(axis_angle_to_rotation(arr)).rotation)
    raise InvalidInput(f"expected a 3x3 rotation or a 3-vector, got shape {arr.shape}")


def rotation_about(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise InvalidInput(f"unknown axis {axis!r}")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (normalised Gaussian quaternion)."""
    q = rng.standard_normal(4)
    return quaternion_to_rotation(q / np.linalg.norm(q))
