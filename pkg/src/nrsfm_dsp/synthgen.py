"""Synthetic scenes for generate-and-recover testing.

Two shape sources are built in:

* a deforming sheet (20 x 20 grid by default) whose z-bending follows the
  first three DCT trajectory atoms, so it is exactly representable by the
  batch solver's trajectory model;
* piecewise-linear interpolation between base shapes (user-supplied, or
  from :func:`sheet_bases` / :func:`expression_bases`), the protocol used
  for recurring-state sequences.

Rotation schedules ``"a"`` (four-cycle yaw sweep of +-30 deg under a fixed
10 deg tilt) and ``"b"`` (yaw/pitch
oscillation) differ only in camera motion, so scenes generated from the same
shapes under both are suitable for cross-convergence checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dcmdr import build_adjacency, make_dct_basis
from .errors import InvalidInput
from .geomcore import CameraPose, MeasurementMatrix, ShapeSequence, rotation_about

SHEET_AMPLITUDES = (80.0, 25.0, 20.0)


@dataclass(frozen=True)
class SyntheticScene:
    gt_shapes: ShapeSequence
    gt_poses: list
    gt_state_ids: np.ndarray
    w_clean: MeasurementMatrix
    seed: int
    grid_shape: tuple | None = None

    @property
    def frames(self) -> int:
        return self.gt_shapes.frames

    def adjacency(self):
        if self.grid_shape is None:
            raise InvalidInput("scene has no grid layout")
        return build_adjacency(self.grid_shape)


@dataclass
class SceneConfig:
    frames: int = 30
    base_shapes: list | None = None
    rotation_schedule: object = "a"
    seed: int = 0
    grid: tuple = (20, 20)
    extent: float = 200.0
    amplitudes: tuple = SHEET_AMPLITUDES


def sheet_grid(rows: int = 20, cols: int = 20, extent: float = 200.0) -> np.ndarray:
    """Flat centred grid, row-major point ids, shape ``3 x rows*cols``."""
    half = extent / 2.0
    y, x = np.meshgrid(np.linspace(-half, half, rows), np.linspace(-half, half, cols), indexing="ij")
    return np.vstack([x.ravel(), y.ravel(), np.zeros(rows * cols)])


def sheet_modes(rows: int = 20, cols: int = 20, extent: float = 200.0) -> np.ndarray:
    """Three smooth bending fields on the grid (``3 x N``): dome, x-bend, saddle-like twist."""
    g = sheet_grid(rows, cols, extent)
    u, v = g[0] / (extent / 2.0), g[1] / (extent / 2.0)
    return np.vstack([
        np.cos(0.5 * np.pi * u) * np.cos(0.5 * np.pi * v),
        np.sin(0.5 * np.pi * u),
        np.sin(0.5 * np.pi * v) * np.cos(0.5 * np.pi * u),
    ])


def _centred(x):
    return x - x.mean(axis=-1, keepdims=True)


def deforming_sheet(frames: int, rows: int = 20, cols: int = 20, extent: float = 200.0,
                    amplitudes=SHEET_AMPLITUDES) -> np.ndarray:
    """``(F, 3, N)`` sheet sequence; each point's z-trajectory lies in the span of the first 3 DCT atoms."""
    base = sheet_grid(rows, cols, extent)
    modes = sheet_modes(rows, cols, extent)
    atoms = make_dct_basis(frames, min(3, frames)).theta            # F x <=3
    amps = np.asarray(amplitudes, dtype=float)[:atoms.shape[1]]
    z = np.einsum("fk,k,kn->fn", atoms, amps, modes[:atoms.shape[1]])
    out = np.repeat(base[None], frames, axis=0)
    out[:, 2] = z
    return _centred(out)


def sheet_bases(count: int, rows: int = 20, cols: int = 20, extent: float = 200.0,
                seed: int = 0, amplitude: float = 40.0) -> list:
    """Base "expressions" for interpolation: the sheet bent by random mode mixtures."""
    rng = np.random.default_rng(seed)
    base = sheet_grid(rows, cols, extent)
    modes = sheet_modes(rows, cols, extent)
    out = []
    for _ in range(count):
        s = base.copy()
        s[2] = amplitude * rng.uniform(-1.0, 1.0, 3) @ modes
        out.append(_centred(s))
    return out


def expression_bases(count: int, rows: int = 20, cols: int = 20, extent: float = 200.0,
                     seed: int = 0, intensity=(10.0, 60.0), secondary: float = 0.0) -> list:
    """Bases sharing one bending pattern at distinct intensities, in shuffled timeline order.

    Each base is ``a_k * dominant + secondary * random mode mix``; with
    ``secondary = 0`` shapes of equal norm are identical, so the norm order
    of interpolated states follows their geometry (a recurring-state
    sequence in the strict sense).
    """
    if count < 2:
        raise InvalidInput("need at least two bases")
    rng = np.random.default_rng(seed)
    base = sheet_grid(rows, cols, extent)
    modes = sheet_modes(rows, cols, extent)
    dominant = np.array([1.0, 0.6, 0.3]) @ modes
    amps = rng.permutation(np.linspace(intensity[0], intensity[1], count))
    out = []
    for a in amps:
        s = base.copy()
        s[2] = a * dominant + secondary * (rng.uniform(-1.0, 1.0, 3) @ modes)
        out.append(_centred(s))
    return out


def rotation_schedule(name, frames: int) -> list:
    """Per-frame rotations for schedule ``"a"``, ``"b"`` or ``"identity"``."""
    t = np.arange(frames) / max(frames - 1, 1)
    if name == "a":
        yaw = np.deg2rad(30.0) * np.sin(2.0 * np.pi * 4.0 * t)
        tilt = np.deg2rad(10.0)
        return [rotation_about("x", tilt) @ rotation_about("y", a) for a in yaw]
    if name == "b":
        yaw = np.deg2rad(30.0) * np.sin(2.0 * np.pi * 2.0 * t)
        pitch = np.deg2rad(20.0) * np.sin(2.0 * np.pi * 3.0 * t + 0.5)
        return [rotation_about("x", p) @ rotation_about("y", a) for a, p in zip(yaw, pitch)]
    if name == "identity":
        return [np.eye(3) for _ in range(frames)]
    raise InvalidInput(f"unknown rotation schedule {name!r}")


def interpolate_bases(bases, frames: int):
    """Piecewise-linear timeline through ``bases``; returns ``(F, 3, N)`` and nearest base ids."""
    b = len(bases)
    u = np.arange(frames) * (b - 1) / max(frames - 1, 1)
    lo = np.minimum(np.floor(u).astype(int), b - 2)
    frac = u - lo
    stack = np.stack(bases)
    shapes = (1.0 - frac)[:, None, None] * stack[lo] + frac[:, None, None] * stack[lo + 1]
    return shapes, np.rint(u).astype(int)


def generate_scene(config: SceneConfig | None = None, **overrides) -> SyntheticScene:
    """Build ground-truth shapes, poses and clean orthographic tracks."""
    config = config or SceneConfig()
    for k, v in overrides.items():
        if not hasattr(config, k):
            raise InvalidInput(f"unknown scene option {k!r}")
        setattr(config, k, v)
    frames = int(config.frames)
    if frames < 1:
        raise InvalidInput("frames must be >= 1")
    rng = np.random.default_rng(config.seed)

    if config.base_shapes is not None:
        bases = [np.asarray(b, dtype=float) for b in config.base_shapes]
        if len(bases) < 2:
            raise InvalidInput("need at least two base shapes")
        if any(b.ndim != 2 or b.shape[0] != 3 for b in bases):
            raise InvalidInput("base shapes must be 3 x N")
        if len({b.shape[1] for b in bases}) != 1:
            raise InvalidInput("base shapes have different point counts")
        shapes, ids = interpolate_bases(bases, frames)
        grid = None
    else:
        rows, cols = config.grid
        amps = np.asarray(config.amplitudes, dtype=float) * rng.uniform(0.8, 1.2, len(config.amplitudes))
        shapes = deforming_sheet(frames, rows, cols, config.extent, amps)
        ids = np.arange(frames)
        grid = (rows, cols)

    sched = config.rotation_schedule
    rots = rotation_schedule(sched, frames) if isinstance(sched, str) else [np.asarray(r, dtype=float) for r in sched]
    if len(rots) != frames:
        raise InvalidInput(f"rotation schedule has {len(rots)} entries for {frames} frames")
    poses = [CameraPose(r) for r in rots]
    w = np.vstack([np.asarray(p)[:2] @ s for p, s in zip(poses, shapes)])
    return SyntheticScene(
        gt_shapes=ShapeSequence(shapes.reshape(3 * frames, -1)),
        gt_poses=poses,
        gt_state_ids=ids,
        w_clean=MeasurementMatrix(w),
        seed=config.seed,
        grid_shape=grid,
    )


def perturb_tracks(w, magnitude: float, seed: int = 0) -> MeasurementMatrix:
    """Add independent uniform noise in ``[-magnitude, magnitude]`` to every entry."""
    if magnitude < 0:
        raise InvalidInput("magnitude must be >= 0")
    data = np.asarray(w, dtype=float)
    if magnitude == 0:
        return MeasurementMatrix(data.copy())
    rng = np.random.default_rng(seed)
    return MeasurementMatrix(data + rng.uniform(-magnitude, magnitude, data.shape))


def knockout_tracks(w, ratio: float, fill: str = "frozen_reference", seed: int = 0):
    """Corrupt ``round(ratio * F * N)`` point-frame pairs.

    ``frozen_reference`` repeats the point's first-frame position (a stuck
    tracker); ``zeros`` writes zeros. Returns ``(tracks, mask)`` where
    ``mask`` is ``F x N`` boolean; the mask is for evaluation only.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInput("ratio must lie in [0, 1]")
    if fill not in ("frozen_reference", "zeros"):
        raise InvalidInput(f"unknown fill policy {fill!r}")
    data = np.array(w, dtype=float)
    n_frames, n_points = data.shape[0] // 2, data.shape[1]
    total = n_frames * n_points
    count = int(round(ratio * total))
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=count, replace=False)
    mask = np.zeros(total, dtype=bool)
    mask[picks] = True
    mask = mask.reshape(n_frames, n_points)
    frames = data.reshape(n_frames, 2, n_points)
    if fill == "frozen_reference":
        ref = np.broadcast_to(frames[:1], frames.shape)
        frames[:] = np.where(mask[:, None, :], ref, frames)
    else:
        frames[:] = np.where(mask[:, None, :], 0.0, frames)
    return MeasurementMatrix(frames.reshape(2 * n_frames, n_points)), mask
