"""Sequential reconstruction against a Dynamic Shape Prior, and the DSPC codec.

Each frame alternates a discrete multi-start descent over the norm-ordered
DSP index (pose fixed) with the closed-form orthographic pose update (state
fixed). The energy is

    alpha * ||W_f - I_2x3 R_f D_i||_F + beta * ||D_i - S_{f-1}||_F

with un-squared Frobenius norms; the one-hot indicator makes the
cardinality penalty vanish.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .dspbuild import DynamicShapePrior
from .errors import CorruptStream, DegenerateGeometry, IdWidthOverflow, InvalidInput
from .formats import decode, encode_dsp
from .geomcore import (
    CameraPose,
    MeasurementMatrix,
    ShapeSequence,
    as_rotation,
    axis_angle_to_rotation,
    rotation_to_axis_angle,
)
from .posefit import update_pose

__all__ = [
    "CompressedStream", "DspIndicator", "DsprConfig", "DsprWeights", "FrameResult",
    "compress", "decompress", "dspr_energy", "dspr_frame", "dspr_sequence",
    "msgd_select", "update_pose",
]

logger = logging.getLogger(__name__)

CODEC_MAGIC = b"DSPC"
CODEC_VERSION = 1
_CODEC_HEADER = struct.Struct("<4sBBIII")


@dataclass(frozen=True)
class DsprWeights:
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidInput(f"{name} must be finite and >= 0")
        if not self.alpha > 0:
            raise InvalidInput("alpha must be > 0")


@dataclass(frozen=True)
class DspIndicator:
    """One-hot selection over ``size`` DSP states."""

    index: int
    size: int

    def __post_init__(self):
        if not 0 <= self.index < self.size:
            raise InvalidInput(f"indicator index {self.index} outside [0, {self.size})")

    @property
    def vector(self) -> np.ndarray:
        v = np.zeros(self.size)
        v[self.index] = 1.0
        return v

    def penalty(self, gamma: float) -> float:
        """``gamma * (||lambda||_0 - 1)^2``; zero by construction."""
        return gamma * float(np.count_nonzero(self.vector) - 1) ** 2


@dataclass
class DsprConfig:
    weights: DsprWeights = field(default_factory=DsprWeights)
    seeds: int = 20
    max_alternations: int = 50
    rel_tol: float = 1e-8
    center: bool = True
    refit_pose: bool = True


@dataclass(frozen=True)
class FrameResult:
    index: int
    pose: CameraPose
    shape: np.ndarray
    energy: float
    iterations: int
    seed_trace: tuple
    trace: tuple = ()
    low_confidence: bool = False
    seconds: float = 0.0


def _check(w_f, state, s_prev=None):
    w_f = np.asarray(w_f, dtype=float)
    state = np.asarray(state, dtype=float)
    if w_f.ndim != 2 or w_f.shape[0] != 2:
        raise InvalidInput(f"W_f must be 2 x N, got {w_f.shape}")
    if state.shape != (3, w_f.shape[1]):
        raise InvalidInput(f"state {state.shape} does not match W_f {w_f.shape}")
    if s_prev is not None and np.shape(s_prev) != state.shape:
        raise InvalidInput(f"previous shape {np.shape(s_prev)} does not match state {state.shape}")
    return w_f, state


def dspr_energy(w_f, state, pose, s_prev, weights: DsprWeights = DsprWeights()) -> float:
    w_f, state = _check(w_f, state, s_prev)
    r = as_rotation(pose)
    data = np.linalg.norm(w_f - r[:2] @ state)
    temp = np.linalg.norm(state - np.asarray(s_prev, dtype=float)) if weights.beta else 0.0
    return float(weights.alpha * data + weights.beta * temp)


class _Energies:
    """Memoised per-index energies for one (W_f, pose, s_prev).

    With ``refit`` each index is scored at the better of the given pose and
    its own closed-form pose; ``poses`` records the pose behind each score.
    """

    def __init__(self, w_f, pose, dsp, s_prev, weights, refit=False):
        self.w_f = w_f
        self.r = as_rotation(pose)
        self.states = dsp.states
        self.s_prev = None if s_prev is None else np.asarray(s_prev, dtype=float)
        self.weights = weights
        self.refit = refit
        self.cache = {}
        self.poses = {}

    def _data(self, r, d):
        return self.weights.alpha * float(np.linalg.norm(self.w_f - r[:2] @ d))

    def __call__(self, i):
        e = self.cache.get(i)
        if e is None:
            d = self.states[i]
            e, r = self._data(self.r, d), self.r
            if self.refit:
                try:
                    cand = np.asarray(update_pose(self.w_f, d))
                except DegenerateGeometry:
                    cand = None
                if cand is not None:
                    ec = self._data(cand, d)
                    if ec < e:
                        e, r = ec, cand
            if self.weights.beta and self.s_prev is not None:
                e += self.weights.beta * float(np.linalg.norm(d - self.s_prev))
            self.cache[i] = e
            self.poses[i] = r
        return e


def seed_indices(size: int, seeds: int) -> list:
    """Evenly spaced start indices ``round(j (Q-1) / (seeds-1))``."""
    seeds = min(seeds, size)
    if seeds == 1:
        return [0]
    return [int(math.floor(j * (size - 1) / (seeds - 1) + 0.5)) for j in range(seeds)]


def _descend(i, energy, size):
    e = energy(i)
    while True:
        best, best_e = i, e
        for j in (i - 1, i + 1):
            if 0 <= j < size and energy(j) < best_e:
                best, best_e = j, energy(j)
        if best == i:
            return i, e
        i, e = best, best_e


def msgd_select(w_f, pose, dsp: DynamicShapePrior, s_prev, weights: DsprWeights = DsprWeights(),
                seeds: int = 20, refit_pose: bool = False, _energies=None):
    """Best local minimum of the index energy over evenly seeded discrete descents.

    Returns ``(index, energy, seed_trace)``; ``seed_trace`` lists each seed's
    ``(index, energy)`` local minimum. Seeds beyond ``Q`` are clamped.
    Ties go to the lower index, matching an exhaustive argmin. With
    ``refit_pose`` every visited index is scored at the better of ``pose``
    and its own closed-form pose (see :func:`dspr_frame`).
    """
    if dsp.size < 1:
        raise InvalidInput("empty DSP")
    if seeds < 1:
        raise InvalidInput("need at least one seed")
    w_f = np.asarray(w_f, dtype=float)
    _check(w_f, dsp.states[0], s_prev)
    energy = _Energies(w_f, pose, dsp, s_prev, weights, refit_pose) if _energies is None else _energies
    trace = tuple(_descend(s, energy, dsp.size) for s in seed_indices(dsp.size, seeds))
    index, value = min(trace, key=lambda t: (t[1], t[0]))
    return index, value, trace


def exhaustive_select(w_f, pose, dsp, s_prev, weights: DsprWeights = DsprWeights()):
    """Plain argmin over all states (first index on ties)."""
    energy = _Energies(np.asarray(w_f, dtype=float), pose, dsp, s_prev, weights)
    values = [energy(i) for i in range(dsp.size)]
    index = int(np.argmin(values))
    return index, values[index]


def _centre(w_f):
    return w_f - w_f.mean(axis=1, keepdims=True)


def dspr_frame(w_f, dsp: DynamicShapePrior, s_prev, pose_init=None,
               config: DsprConfig | None = None) -> FrameResult:
    """Alternate index selection and pose update for one frame."""
    config = config or DsprConfig()
    started = time.perf_counter()
    w_f = np.asarray(w_f, dtype=float)
    _check(w_f, dsp.states[0], s_prev)
    if config.center:
        w_f = _centre(w_f)
    weights = config.weights
    pose = CameraPose.identity() if pose_init is None else CameraPose(as_rotation(pose_init))
    scale = float(np.max(np.abs(w_f))) if w_f.size else 0.0
    low_conf = not scale > 0 or np.linalg.matrix_rank(w_f, tol=1e-9 * max(scale, 1e-300)) < 2

    def select(p):
        table = _Energies(w_f, p, dsp, s_prev, weights, config.refit_pose)
        i, e, tr = msgd_select(w_f, p, dsp, s_prev, weights, config.seeds, _energies=table)
        return i, e, tr, CameraPose(table.poses[i])

    index, energy, seed_trace, pose = select(pose)
    trace = [energy]
    iterations = 0
    for _ in range(max(config.max_alternations, 1)):
        iterations += 1
        try:
            cand_pose = update_pose(w_f, dsp.states[index])
        except DegenerateGeometry:
            low_conf = True
            break
        cand_energy = dspr_energy(w_f, dsp.states[index], cand_pose, s_prev, weights)
        if cand_energy <= energy:
            pose, energy = cand_pose, cand_energy
        cand_index, cand_energy, cand_trace, cand_pose = select(pose)
        if cand_energy < energy:
            index, energy, seed_trace, pose = cand_index, cand_energy, cand_trace, cand_pose
        prev = trace[-1]
        trace.append(energy)
        if prev - energy <= config.rel_tol * prev:
            break
    state = dsp.states[index]
    return FrameResult(
        index=int(index),
        pose=pose,
        shape=as_rotation(pose) @ state,
        energy=dspr_energy(w_f, state, pose, s_prev, weights),
        iterations=iterations,
        seed_trace=seed_trace,
        trace=tuple(trace),
        low_confidence=bool(low_conf),
        seconds=time.perf_counter() - started,
    )


def _first_previous(w_f, dsp, center):
    """First-frame stand-in for ``S_{f-1}``: best state under the identity pose, no temporal term."""
    if center:
        w_f = _centre(w_f)
    index, _ = exhaustive_select(w_f, CameraPose.identity(), dsp, None, DsprWeights(1.0, 0.0, 0.0))
    return dsp.states[index]


def dspr_sequence(w, dsp: DynamicShapePrior, config: DsprConfig | None = None) -> list:
    """Process frames in order; each frame starts from the previous pose and state."""
    config = config or DsprConfig()
    w = w if isinstance(w, MeasurementMatrix) else MeasurementMatrix(w)
    if w.points != dsp.points:
        raise InvalidInput(f"tracks have {w.points} points, DSP has {dsp.points}")
    frames = w.data.reshape(w.frames, 2, w.points)
    s_prev = _first_previous(frames[0], dsp, config.center)
    pose = None
    out = []
    for f, w_f in enumerate(frames):
        res = dspr_frame(w_f, dsp, s_prev, pose, config)
        logger.debug("frame %d: index %d energy %.6g (%d alternations, %.3fs)",
                     f, res.index, res.energy, res.iterations, res.seconds)
        out.append(res)
        s_prev = dsp.states[res.index]
        pose = res.pose
    return out


# -- codec -------------------------------------------------------------------


@dataclass(frozen=True)
class CompressedStream:
    """DSP blob plus one ``(state id, float32 axis-angle)`` record per frame."""

    q: int
    n: int
    dsp_blob: bytes
    ids: np.ndarray
    axis_angles: np.ndarray

    @property
    def frames(self) -> int:
        return len(self.ids)

    @property
    def id_width(self) -> int:
        return id_width(self.q)

    @property
    def record_bytes(self) -> int:
        return 12 + self.id_width

    @property
    def ratio(self) -> float:
        return self.frames / self.q

    def to_bytes(self) -> bytes:
        width = self.id_width
        head = _CODEC_HEADER.pack(CODEC_MAGIC, CODEC_VERSION, width, self.q, self.n, self.frames)
        rec = np.zeros(self.frames, dtype=[("id", "<u1" if width == 1 else "<u2"), ("aa", "<f4", (3,))])
        rec["id"] = self.ids
        rec["aa"] = self.axis_angles
        return head + self.dsp_blob + rec.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CompressedStream":
        if len(buf) < _CODEC_HEADER.size:
            raise CorruptStream("stream shorter than its header")
        magic, version, width, q, n, frames = _CODEC_HEADER.unpack_from(buf)
        if magic != CODEC_MAGIC:
            raise CorruptStream(f"bad magic {magic!r}")
        if version != CODEC_VERSION:
            raise CorruptStream(f"unsupported version {version}")
        if width not in (1, 2) or width != id_width(q):
            raise CorruptStream(f"id width {width} inconsistent with Q={q}")
        kind, dsp, offset = decode(buf, _CODEC_HEADER.size)
        if kind != "DSP" or dsp.size != q or dsp.points != n:
            raise CorruptStream("embedded prior does not match the stream header")
        dtype = np.dtype([("id", "<u1" if width == 1 else "<u2"), ("aa", "<f4", (3,))])
        if len(buf) - offset != frames * dtype.itemsize:
            raise CorruptStream(f"record section has {len(buf) - offset} bytes, "
                                f"expected {frames * dtype.itemsize}")
        rec = np.frombuffer(buf, dtype=dtype, count=frames, offset=offset)
        return cls(q, n, buf[_CODEC_HEADER.size:offset], rec["id"].astype(np.int64),
                   rec["aa"].astype(np.float32))

    def prior(self) -> DynamicShapePrior:
        kind, dsp, _ = decode(self.dsp_blob)
        if kind != "DSP":
            raise CorruptStream("blob is not a DSP record")
        return dsp


def id_width(q: int) -> int:
    if q > 65535:
        raise IdWidthOverflow(f"Q={q} does not fit a two-byte state id")
    return 1 if q <= 255 else 2


def compress(w, dsp: DynamicShapePrior, config: DsprConfig | None = None, results=None):
    """Run (or reuse) sequential reconstruction and pack ids and poses.

    Returns ``(stream, results)``.
    """
    id_width(dsp.size)
    if results is None:
        results = dspr_sequence(w, dsp, config)
    ids = np.array([r.index for r in results], dtype=np.int64)
    aa = np.array([rotation_to_axis_angle(r.pose) for r in results], dtype=np.float32).reshape(-1, 3)
    return CompressedStream(dsp.size, dsp.points, encode_dsp(dsp), ids, aa), results


def decompress(stream) -> ShapeSequence:
    """Frame ``f`` is ``rotation(axis_angle_f) @ states[id_f]``."""
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = CompressedStream.from_bytes(bytes(stream))
    dsp = stream.prior()
    if np.any(stream.ids >= dsp.size) or np.any(stream.ids < 0):
        raise CorruptStream("state id outside the prior")
    frames = [axis_angle_to_rotation(aa.astype(float)) @ dsp.states[i]
              for i, aa in zip(stream.ids, stream.axis_angles)]
    if not frames:
        raise CorruptStream("stream holds no frames")
    return ShapeSequence(np.concatenate(frames))
