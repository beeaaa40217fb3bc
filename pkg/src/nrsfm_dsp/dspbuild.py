"""Distil a reconstructed sequence into a Dynamic Shape Prior (DSP).

States are keyed by Frobenius norm, sorted, and thinned greedily so that
consecutive retained norms differ by more than ``mu``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .geomcore import ShapeSequence, as_rotation


@dataclass(frozen=True)
class DynamicShapePrior:
    """Norm-ordered canonical states.

    ``states`` is ``(Q, 3, N)``; ``norms`` strictly increase; ``source_ids``
    holds the input index of each retained state (``-1`` when unknown, e.g.
    after loading a file that does not store it).
    """

    states: np.ndarray
    norms: np.ndarray
    source_ids: np.ndarray
    mu: float

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[1] != 3 or states.shape[0] < 1:
            raise InvalidInput(f"DSP states must be (Q, 3, N) with Q >= 1, got {states.shape}")
        norms = np.asarray(self.norms, dtype=float)
        if norms.shape != (states.shape[0],):
            raise InvalidInput("one norm per state required")
        ids = np.asarray(self.source_ids, dtype=np.int64)
        if ids.shape != norms.shape:
            raise InvalidInput("one source id per state required")
        for name, arr in (("states", states), ("norms", norms), ("source_ids", ids)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def points(self) -> int:
        return self.states.shape[2]

    def __len__(self):
        return self.size

    @classmethod
    def from_states(cls, states, mu: float = float("nan"), source_ids=None):
        """Wrap already ordered states without thinning; norms are recomputed."""
        states = np.asarray(states, dtype=float)
        norms = np.sqrt(np.einsum("qij,qij->q", states, states))
        ids = np.full(len(states), -1) if source_ids is None else source_ids
        return cls(states, norms, ids, mu)


def _frames(s):
    data = np.asarray(s, dtype=float)
    if data.ndim == 3:
        return data
    if data.ndim != 2 or data.shape[0] % 3:
        raise InvalidInput(f"expected 3F x N shapes, got {data.shape}")
    return data.reshape(data.shape[0] // 3, 3, data.shape[1])


def canonicalize_states(s, poses=None, global_rotation=None) -> list:
    """Per-frame shapes in the solver's reference frame.

    The per-frame poses are discarded (they only matter for their count).
    With ``global_rotation`` every state is pre-multiplied by that rotation.
    """
    frames = _frames(s.data if isinstance(s, ShapeSequence) else s)
    if poses is not None and len(poses) != len(frames):
        raise InvalidInput(f"{len(poses)} poses for {len(frames)} frames")
    if global_rotation is None:
        return [f.copy() for f in frames]
    g = as_rotation(global_rotation)
    return [g @ f for f in frames]


def build_dsp(states, mu: float) -> DynamicShapePrior:
    """Sort by Frobenius norm (ties by input order) and keep gaps strictly above ``mu``."""
    if not mu >= 0:
        raise InvalidInput("mu must be >= 0")
    stack = _frames(states) if not isinstance(states, list) else (
        np.stack([np.asarray(x, dtype=float) for x in states]) if states else np.empty((0, 3, 0)))
    if len(stack) == 0:
        raise InvalidInput("no states to build a prior from")
    if not np.all(np.isfinite(stack)):
        raise InvalidInput("states contain non-finite entries")
    norms = np.sqrt(np.einsum("lij,lij->l", stack, stack))
    order = np.argsort(norms, kind="stable")
    kept = [order[0]]
    for idx in order[1:]:
        if norms[idx] - norms[kept[-1]] > mu:
            kept.append(idx)
    kept = np.asarray(kept)
    return DynamicShapePrior(stack[kept].copy(), norms[kept], kept, float(mu))


def dsp_cardinality_curve(states, mu_grid) -> list:
    """``[(mu, Q), ...]`` along an ascending grid of thresholds."""
    grid = [float(m) for m in mu_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise InvalidInput("mu grid must be sorted ascending")
    return [(m, build_dsp(states, m).size) for m in grid]
