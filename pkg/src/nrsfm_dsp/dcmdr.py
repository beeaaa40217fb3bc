"""Batch dense NRSfM: fit, temporal, trajectory-linking and coefficient-smoothness terms.

The energy is

    alpha * E_fit + beta * E_temp + lambda_link * E_linking + rho * E_reg

with every term a sum of per-element robust penalties (Huber by default).
For fixed poses all residuals are linear in ``(S, A)``, so each Gauss-Newton
step is a reweighted linear least-squares problem; it separates per point
except for ``E_reg``, which is handled by eliminating each point's shape
block and solving the coupled coefficient system with preconditioned
conjugate gradients. Poses are
refreshed once per outer iteration with the closed-form orthographic update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, NumericalFailure
from .geomcore import (
    CameraPose,
    MeasurementMatrix,
    RobustNormConfig,
    ShapeSequence,
    as_rotation,
)
from .posefit import update_pose
from .rigidinit import center_measurements, rigid_factorize

logger = logging.getLogger(__name__)

TERMS = ("fit", "temp", "linking", "reg")


@dataclass(frozen=True)
class TrajectoryBasis:
    """DCT trajectory atoms ``theta`` of shape ``F x K``."""

    theta: np.ndarray

    @property
    def frames(self) -> int:
        return self.theta.shape[0]

    @property
    def rank(self) -> int:
        return self.theta.shape[1]

    def expand(self, a):
        """``(Theta kron I_3) A`` for ``A`` of shape ``3K x N``; returns ``3F x N``."""
        a = np.asarray(a, dtype=float)
        k3 = a.shape[0]
        coeffs = a.reshape(k3 // 3, 3, -1)
        return np.einsum("fk,kcn->fcn", self.theta, coeffs).reshape(3 * self.frames, -1)

    def fit(self, s):
        """Least-squares coefficients ``A`` (``3K x N``) for a ``3F x N`` sequence."""
        s = np.asarray(s, dtype=float).reshape(self.frames, 3, -1)
        gram = self.theta.T @ self.theta
        a = np.linalg.solve(gram, np.einsum("fk,fcn->kcn", self.theta, s).reshape(self.rank, -1))
        return a.reshape(3 * self.rank, -1)


def make_dct_basis(frames: int, rank: int) -> TrajectoryBasis:
    """``theta[t, k] = sigma_k / sqrt(2) * cos(pi / (2F) * (2t - 1) * (k - 1))``, 1-based t, k."""
    if frames < 1 or rank < 1 or rank > frames:
        raise InvalidInput(f"need 1 <= K <= F, got F={frames}, K={rank}")
    t = np.arange(1, frames + 1)[:, None]
    k = np.arange(1, rank + 1)[None, :]
    sigma = np.where(k == 1, 1.0, math.sqrt(2.0))
    theta = sigma / math.sqrt(2.0) * np.cos(np.pi / (2 * frames) * (2 * t - 1) * (k - 1))
    return TrajectoryBasis(theta)


@dataclass(frozen=True)
class AdjacencyTable:
    """Symmetric neighbour lists; ``edges`` holds each undirected edge once as ``(i, j)``, ``i < j``."""

    neighbors: tuple
    edges: np.ndarray

    @property
    def points(self) -> int:
        return len(self.neighbors)

    @classmethod
    def from_edges(cls, n_points: int, edges):
        pairs = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < n_points and 0 <= j < n_points):
                raise InvalidInput(f"edge ({i}, {j}) references a missing point")
            if i == j:
                continue
            pairs.add((min(i, j), max(i, j)))
        ordered = sorted(pairs)
        nbrs = [[] for _ in range(n_points)]
        for i, j in ordered:
            nbrs[i].append(j)
            nbrs[j].append(i)
        arr = np.array(ordered, dtype=np.int64).reshape(-1, 2)
        return cls(tuple(tuple(sorted(x)) for x in nbrs), arr)

    @classmethod
    def empty(cls, n_points: int):
        return cls.from_edges(n_points, [])


def build_adjacency(reference_grid, connectivity="grid4") -> AdjacencyTable:
    """Neighbour table from the reference-frame layout of the points.

    ``reference_grid`` is either a ``(rows, cols)`` tuple (points numbered
    row-major) or a 2-D integer array of point ids laid out on the grid,
    with ``-1`` marking holes. ``connectivity`` is ``"grid4"`` or an
    explicit edge list; for an edge list ``reference_grid`` is the point
    count.
    """
    if not isinstance(connectivity, str):
        return AdjacencyTable.from_edges(int(reference_grid), connectivity)
    if connectivity != "grid4":
        raise InvalidInput(f"unknown connectivity {connectivity!r}")
    if isinstance(reference_grid, tuple) and len(reference_grid) == 2:
        rows, cols = reference_grid
        ids = np.arange(rows * cols).reshape(rows, cols)
    else:
        ids = np.asarray(reference_grid, dtype=np.int64)
        if ids.ndim != 2:
            raise InvalidInput("reference grid must be a 2-D array of point ids")
    valid = ids[ids >= 0]
    if np.unique(valid).size != valid.size:
        raise InvalidInput("duplicate point ids in reference grid")
    n_points = int(valid.max()) + 1 if valid.size else 0
    if valid.size != n_points:
        raise InvalidInput("reference grid does not cover every point id")
    edges = []
    for a, b in ((ids[:, :-1], ids[:, 1:]), (ids[:-1, :], ids[1:, :])):
        mask = (a >= 0) & (b >= 0)
        edges.extend(zip(a[mask].tolist(), b[mask].tolist()))
    return AdjacencyTable.from_edges(n_points, edges)


@dataclass(frozen=True)
class DcmdrWeights:
    alpha: float = 1.0
    beta: float = 0.1
    lambda_link: float = 1.0
    rho: float = 1.0
    huber_epsilon: float = 0.1
    norm_mode: str = "huber"

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_link", "rho"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidInput(f"{name} must be finite and >= 0")
        if not self.alpha > 0:
            raise InvalidInput("alpha must be > 0")

    @property
    def norm(self) -> RobustNormConfig:
        return RobustNormConfig(self.huber_epsilon, self.norm_mode)

    def scaled(self, factor: float) -> "DcmdrWeights":
        return DcmdrWeights(self.alpha * factor, self.beta * factor,
                            self.lambda_link * factor, self.rho * factor,
                            self.huber_epsilon, self.norm_mode)


def default_rank(frames: int) -> int:
    return max(1, min(math.ceil(0.1 * frames), 32, frames))


@dataclass
class DcmdrConfig:
    rank: int | None = None
    weights: DcmdrWeights = field(default_factory=DcmdrWeights)
    max_iterations: int = 50
    rel_tol: float = 1e-6
    cg_tol: float = 1e-8
    cg_max_iter: int = 200
    initial_damping: float = 1e-3
    max_backtracks: int = 12
    chunk_points: int = 1024


@dataclass
class DcmdrResult:
    shapes: ShapeSequence
    poses: list
    coefficients: np.ndarray
    trace: list
    basis: TrajectoryBasis
    translations: np.ndarray


# -- energy ------------------------------------------------------------------


def _unpack(w, s, poses, a, basis, adj):
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if w.ndim != 2 or w.shape[0] % 2:
        raise InvalidInput("measurements must be 2F x N")
    n_frames, n_points = w.shape[0] // 2, w.shape[1]
    if s.shape != (3 * n_frames, n_points):
        raise InvalidInput(f"shape sequence {s.shape} does not match measurements {w.shape}")
    if len(poses) != n_frames:
        raise InvalidInput(f"{len(poses)} poses for {n_frames} frames")
    if basis.frames != n_frames:
        raise InvalidInput(f"basis has {basis.frames} frames, expected {n_frames}")
    if a.shape != (3 * basis.rank, n_points):
        raise InvalidInput(f"coefficients {a.shape} do not match 3K x N = {(3 * basis.rank, n_points)}")
    if adj.points != n_points:
        raise InvalidInput(f"adjacency covers {adj.points} points, expected {n_points}")
    rots = np.stack([as_rotation(p) for p in poses])
    return (w.reshape(n_frames, 2, n_points), s.reshape(n_frames, 3, n_points),
            rots, a.reshape(basis.rank, 3, n_points))


def _residuals(w3, s3, rots, a3, theta, edges):
    fit = w3 - np.einsum("frc,fcn->frn", rots[:, :2], s3)
    temp = s3[1:] - s3[:-1]
    link = s3 - np.einsum("fk,kcn->fcn", theta, a3)
    reg = a3[:, :, edges[:, 1]] - a3[:, :, edges[:, 0]]
    return {"fit": fit, "temp": temp, "linking": link, "reg": reg}


def _term_values(res, norm):
    return {k: norm.loss(v) if v.size else 0.0 for k, v in res.items()}


def _total(terms, weights):
    return (weights.alpha * terms["fit"] + weights.beta * terms["temp"]
            + weights.lambda_link * terms["linking"] + weights.rho * terms["reg"])


def dcmdr_energy(w, s, poses, a, basis, adj, weights=DcmdrWeights()):
    """Return ``(total, {"fit", "temp", "linking", "reg"})`` (unweighted terms)."""
    w3, s3, rots, a3 = _unpack(w, s, poses, a, basis, adj)
    terms = _term_values(_residuals(w3, s3, rots, a3, basis.theta, adj.edges), weights.norm)
    return _total(terms, weights), terms


def dcmdr_gradients(w, s, poses, a, basis, adj, weights=DcmdrWeights()):
    """Analytic gradients of each unweighted term.

    Returns ``{term: {"S": 3F x N, "A": 3K x N, "R": F x 3 x 3}}`` where the
    pose gradient treats each rotation as an unconstrained 3x3 matrix.
    """
    w3, s3, rots, a3 = _unpack(w, s, poses, a, basis, adj)
    res = _residuals(w3, s3, rots, a3, basis.theta, adj.edges)
    psi = {k: weights.norm.derivative(v) for k, v in res.items()}
    f, n = s3.shape[0], s3.shape[2]
    out = {t: {"S": np.zeros_like(s3), "A": np.zeros_like(a3), "R": np.zeros_like(rots)} for t in TERMS}

    out["fit"]["S"] = -np.einsum("frc,frn->fcn", rots[:, :2], psi["fit"])
    out["fit"]["R"][:, :2] = -np.einsum("frn,fcn->frc", psi["fit"], s3)

    out["temp"]["S"][1:] += psi["temp"]
    out["temp"]["S"][:-1] -= psi["temp"]

    out["linking"]["S"] = psi["linking"].copy()
    out["linking"]["A"] = -np.einsum("fk,fcn->kcn", basis.theta, psi["linking"])

    e = adj.edges
    ga = np.zeros_like(a3)
    np.add.at(ga, (slice(None), slice(None), e[:, 1]), psi["reg"])
    np.subtract.at(ga, (slice(None), slice(None), e[:, 0]), psi["reg"])
    out["reg"]["A"] = ga

    for t in TERMS:
        out[t]["S"] = out[t]["S"].reshape(3 * f, n)
        out[t]["A"] = out[t]["A"].reshape(-1, n)
    return out


# -- solver ------------------------------------------------------------------


class _NormalEquations:
    """Per-point reweighted normal equations for fixed poses.

    Variables per point: ``3F`` shape entries (index ``3f + c``) followed by
    ``3K`` coefficients (index ``3F + 3k + c``).
    """

    def __init__(self, w3, s3, rots, a3, theta, adj, weights):
        self.f, _, self.n = s3.shape
        self.k = theta.shape[1]
        self.theta = theta
        self.adj = adj
        self.weights = weights
        norm = weights.norm
        res = _residuals(w3, s3, rots, a3, theta, adj.edges)
        self.om = {key: norm.weights(v) for key, v in res.items()}
        self.w3 = w3
        self.p = rots[:, :2]
        # per-point accumulated reg weights and neighbour sums are rebuilt per sweep
        e = adj.edges
        self.reg_diag = np.zeros((self.k, 3, self.n))
        np.add.at(self.reg_diag, (slice(None), slice(None), e[:, 0]), self.om["reg"])
        np.add.at(self.reg_diag, (slice(None), slice(None), e[:, 1]), self.om["reg"])

    @property
    def size(self):
        return 3 * self.f + 3 * self.k

    def laplacian(self, a3):
        """Weighted graph Laplacian of the coefficient channels: ``sum_m w_nm (a_n - a_m)``."""
        e = self.adj.edges
        diff = self.om["reg"] * (a3[:, :, e[:, 1]] - a3[:, :, e[:, 0]])
        out = np.zeros_like(a3)
        np.add.at(out, (slice(None), slice(None), e[:, 1]), diff)
        np.subtract.at(out, (slice(None), slice(None), e[:, 0]), diff)
        return out

    def assemble(self, idx):
        """Per-point Hessian blocks ``(len(idx), D, D)`` and right-hand sides, without ``E_reg``."""
        f, k, th = self.f, self.k, self.theta
        wt = self.weights
        m = len(idx)
        d = self.size
        h = np.zeros((m, d, d))
        b = np.zeros((m, d))

        # fit: alpha * P^T diag(omega) P per frame
        om = self.om["fit"][:, :, idx]                       # F,2,m
        blk = wt.alpha * np.einsum("frn,fri,frj->nfij", om, self.p, self.p)
        rhs = wt.alpha * np.einsum("frn,fri,frn->nfi", om, self.p, self.w3[:, :, idx])
        for fr in range(f):
            sl = slice(3 * fr, 3 * fr + 3)
            h[:, sl, sl] += blk[:, fr]
        b[:, :3 * f] += rhs.reshape(m, 3 * f)

        diag = np.zeros((m, d))
        # temporal: beta * omega on first differences
        if f > 1 and wt.beta > 0:
            ot = wt.beta * np.moveaxis(self.om["temp"][:, :, idx], -1, 0).reshape(m, -1)  # m, 3(F-1)
            diag[:, 3:3 * f] += ot
            diag[:, :3 * f - 3] += ot
            r = np.arange(3 * f - 3)
            h[:, r + 3, r] -= ot
            h[:, r, r + 3] -= ot

        # linking: lambda * omega (s - theta a)
        if wt.lambda_link > 0:
            ol = wt.lambda_link * np.moveaxis(self.om["linking"][:, :, idx], -1, 0)  # m,F,3
            diag[:, :3 * f] += ol.reshape(m, -1)
            cross = -np.einsum("nfc,fk->nfck", ol, th)        # m,F,3,K
            haa = np.einsum("nfc,fk,fl->nkcl", ol, th, th)    # m,K,3,K
            for c in range(3):
                rows = 3 * np.arange(f) + c
                cols = 3 * f + 3 * np.arange(k) + c
                h[:, rows[:, None], cols[None, :]] += cross[:, :, c, :]
                h[:, cols[:, None], rows[None, :]] += np.swapaxes(cross[:, :, c, :], 1, 2)
                h[:, cols[:, None], cols[None, :]] += haa[:, :, c, :]

        ii = np.arange(d)
        h[:, ii, ii] += diag
        return h, b


def _cg(apply, precond, rhs, x0, tol, max_iter):
    """Preconditioned conjugate gradients on flattened per-point vectors."""
    x = x0.copy()
    r = rhs - apply(x)
    z = precond(r)
    p = z.copy()
    rz = np.vdot(r, z)
    stop = tol * max(np.linalg.norm(rhs), 1e-300)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= stop:
            break
        hp = apply(p)
        alpha = rz / np.vdot(p, hp)
        x += alpha * p
        r -= alpha * hp
        z = precond(r)
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def _solve_step(w3, s3, rots, a3, theta, adj, weights, damping, config):
    """One damped reweighted least-squares step in ``(S, A)`` for fixed poses.

    Each point's shape block is eliminated by a Schur complement; the
    coefficient system, coupled across points only by ``E_reg``, is solved
    by conjugate gradients preconditioned with per-point block inverses.
    """
    ne = _NormalEquations(w3, s3, rots, a3, theta, adj, weights)
    f, n, k = ne.f, ne.n, ne.k
    fs, ka = 3 * f, 3 * k
    s_old = np.moveaxis(s3, -1, 0).reshape(n, fs)
    a_old = np.moveaxis(a3, -1, 0).reshape(n, ka)
    x_old = np.concatenate([s_old, a_old], axis=1)

    schur = np.empty((n, ka, ka))
    red = np.empty((n, ka))
    elim = np.empty((n, fs, ka + 1))
    for start in range(0, n, config.chunk_points):
        idx = np.arange(start, min(n, start + config.chunk_points))
        h, b = ne.assemble(idx)
        hd = np.diagonal(h, axis1=1, axis2=2).copy()
        floor = 1e-9 * max(float(np.mean(hd)), 1e-12)
        dd = damping * hd + floor
        ii = np.arange(ne.size)
        h[:, ii, ii] += dd
        b += dd * x_old[idx]
        hss, hsa, haa = h[:, :fs, :fs], h[:, :fs, fs:], h[:, fs:, fs:]
        x = np.linalg.solve(hss, np.concatenate([hsa, b[:, :fs, None]], axis=2))
        elim[idx] = x
        schur[idx] = haa - np.einsum("nsi,nsj->nij", hsa, x[:, :, :ka])
        red[idx] = b[:, fs:] - np.einsum("nsi,ns->ni", hsa, x[:, :, ka])

    if weights.rho > 0 and adj.edges.size:
        reg_diag = weights.rho * np.moveaxis(ne.reg_diag, -1, 0).reshape(n, ka)
        block = schur.copy()
        block[:, np.arange(ka), np.arange(ka)] += reg_diag
        pinv = np.linalg.inv(block)

        def apply(v):
            a_v = np.moveaxis(v.reshape(n, k, 3), 0, -1)
            lap = np.moveaxis(ne.laplacian(a_v), -1, 0).reshape(n, ka)
            return np.einsum("nij,nj->ni", schur, v) + weights.rho * lap

        def precond(v):
            return np.einsum("nij,nj->ni", pinv, v)

        a_new = _cg(apply, precond, red, a_old, config.cg_tol, config.cg_max_iter)
    else:
        a_new = np.linalg.solve(schur, red[:, :, None])[:, :, 0]

    s_new = elim[:, :, ka] - np.einsum("nsi,ni->ns", elim[:, :, :ka], a_new)
    return (np.moveaxis(s_new.reshape(n, f, 3), 0, -1),
            np.moveaxis(a_new.reshape(n, k, 3), 0, -1))


def _pose_refresh(w3, s3, rots, weights):
    """Per-frame closed-form pose update, kept only where the fit term drops."""
    norm = weights.norm
    out = rots.copy()
    for fr in range(s3.shape[0]):
        r = w3[fr] - rots[fr, :2] @ s3[fr]
        om = norm.weights(r).mean(axis=0)
        try:
            cand = np.asarray(update_pose(w3[fr], s3[fr], om))
        except Exception:  # degenerate frame: keep the current pose
            continue
        if norm.loss(w3[fr] - cand[:2] @ s3[fr]) < norm.loss(r):
            out[fr] = cand
    return out


def dcmdr_reconstruct(w, adj, config: DcmdrConfig | None = None) -> DcmdrResult:
    """Batch reconstruction seeded by the rigid factorisation.

    Measurements are centred per frame; the removed centroids are returned
    in ``translations``. The energy trace starts with the initial energy and
    has one entry per accepted iteration; it never increases.
    """
    config = config or DcmdrConfig()
    w = w if isinstance(w, MeasurementMatrix) else MeasurementMatrix(w)
    n_frames, n_points = w.frames, w.points
    if adj.points != n_points:
        raise InvalidInput(f"adjacency covers {adj.points} points, expected {n_points}")
    rank = config.rank or default_rank(n_frames)
    basis = make_dct_basis(n_frames, rank)
    weights = config.weights

    init = rigid_factorize(w)
    centred, centroids = center_measurements(w.data)
    w3 = centred.reshape(n_frames, 2, n_points)
    rots = np.stack([np.asarray(p) for p in init.poses])
    s3 = np.repeat(init.rest_shape[None], n_frames, axis=0)
    a3 = basis.fit(s3.reshape(3 * n_frames, n_points)).reshape(rank, 3, n_points)
    theta, edges = basis.theta, adj.edges

    def energy(s_, r_, a_):
        e = _total(_term_values(_residuals(w3, s_, r_, a_, theta, edges), weights.norm), weights)
        if not math.isfinite(e):
            raise NumericalFailure("energy became non-finite")
        return e

    current = energy(s3, rots, a3)
    trace = [current]
    damping = config.initial_damping
    for it in range(config.max_iterations):
        accepted = False
        for _ in range(config.max_backtracks):
            s_new, a_new = _solve_step(w3, s3, rots, a3, theta, adj, weights, damping, config)
            if not (np.all(np.isfinite(s_new)) and np.all(np.isfinite(a_new))):
                damping *= 10.0
                continue
            cand = energy(s_new, rots, a_new)
            if cand <= current:
                accepted = True
                damping = max(damping / 2.0, 1e-12)
                break
            damping *= 10.0
        if not accepted:
            logger.debug("iteration %d: no descent step found, stopping", it)
            break
        s3, a3 = s_new, a_new
        rots = _pose_refresh(w3, s3, rots, weights)
        new = energy(s3, rots, a3)
        rel = (current - new) / max(abs(current), 1e-300)
        current = new
        trace.append(current)
        logger.debug("iteration %d: energy %.6g (rel %.3g, damping %.1e)", it, current, rel, damping)
        if rel < config.rel_tol:
            break

    return DcmdrResult(
        shapes=ShapeSequence(s3.reshape(3 * n_frames, n_points)),
        poses=[CameraPose(r) for r in rots],
        coefficients=a3.reshape(3 * rank, n_points),
        trace=trace,
        basis=basis,
        translations=centroids,
    )
