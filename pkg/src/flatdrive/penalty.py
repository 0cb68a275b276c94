"""Feasibility constraints as differentiable penalties.

Each constraint is written in a squared algebraic form ``g <= 0`` (no square
roots, so gradients stay bounded near the boundary), passed through a C^1
smoothed hinge, and integrated along every trajectory piece with a composite
trapezoid rule.  The total penalty and its exact gradients with respect to
every piece's coefficients and every segment duration come out of one pass.

Inter-agent clearance is evaluated on a shared global time grid (the union
of all agents' per-piece sample grids); agents that finish early are held at
their goal for late samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .flatness import SPEED_EPS, SingularSpeedError
from .trajectory import _DERIV_FACTORS, AgentTrajectory

# endpoint samples move this fraction of the piece duration inward for the
# constraint kinds that are degenerate at zero speed (gear shifts)
_END_NUDGE = 1e-3

KIND_SPEED = "speed"
KIND_ACCEL = "accel"
KIND_CURVATURE = "curvature"
KIND_OBSTACLE = "obstacle"
KIND_MUTUAL = "mutual"

# canonical evaluation order; keeps every reduction deterministic
KIND_ORDER = (KIND_SPEED, KIND_ACCEL, KIND_CURVATURE, KIND_OBSTACLE, KIND_MUTUAL)

_NUDGED_KINDS = frozenset({KIND_SPEED, KIND_CURVATURE})


@dataclass(frozen=True)
class SpeedLimit:
    v_max: float
    kind: str = field(default=KIND_SPEED, init=False)

    def __post_init__(self):
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")


@dataclass(frozen=True)
class AccelLimit:
    a_max: float
    kind: str = field(default=KIND_ACCEL, init=False)

    def __post_init__(self):
        if self.a_max <= 0:
            raise ValueError("a_max must be positive")


@dataclass(frozen=True)
class CurvatureLimit:
    kappa_max: float
    kind: str = field(default=KIND_CURVATURE, init=False)

    def __post_init__(self):
        if self.kappa_max <= 0:
            raise ValueError("kappa_max must be positive")


@dataclass(frozen=True)
class ObstacleClearance:
    """Keep a disc robot clear of circular obstacles.

    ``circles`` holds (cx, cy, radius) triples; ``robot_radius`` is the
    (possibly margin-inflated) disc radius used for planning.
    """

    circles: tuple[tuple[float, float, float], ...]
    robot_radius: float
    kind: str = field(default=KIND_OBSTACLE, init=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "circles",
            tuple((float(x), float(y), float(r)) for x, y, r in self.circles),
        )
        if self.robot_radius <= 0:
            raise ValueError("robot_radius must be positive")
        if any(r <= 0 for _, _, r in self.circles):
            raise ValueError("obstacle radii must be positive")


@dataclass(frozen=True)
class MutualClearance:
    min_separation: float
    kind: str = field(default=KIND_MUTUAL, init=False)

    def __post_init__(self):
        if self.min_separation <= 0:
            raise ValueError("min_separation must be positive")


ConstraintSpec = Union[
    SpeedLimit, AccelLimit, CurvatureLimit, ObstacleClearance, MutualClearance
]


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty weights per constraint kind plus sampling parameters."""

    weights: dict[str, float]
    a0: float = 1e-4
    samples_per_piece: int = 16

    def __post_init__(self):
        if self.a0 <= 0:
            raise ValueError("a0 must be positive")
        if self.samples_per_piece < 4:
            raise ValueError("samples_per_piece must be at least 4")
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("penalty weights must be positive")
        object.__setattr__(self, "weights", dict(self.weights))

    def with_weight(self, kind: str, weight: float) -> "PenaltyConfig":
        w = dict(self.weights)
        w[kind] = weight
        return PenaltyConfig(w, self.a0, self.samples_per_piece)


def smooth_l1(x, a0: float):
    """C^1 nonnegative hinge: 0 below zero, blends into ``x - a0/2`` past a0.

    Returns (value, derivative); both match the input's scalar/array shape.
    """
    if a0 <= 0:
        raise ValueError("a0 must be positive")
    arr = np.asarray(x, dtype=float)
    xb = np.clip(arr, 0.0, a0)  # blend branch only ever sees [0, a0]
    blend = -(xb**4) / (2 * a0**3) + xb**3 / a0**2
    blend_d = -2 * xb**3 / a0**3 + 3 * xb**2 / a0**2
    val = np.where(arr <= 0, 0.0, np.where(arr <= a0, blend, arr - a0 / 2))
    der = np.where(arr <= 0, 0.0, np.where(arr <= a0, blend_d, 1.0))
    if np.isscalar(x) or arr.ndim == 0:
        return float(val), float(der)
    return val, der


# ---------------------------------------------------------------------------
# constraint kernels, vectorized over samples
#
# each returns g (n, k) and partials w.r.t. (sigma, d1, d2), each (n, k, 2);
# k is the number of scalar rows the spec expands into (circles count for
# obstacles, 1 otherwise).
# ---------------------------------------------------------------------------


def _kernel(spec: ConstraintSpec, sigma, d1, d2, peer_sigma=None, guard_speed=False):
    n = sigma.shape[0]
    zeros = np.zeros((n, 1, 2))
    if isinstance(spec, SpeedLimit):
        g = (d1 * d1).sum(axis=1, keepdims=True) - spec.v_max**2
        return g, zeros, (2.0 * d1)[:, None, :], zeros
    if isinstance(spec, AccelLimit):
        g = (d2 * d2).sum(axis=1, keepdims=True) - spec.a_max**2
        return g, zeros, zeros, (2.0 * d2)[:, None, :]
    if isinstance(spec, CurvatureLimit):
        s2 = (d1 * d1).sum(axis=1)
        if guard_speed:
            bad = s2 < SPEED_EPS**2
            if np.any(bad):
                raise SingularSpeedError(float(np.sqrt(s2[bad][0])))
        cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        k2 = spec.kappa_max**2
        g = (cross**2 - k2 * s2**3)[:, None]
        dd1 = 2.0 * cross[:, None] * np.stack([d2[:, 1], -d2[:, 0]], axis=1)
        dd1 -= 6.0 * k2 * (s2**2)[:, None] * d1
        dd2 = 2.0 * cross[:, None] * np.stack([-d1[:, 1], d1[:, 0]], axis=1)
        return g, zeros, dd1[:, None, :], dd2[:, None, :]
    if isinstance(spec, ObstacleClearance):
        k = len(spec.circles)
        if k == 0:
            shape = np.zeros((n, 0, 2))
            return np.zeros((n, 0)), shape, shape.copy(), shape.copy()
        centers = np.array([(x, y) for x, y, _ in spec.circles])
        radii = np.array([r for _, _, r in spec.circles])
        diff = sigma[:, None, :] - centers[None, :, :]  # (n, k, 2)
        g = (radii + spec.robot_radius) ** 2 - (diff * diff).sum(axis=2)
        return g, -2.0 * diff, np.zeros((n, k, 2)), np.zeros((n, k, 2))
    if isinstance(spec, MutualClearance):
        if peer_sigma is None:
            raise ValueError("mutual clearance needs a peer sample")
        diff = sigma - peer_sigma
        g = (spec.min_separation**2 - (diff * diff).sum(axis=1))[:, None]
        return g, (-2.0 * diff)[:, None, :], zeros, zeros
    raise TypeError(f"unknown constraint spec {type(spec).__name__}")


def constraint_value(spec: ConstraintSpec, sigma, d1, d2, peer_sigma=None):
    """Evaluate one constraint at a single flat sample.

    Returns (g, dg/dsigma, dg/dd1, dg/dd2) where g has one entry per scalar
    row of the constraint.  For mutual clearance the peer's position partial
    is the negation of ``dg/dsigma``.

    Raises:
        SingularSpeedError: curvature sampled below the speed floor.
    """
    sigma = np.asarray(sigma, dtype=float).reshape(1, 2)
    d1 = np.asarray(d1, dtype=float).reshape(1, 2)
    d2 = np.asarray(d2, dtype=float).reshape(1, 2)
    peer = None if peer_sigma is None else np.asarray(peer_sigma, float).reshape(1, 2)
    g, dsig, dd1, dd2 = _kernel(spec, sigma, d1, d2, peer, guard_speed=True)
    return g[0], dsig[0], dd1[0], dd2[0]


@dataclass
class TrajGradient:
    """Gradient w.r.t. one agent's coefficients and segment durations."""

    coeff: list[np.ndarray]  # per segment, (M, 6, 2)
    dT: np.ndarray  # (n_segments,)

    @staticmethod
    def zeros_like(traj: AgentTrajectory) -> "TrajGradient":
        return TrajGradient(
            [np.zeros((seg.piece_count, 6, 2)) for seg in traj.segments],
            np.zeros(len(traj.segments)),
        )

    def add(self, other: "TrajGradient", scale: float = 1.0) -> None:
        for mine, theirs in zip(self.coeff, other.coeff):
            mine += scale * theirs
        self.dT += scale * other.dT


class _AgentTable:
    """Flattened per-piece lookup used by both penalty passes."""

    def __init__(self, traj: AgentTrajectory, seg_offset: int):
        self.traj = traj
        self.n_seg = len(traj.segments)
        self.seg_offset = seg_offset  # index into the global duration vector
        durations, seg_of_piece, piece_in_seg = [], [], []
        for si, seg in enumerate(traj.segments):
            for j in range(seg.piece_count):
                durations.append(seg.piece_duration)
                seg_of_piece.append(si)
                piece_in_seg.append(j)
        self.piece_T = np.array(durations)
        self.seg_of_piece = np.array(seg_of_piece)
        self.piece_in_seg = np.array(piece_in_seg)
        self.piece_ends = np.cumsum(self.piece_T)
        self.piece_starts = self.piece_ends - self.piece_T
        self.coeffs = traj._piece_coeffs  # (P, 6, 2)
        self.total = float(self.piece_ends[-1])
        self.seg_M = np.array([seg.piece_count for seg in traj.segments])

    def start_sensitivity(self, piece_idx: np.ndarray) -> np.ndarray:
        """d(piece start time)/dT over this agent's segment durations."""
        n = piece_idx.shape[0]
        out = np.zeros((n, self.n_seg))
        seg = self.seg_of_piece[piece_idx]
        for s in range(self.n_seg):
            out[:, s] = np.where(seg > s, self.seg_M[s], 0.0)
        out[np.arange(n), seg] += self.piece_in_seg[piece_idx]
        return out

    def scatter(self, grad: TrajGradient, dcoeff_flat: np.ndarray, dT_flat=None):
        for p in range(dcoeff_flat.shape[0]):
            s = self.seg_of_piece[p]
            grad.coeff[s][self.piece_in_seg[p]] += dcoeff_flat[p]
            if dT_flat is not None:
                grad.dT[s] += dT_flat[p]


def _node_fractions(k: int, nudged: bool) -> np.ndarray:
    u = np.linspace(0.0, 1.0, k + 1)
    if nudged:
        u[0] = _END_NUDGE
        u[-1] = 1.0 - _END_NUDGE
    return u


def _power_mats(tau: np.ndarray, max_order: int = 3):
    """Derivative-basis rows for each sample: list over order of (..., 6)."""
    mats = []
    for r in range(max_order):
        cols = []
        for i in range(6):
            if i < r:
                cols.append(np.zeros_like(tau))
            else:
                cols.append(_DERIV_FACTORS[r, i] * tau ** (i - r))
        mats.append(np.stack(cols, axis=-1))
    return mats


def total_penalty(
    agents: Sequence[AgentTrajectory],
    specs: Sequence[ConstraintSpec],
    config: PenaltyConfig,
) -> tuple[float, list[TrajGradient]]:
    """Weighted, time-integrated penalty over every constraint and agent.

    Returns the scalar penalty and per-agent gradients with respect to all
    polynomial coefficients and segment durations.
    """
    grads = [TrajGradient.zeros_like(t) for t in agents]
    tables = []
    seg_offset = 0
    for t in agents:
        tables.append(_AgentTable(t, seg_offset))
        seg_offset += len(t.segments)
    total = 0.0

    for kind in KIND_ORDER:
        weight = config.weights.get(kind, 0.0)
        if weight == 0.0:
            continue
        for spec in (s for s in specs if s.kind == kind):
            if kind == KIND_MUTUAL:
                total += _mutual_penalty(spec, weight, tables, grads, config)
            else:
                for ai, table in enumerate(tables):
                    total += _per_agent_penalty(spec, weight, table, grads[ai], config)
    return total, grads


def _per_agent_penalty(
    spec: ConstraintSpec,
    weight: float,
    table: _AgentTable,
    grad: TrajGradient,
    config: PenaltyConfig,
) -> float:
    k_s = config.samples_per_piece
    u = _node_fractions(k_s, spec.kind in _NUDGED_KINDS)
    wpat = np.ones(k_s + 1)
    wpat[0] = wpat[-1] = 0.5

    P = table.piece_T.shape[0]
    n_nodes = u.shape[0]
    tau = table.piece_T[:, None] * u[None, :]  # (P, n)
    quad_w = (table.piece_T / k_s)[:, None] * wpat[None, :]  # (P, n)

    # flat output and derivatives 0..3 at every node
    vals = []
    for r in range(4):
        dc = table.coeffs[:, r:, :] * _DERIV_FACTORS[r][r:, None]
        out = np.zeros((P, n_nodes, 2))
        for d in range(dc.shape[1] - 1, -1, -1):
            out = out * tau[:, :, None] + dc[:, None, d, :]
        vals.append(out.reshape(-1, 2))
    sig, d1, d2, d3 = vals

    g, dsig, dd1, dd2 = _kernel(spec, sig, d1, d2)
    val, der = smooth_l1(g, config.a0)
    wq = weight * quad_w.reshape(-1)
    S = float((wq * val.sum(axis=1)).sum())

    # collapse constraint rows: e_r = sum_k L1'(g_k) * dg_k/d(order r)
    e0 = (der[:, :, None] * dsig).sum(axis=1)
    e1 = (der[:, :, None] * dd1).sum(axis=1)
    e2 = (der[:, :, None] * dd2).sum(axis=1)

    p0, p1, p2 = _power_mats(tau.reshape(-1))
    contrib = (
        p0[:, :, None] * (wq[:, None] * e0)[:, None, :]
        + p1[:, :, None] * (wq[:, None] * e1)[:, None, :]
        + p2[:, :, None] * (wq[:, None] * e2)[:, None, :]
    )  # (N, 6, 2)
    piece_idx = np.repeat(np.arange(P), n_nodes)
    dcoeff_flat = np.zeros((P, 6, 2))
    np.add.at(dcoeff_flat, piece_idx, contrib)

    # duration gradient: trapezoid weights scale with T and each node time
    # moves as its fraction of T
    dg_dt = (e0 * d1).sum(axis=1) + (e1 * d2).sum(axis=1) + (e2 * d3).sum(axis=1)
    l1_node = val.sum(axis=1)
    per_node_dT = wq * l1_node / np.repeat(table.piece_T, n_nodes)
    per_node_dT += wq * dg_dt * np.tile(u, P)
    dT_flat = np.zeros(P)
    np.add.at(dT_flat, piece_idx, per_node_dT)

    table.scatter(grad, dcoeff_flat, dT_flat)
    return S


class _UnionSamples:
    """One agent's state evaluated on the shared global time grid."""

    def __init__(self, table: _AgentTable, ts: np.ndarray, dts: np.ndarray, n_seg_total: int):
        self.table = table
        tcl = np.minimum(ts, table.total)
        idx = np.minimum(
            np.searchsorted(table.piece_ends, tcl, side="right"),
            table.piece_T.shape[0] - 1,
        )
        local = np.minimum(tcl - table.piece_starts[idx], table.piece_T[idx])
        beyond = ts >= table.total - 1e-15
        self.piece_idx = idx
        coeffs = table.coeffs[idx]
        out = []
        for r in range(2):
            dc = coeffs[:, r:, :] * _DERIV_FACTORS[r][r:, None]
            acc = np.zeros((ts.shape[0], 2))
            for d in range(dc.shape[1] - 1, -1, -1):
                acc = acc * local[:, None] + dc[:, d, :]
            out.append(acc)
        self.sigma, self.d1 = out

        # d(local time)/d(global duration vector)
        n = ts.shape[0]
        dlocal = np.zeros((n, n_seg_total))
        sl = slice(table.seg_offset, table.seg_offset + table.n_seg)
        within = ~beyond
        dlocal[within, sl] = -table.start_sensitivity(idx[within])
        dlocal[within] += dts[within]
        # held at the goal: local time pins to the last piece's duration
        dlocal[beyond, :] = 0.0
        dlocal[beyond, table.seg_offset + table.n_seg - 1] = 1.0
        self.dlocal = dlocal
        self.p0 = _power_mats(local, max_order=1)[0]  # (n, 6)


def _mutual_penalty(
    spec: MutualClearance,
    weight: float,
    tables: list[_AgentTable],
    grads: list[TrajGradient],
    config: PenaltyConfig,
) -> float:
    n_agents = len(tables)
    if n_agents < 2:
        return 0.0
    k_s = config.samples_per_piece
    u = _node_fractions(k_s, nudged=False)
    n_seg_total = sum(t.n_seg for t in tables)

    times, dtimes = [], []
    for table in tables:
        m = table.piece_T.shape[0]
        t_nodes = (table.piece_starts[:, None] + table.piece_T[:, None] * u[None, :]).reshape(-1)
        piece_idx = np.repeat(np.arange(m), u.shape[0])
        d_nodes = np.zeros((t_nodes.shape[0], n_seg_total))
        sl = slice(table.seg_offset, table.seg_offset + table.n_seg)
        d_nodes[:, sl] = table.start_sensitivity(piece_idx)
        d_nodes[
            np.arange(t_nodes.shape[0]),
            table.seg_offset + table.seg_of_piece[piece_idx],
        ] += np.tile(u, m)
        times.append(t_nodes)
        dtimes.append(d_nodes)
    ts = np.concatenate(times)
    dts = np.concatenate(dtimes)
    order = np.argsort(ts, kind="stable")
    ts, dts = ts[order], dts[order]
    n = ts.shape[0]

    # trapezoid weights on the (possibly duplicated) sorted grid; the
    # integrand at a node depends on its time only, so crossings of nodes
    # from different agents keep the sum smooth
    w = np.zeros(n)
    dw = np.zeros((n, n_seg_total))
    w[0] = 0.5 * (ts[1] - ts[0])
    w[-1] = 0.5 * (ts[-1] - ts[-2])
    w[1:-1] = 0.5 * (ts[2:] - ts[:-2])
    dw[0] = 0.5 * (dts[1] - dts[0])
    dw[-1] = 0.5 * (dts[-1] - dts[-2])
    dw[1:-1] = 0.5 * (dts[2:] - dts[:-2])

    samples = [_UnionSamples(t, ts, dts, n_seg_total) for t in tables]
    total = 0.0
    dT_global = np.zeros(n_seg_total)

    for i in range(n_agents):
        for q in range(i + 1, n_agents):
            a, b = samples[i], samples[q]
            diff = a.sigma - b.sigma
            g = spec.min_separation**2 - (diff * diff).sum(axis=1)
            val, der = smooth_l1(g, config.a0)
            total += float(weight * (w * val).sum())

            dT_global += weight * (val[:, None] * dw).sum(axis=0)
            dgdsig = -2.0 * diff  # w.r.t. agent i's position
            coef = weight * w * der
            for sm, gi, sign in ((a, i, 1.0), (b, q, -1.0)):
                e = sign * dgdsig
                contrib = sm.p0[:, :, None] * (coef[:, None] * e)[:, None, :]
                dcf = np.zeros((sm.table.piece_T.shape[0], 6, 2))
                np.add.at(dcf, sm.piece_idx, contrib)
                sm.table.scatter(grads[gi], dcf)
                scal = coef * (e * sm.d1).sum(axis=1)
                dT_global += scal @ sm.dlocal

    for ai, table in enumerate(tables):
        sl = slice(table.seg_offset, table.seg_offset + table.n_seg)
        grads[ai].dT += dT_global[sl]
    return total


def max_violation(
    agents: Sequence[AgentTrajectory],
    specs: Sequence[ConstraintSpec],
    config: PenaltyConfig,
    refine: int = 4,
) -> dict[str, float]:
    """Largest raw constraint value per kind on a refined sample grid.

    Negative values mean satisfied with margin.  Raw values use the same
    squared constraint forms as the penalty, not metric distances.
    """
    out: dict[str, float] = {}
    k_s = config.samples_per_piece * refine
    for spec in specs:
        worst = -math.inf
        if spec.kind == KIND_MUTUAL:
            if len(agents) >= 2:
                tmax = max(t.total_duration for t in agents)
                ts = np.linspace(0.0, tmax, k_s * 8 + 1)
                pos = [t.eval_many(ts, 0, clamp=True) for t in agents]
                for i in range(len(agents)):
                    for q in range(i + 1, len(agents)):
                        diff = pos[i] - pos[q]
                        g = spec.min_separation**2 - (diff * diff).sum(axis=1)
                        worst = max(worst, float(g.max()))
        else:
            u = _node_fractions(k_s, spec.kind in _NUDGED_KINDS)
            for traj in agents:
                for seg in traj.segments:
                    for piece in seg.pieces:
                        tau = u * piece.duration
                        g, _, _, _ = _kernel(
                            spec,
                            piece.eval(tau, 0),
                            piece.eval(tau, 1),
                            piece.eval(tau, 2),
                        )
                        if g.size:
                            worst = max(worst, float(g.max()))
        out[spec.kind] = max(out.get(spec.kind, -math.inf), worst)
    return out
