"""Piecewise-quintic flat-output trajectories.

A trajectory is an ordered list of constant-direction *segments*; each
segment is a run of quintic polynomial *pieces* sharing one duration.  Within
a segment the pieces join with continuous derivatives up to order 4, which
together with one pass-through waypoint per interior junction makes the
coefficient system square: the segment is fully determined by its boundary
flat states, its interior waypoints and its piece duration.

The coefficient solve is a banded linear system (bandwidths 4 below / 2
above), factorized and back-solved in O(M).  Gradients of any scalar cost
with respect to waypoints, durations and gear-shift positions are obtained
from the adjoint (transposed) solve against the cached band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .timewarp import real_time, real_time_derivative

# basis is [1, t, ..., t^5]; _DERIV_FACTORS[r][i] = i! / (i-r)! (0 for i < r)
_DERIV_FACTORS = np.array(
    [[math.perm(i, r) if i >= r else 0 for i in range(6)] for r in range(6)],
    dtype=float,
)

_BAND_L, _BAND_U = 4, 2


class SolveError(ArithmeticError):
    """Coefficient system could not be solved reliably."""


class StaleFactorizationError(RuntimeError):
    """Gradient propagation was asked against an outdated factorization."""


def basis(t: float, order: int) -> np.ndarray:
    """d^order/dt^order of the monomial basis [1, t, ..., t^5] at ``t``."""
    powers = np.zeros(6)
    for i in range(order, 6):
        powers[i] = t ** (i - order)
    return _DERIV_FACTORS[order] * powers


def eval_piece(coeffs: np.ndarray, t, order: int = 0) -> np.ndarray:
    """Evaluate a piece's flat output derivative at local time(s) ``t``.

    Args:
        coeffs: (6, 2) monomial coefficients, ascending degree.
        t: scalar or (n,) local times.
        order: derivative order, 0..5.

    Returns:
        (2,) for scalar ``t``, else (n, 2).
    """
    dc = coeffs[order:] * _DERIV_FACTORS[order][order:, None]
    t_arr = np.asarray(t, dtype=float)
    out = np.zeros(t_arr.shape + (2,))
    for row in dc[::-1]:
        out = out * t_arr[..., None] + row
    return out


@dataclass(frozen=True)
class FlatState:
    """Flat output with first and second derivatives (each a 2-vector)."""

    sigma: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    def __post_init__(self):
        for name in ("sigma", "d1", "d2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (2,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite 2-vector")
            object.__setattr__(self, name, arr)

    @staticmethod
    def at_rest(x: float, y: float) -> "FlatState":
        return FlatState(np.array([x, y]), np.zeros(2), np.zeros(2))


@dataclass(frozen=True)
class PolyPiece:
    """One quintic span: (6, 2) monomial coefficients and a duration."""

    coeffs: np.ndarray
    duration: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (6, 2):
            raise ValueError(f"coeffs must be (6, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coeffs must be finite")
        if not self.duration > 0.0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        object.__setattr__(self, "coeffs", c)

    def eval(self, t, order: int = 0) -> np.ndarray:
        return eval_piece(self.coeffs, t, order)


@dataclass(frozen=True)
class Segment:
    """A maximal constant-direction run of pieces with a shared duration."""

    eta: int
    pieces: tuple[PolyPiece, ...]

    def __post_init__(self):
        if self.eta not in (-1, 1):
            raise ValueError(f"eta must be +1 or -1, got {self.eta}")
        if not self.pieces:
            raise ValueError("segment needs at least one piece")
        object.__setattr__(self, "pieces", tuple(self.pieces))
        T = self.pieces[0].duration
        if any(abs(p.duration - T) > 1e-12 * max(1.0, T) for p in self.pieces):
            raise ValueError("pieces within a segment must share one duration")

    @property
    def piece_duration(self) -> float:
        return self.pieces[0].duration

    @property
    def piece_count(self) -> int:
        return len(self.pieces)

    @property
    def duration(self) -> float:
        return self.piece_count * self.piece_duration

    def coeff_array(self) -> np.ndarray:
        """Coefficients stacked as (M, 6, 2)."""
        return np.stack([p.coeffs for p in self.pieces])


@dataclass(frozen=True)
class AgentTrajectory:
    """Ordered gear-shift segments plus the flat states at their junctions.

    ``boundary_states`` has one entry per segment boundary (n_segments + 1);
    interior entries sit at gear shifts and therefore carry zero velocity.
    """

    segments: tuple[Segment, ...]
    boundary_states: tuple[FlatState, ...]
    # flat per-piece lookup tables, filled in __post_init__
    _piece_ends: np.ndarray = field(repr=False, default=None)
    _piece_coeffs: np.ndarray = field(repr=False, default=None)
    _piece_durations: np.ndarray = field(repr=False, default=None)
    _piece_etas: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "boundary_states", tuple(self.boundary_states))
        if len(self.boundary_states) != len(self.segments) + 1:
            raise ValueError("need one boundary state per segment junction")
        durations = []
        coeffs = []
        etas = []
        for seg in self.segments:
            for p in seg.pieces:
                durations.append(p.duration)
                coeffs.append(p.coeffs)
                etas.append(seg.eta)
        durations = np.array(durations)
        object.__setattr__(self, "_piece_ends", np.cumsum(durations))
        object.__setattr__(self, "_piece_coeffs", np.stack(coeffs))
        object.__setattr__(self, "_piece_durations", durations)
        object.__setattr__(self, "_piece_etas", np.array(etas, dtype=int))

    @property
    def total_duration(self) -> float:
        return float(self._piece_ends[-1])

    def segment_start_time(self, i: int) -> float:
        starts = 0.0
        for seg in self.segments[:i]:
            starts += seg.duration
        return starts

    def locate(self, t: float) -> tuple[int, float, int]:
        """(flat piece index, local time, eta) for global time ``t``.

        Interior junction times resolve to the right-hand piece.
        """
        total = self.total_duration
        if t < -1e-12 or t > total + 1e-12:
            raise ValueError(f"t={t} outside [0, {total}]")
        t = min(max(t, 0.0), total)
        idx = int(np.searchsorted(self._piece_ends, t, side="right"))
        idx = min(idx, len(self._piece_ends) - 1)
        start = self._piece_ends[idx] - self._piece_durations[idx]
        return idx, t - start, int(self._piece_etas[idx])

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        """Flat output derivative of given order at global time ``t``."""
        idx, local, _ = self.locate(t)
        return eval_piece(self._piece_coeffs[idx], local, order)

    def eval_many(self, ts: np.ndarray, order: int = 0, clamp: bool = False) -> np.ndarray:
        """Vectorized :meth:`eval` over an array of times.

        With ``clamp=True`` out-of-range times are clamped to [0, total],
        which models an agent resting at its goal after arrival.
        """
        ts = np.asarray(ts, dtype=float)
        total = self.total_duration
        if clamp:
            ts = np.clip(ts, 0.0, total)
        elif ts.size and (ts.min() < -1e-12 or ts.max() > total + 1e-12):
            raise ValueError("time outside trajectory domain")
        ts = np.clip(ts, 0.0, total)
        idx = np.minimum(
            np.searchsorted(self._piece_ends, ts, side="right"),
            len(self._piece_ends) - 1,
        )
        local = ts - (self._piece_ends[idx] - self._piece_durations[idx])
        dc = self._piece_coeffs[idx][:, order:, :] * _DERIV_FACTORS[order][order:, None]
        out = np.zeros(ts.shape + (2,))
        for d in range(dc.shape[1] - 1, -1, -1):
            out = out * local[..., None] + dc[:, d, :]
        return out

    def eta_at(self, t: float) -> int:
        return self.locate(t)[2]

    def to_json_dict(self) -> dict:
        segs = []
        for seg in self.segments:
            segs.append(
                {
                    "eta": int(seg.eta),
                    "T": float(seg.piece_duration),
                    "M": seg.piece_count,
                    "coeffs": [
                        [p.coeffs[:, 0].tolist(), p.coeffs[:, 1].tolist()]
                        for p in seg.pieces
                    ],
                }
            )
        return {"segments": segs}

    @staticmethod
    def from_json_dict(data: dict) -> "AgentTrajectory":
        segments = []
        for sd in data["segments"]:
            T = float(sd["T"])
            pieces = tuple(
                PolyPiece(np.array(pc, dtype=float).T, T) for pc in sd["coeffs"]
            )
            if len(pieces) != int(sd["M"]):
                raise ValueError("piece count mismatch in trajectory data")
            segments.append(Segment(int(sd["eta"]), pieces))
        boundaries = [_segment_boundary(segments[0], start=True)]
        for seg in segments:
            boundaries.append(_segment_boundary(seg, start=False))
        return AgentTrajectory(tuple(segments), tuple(boundaries))


def _segment_boundary(seg: Segment, start: bool) -> FlatState:
    piece = seg.pieces[0] if start else seg.pieces[-1]
    t = 0.0 if start else piece.duration
    return FlatState(piece.eval(t, 0), piece.eval(t, 1), piece.eval(t, 2))


@dataclass(frozen=True)
class WaypointParams:
    """Planner decision variables for one agent.

    Attributes:
        waypoints: per segment, a (2, M-1) array of interior pass-through
            points (empty (2, 0) for single-piece segments).
        taus: per segment virtual time; maps through the duration warp.
        shift_poses: (n_junctions, 3) gear-shift (x, y, theta).  theta feeds
            the front end and reporting only; it does not enter the cost.
    """

    waypoints: tuple[np.ndarray, ...]
    taus: np.ndarray
    shift_poses: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self,
            "waypoints",
            tuple(np.asarray(w, dtype=float).reshape(2, -1) for w in self.waypoints),
        )
        taus = np.asarray(self.taus, dtype=float)
        shifts = np.asarray(self.shift_poses, dtype=float).reshape(-1, 3)
        if taus.shape != (len(self.waypoints),):
            raise ValueError("need one tau per segment")
        if shifts.shape[0] != len(self.waypoints) - 1:
            raise ValueError("need one shift pose per interior junction")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "shift_poses", shifts)


# ---------------------------------------------------------------------------
# banded coefficient system
#
# Unknowns: 6M coefficients per axis, piece-major, ascending degree.
# Rows: 3 start conditions | per interior junction [waypoint, continuity of
# orders 0..4] | 3 end conditions.  This ordering gives bandwidths (4, 2).
# ---------------------------------------------------------------------------


def _band_entries(M: int, T: float):
    """(rows, cols, vals) triplets of the condition matrix."""
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for r in range(3):  # start conditions, orders 0..2 at local 0
        add(r, r, _DERIV_FACTORS[r, r])
    for j in range(M - 1):
        base = 3 + 6 * j
        bT = [basis(T, r) for r in range(6)]
        for i in range(6):  # waypoint row
            add(base, 6 * j + i, bT[0][i])
        for r in range(5):  # continuity orders 0..4
            row = base + 1 + r
            for i in range(r, 6):
                add(row, 6 * j + i, bT[r][i])
            add(row, 6 * (j + 1) + r, -_DERIV_FACTORS[r, r])
    for r in range(3):  # end conditions at local T
        row = 6 * M - 3 + r
        bTr = basis(T, r)
        for i in range(r, 6):
            add(row, 6 * (M - 1) + i, bTr[i])
    return np.array(rows), np.array(cols), np.array(vals)


def _banded_matrices(M: int, T: float):
    """LAPACK band storage of the condition matrix and of its transpose."""
    n = 6 * M
    rows, cols, vals = _band_entries(M, T)
    ab = np.zeros((_BAND_L + _BAND_U + 1, n))
    ab[_BAND_U + rows - cols, cols] = vals
    ab_t = np.zeros((_BAND_L + _BAND_U + 1, n))
    ab_t[_BAND_L + cols - rows, rows] = vals
    return ab, ab_t


def _rhs(start: FlatState, end: FlatState, waypoints: np.ndarray, M: int) -> np.ndarray:
    b = np.zeros((6 * M, 2))
    b[0], b[1], b[2] = start.sigma, start.d1, start.d2
    for j in range(M - 1):
        b[3 + 6 * j] = waypoints[:, j]
    b[-3], b[-2], b[-1] = end.sigma, end.d1, end.d2
    return b


def solve_coefficients(
    start: FlatState,
    end: FlatState,
    waypoints: np.ndarray,
    T: float,
) -> tuple[PolyPiece, ...]:
    """Solve for the pieces of one segment.

    Args:
        start, end: boundary flat states.
        waypoints: (2, M-1) interior pass-through points; M is inferred.
        T: shared piece duration.

    Raises:
        SolveError: if ``T`` is tiny or the solve produced non-finite values.
    """
    waypoints = np.asarray(waypoints, dtype=float).reshape(2, -1)
    M = waypoints.shape[1] + 1
    if not T > 1e-9:
        raise SolveError(f"piece duration {T} too small to condition the system")
    ab, _ = _banded_matrices(M, T)
    b = _rhs(start, end, waypoints, M)
    try:
        c = solve_banded((_BAND_L, _BAND_U), ab, b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises rarely
        raise SolveError(str(exc)) from exc
    if not np.all(np.isfinite(c)):
        raise SolveError("coefficient solve returned non-finite values")
    c = c.reshape(M, 6, 2)
    return tuple(PolyPiece(c[j], T) for j in range(M))


# ---------------------------------------------------------------------------
# control effort
# ---------------------------------------------------------------------------


def control_effort(
    traj: AgentTrajectory, W: np.ndarray
) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Integral of the W-weighted squared jerk, with analytic gradients.

    Returns:
        (value, per-segment coefficient gradients (M, 6, 2),
         per-segment duration gradients).
    """
    W = np.asarray(W, dtype=float)
    total = 0.0
    coeff_grads = []
    dT = np.zeros(len(traj.segments))
    for si, seg in enumerate(traj.segments):
        T = seg.piece_duration
        Q = _jerk_gram(T)
        dE_dT = 0.0
        grads = np.zeros((seg.piece_count, 6, 2))
        for j, piece in enumerate(seg.pieces):
            B = piece.coeffs[3:] * np.array([[6.0], [24.0], [60.0]])
            total += float(np.trace(W @ B.T @ Q @ B))
            dB = 2.0 * Q @ B @ W
            grads[j, 3:] = dB * np.array([[6.0], [24.0], [60.0]])
            mu_T = piece.eval(T, 3)
            dE_dT += float(mu_T @ W @ mu_T)
        coeff_grads.append(grads)
        dT[si] = dE_dT
    return total, coeff_grads, dT


def _jerk_gram(T: float) -> np.ndarray:
    """Gram matrix of [1, t, t^2] on [0, T]."""
    return np.array(
        [
            [T, T**2 / 2, T**3 / 3],
            [T**2 / 2, T**3 / 3, T**4 / 4],
            [T**3 / 3, T**4 / 4, T**5 / 5],
        ]
    )


# ---------------------------------------------------------------------------
# builder: decision variables -> trajectory, plus adjoint gradient transport
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamGradient:
    """Cost gradient in decision-variable space (mirrors WaypointParams)."""

    waypoints: tuple[np.ndarray, ...]
    taus: np.ndarray
    shift_poses: np.ndarray

    def ravel(self) -> np.ndarray:
        parts = [w.ravel() for w in self.waypoints]
        parts.append(self.taus)
        parts.append(self.shift_poses.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


class TrajectoryBuilder:
    """Turns decision variables into trajectories and transports gradients.

    The builder owns one agent's fixed structure: overall start/goal flat
    states and the per-segment (eta, piece count) plan produced by the front
    end.  ``build`` assembles and factorizes the banded condition systems;
    ``propagate`` must be called with the trajectory from the *latest* build,
    since it reuses those factorizations.
    """

    def __init__(
        self,
        start: FlatState,
        goal: FlatState,
        segment_plan: list[tuple[int, int]],
    ):
        if not segment_plan:
            raise ValueError("segment plan is empty")
        self.start = start
        self.goal = goal
        self.segment_plan = [(int(e), int(m)) for e, m in segment_plan]
        for eta, m in self.segment_plan:
            if eta not in (-1, 1) or m < 1:
                raise ValueError(f"bad segment plan entry ({eta}, {m})")
        self._cache = None
        self._last_traj: AgentTrajectory | None = None
        self._last_params: WaypointParams | None = None

    @property
    def n_segments(self) -> int:
        return len(self.segment_plan)

    def param_size(self) -> int:
        q = sum(2 * (m - 1) for _, m in self.segment_plan)
        return q + self.n_segments + 3 * (self.n_segments - 1)

    def pack(self, params: WaypointParams) -> np.ndarray:
        parts = [w.ravel() for w in params.waypoints]
        parts.append(params.taus)
        parts.append(params.shift_poses.ravel())
        return np.concatenate(parts)

    def unpack(self, x: np.ndarray) -> WaypointParams:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.param_size(),):
            raise ValueError(f"expected {self.param_size()} variables, got {x.shape}")
        waypoints = []
        off = 0
        for _, m in self.segment_plan:
            k = 2 * (m - 1)
            waypoints.append(x[off : off + k].reshape(2, m - 1))
            off += k
        taus = x[off : off + self.n_segments]
        off += self.n_segments
        shifts = x[off:].reshape(self.n_segments - 1, 3)
        return WaypointParams(tuple(waypoints), taus, shifts)

    def build(self, params: WaypointParams) -> AgentTrajectory:
        if len(params.waypoints) != self.n_segments:
            raise ValueError("params do not match the segment plan")
        boundaries = [self.start]
        for k in range(self.n_segments - 1):
            x, y, _ = params.shift_poses[k]
            boundaries.append(FlatState.at_rest(x, y))
        boundaries.append(self.goal)

        segments = []
        cache = []
        for i, (eta, M) in enumerate(self.segment_plan):
            if params.waypoints[i].shape != (2, M - 1):
                raise ValueError(f"segment {i}: waypoints must be (2, {M - 1})")
            T = real_time(float(params.taus[i]))
            if not T > 1e-9:
                raise SolveError(f"segment {i}: duration {T} too small")
            ab, ab_t = _banded_matrices(M, T)
            b = _rhs(boundaries[i], boundaries[i + 1], params.waypoints[i], M)
            c = solve_banded((_BAND_L, _BAND_U), ab, b)
            if not np.all(np.isfinite(c)):
                raise SolveError(f"segment {i}: non-finite coefficients")
            c = c.reshape(M, 6, 2)
            segments.append(Segment(eta, tuple(PolyPiece(c[j], T) for j in range(M))))
            cache.append((ab_t, c, T, M))

        traj = AgentTrajectory(tuple(segments), tuple(boundaries))
        self._cache = cache
        self._last_traj = traj
        self._last_params = params
        return traj

    def propagate(
        self,
        traj: AgentTrajectory,
        coeff_grads: list[np.ndarray],
        duration_grads: np.ndarray,
    ) -> ParamGradient:
        """Pull (dJ/dcoeffs, dJ/dT) back to the decision variables.

        Args:
            traj: the trajectory returned by the latest ``build``.
            coeff_grads: per segment, (M, 6, 2) gradient w.r.t. coefficients.
            duration_grads: per segment, explicit dJ/dT (holding coefficients
                fixed); the implicit part through the solve is added here.

        Raises:
            StaleFactorizationError: if ``traj`` is not the latest build.
        """
        if traj is not self._last_traj or self._cache is None:
            raise StaleFactorizationError(
                "propagate() requires the trajectory from the most recent build()"
            )
        params = self._last_params
        n_seg = self.n_segments
        dq = []
        dtau = np.zeros(n_seg)
        dshift = np.zeros((max(n_seg - 1, 0), 3))
        lam_all = []

        for i, (ab_t, c, T, M) in enumerate(self._cache):
            g = np.asarray(coeff_grads[i], dtype=float).reshape(6 * M, 2)
            lam = solve_banded((_BAND_U, _BAND_L), ab_t, g)
            lam_all.append(lam)

            # waypoint rows carry the rhs entries q_j
            dq_i = np.zeros((2, M - 1))
            for j in range(M - 1):
                dq_i[:, j] = lam[3 + 6 * j]
            dq.append(dq_i)

            # dJ/dT through the matrix: -lam^T (dA/dT) c.  T-dependent rows
            # evaluate the left piece's next-higher derivative at local T.
            dT_mat = 0.0
            for j in range(M - 1):
                base = 3 + 6 * j
                dT_mat -= float(lam[base] @ eval_piece(c[j], T, 1))
                for r in range(5):
                    dT_mat -= float(lam[base + 1 + r] @ eval_piece(c[j], T, r + 1))
            for r in range(3):
                dT_mat -= float(lam[6 * M - 3 + r] @ eval_piece(c[M - 1], T, r + 1))

            dT_total = float(duration_grads[i]) + dT_mat
            dtau[i] = dT_total * real_time_derivative(float(params.taus[i]))

        # shift-pose position gradients gather the adjacent segments'
        # boundary-condition rows; theta never enters the cost.
        for k in range(n_seg - 1):
            lam_left = lam_all[k]
            lam_right = lam_all[k + 1]
            dshift[k, 0] = lam_left[-3, 0] + lam_right[0, 0]
            dshift[k, 1] = lam_left[-3, 1] + lam_right[0, 1]

        return ParamGradient(tuple(dq), dtau, dshift)
