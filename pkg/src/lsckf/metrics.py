"""Trajectory error metrics and filter consistency (NEES)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .io import TrajectoryRecord
from .liegroup import GroupState, group_compose, group_inverse, group_log, so3_log

MATCH_TOL_NS = 1_000_000


class NoMatchError(ValueError):
    pass


def match_timestamps(t_est, t_gt, tol_ns: int = MATCH_TOL_NS):
    """Index pairs (i_est, i_gt) of nearest-neighbour matches within tol."""
    t_est = np.asarray(t_est, dtype=np.int64)
    t_gt = np.asarray(t_gt, dtype=np.int64)
    if len(t_est) == 0 or len(t_gt) == 0:
        raise NoMatchError("empty trajectory")
    j = np.clip(np.searchsorted(t_gt, t_est), 1, len(t_gt) - 1) if len(t_gt) > 1 else np.zeros(len(t_est), int)
    if len(t_gt) > 1:
        left = j - 1
        use_left = np.abs(t_est - t_gt[left]) <= np.abs(t_gt[j] - t_est)
        j = np.where(use_left, left, j)
    ok = np.abs(t_gt[j] - t_est) <= tol_ns
    if not ok.any():
        raise NoMatchError("no timestamps match within tolerance")
    return np.nonzero(ok)[0], j[ok]


def _matched(est, gt, tol_ns):
    i, j = match_timestamps([r.t_ns for r in est], [r.t_ns for r in gt], tol_ns)
    return [est[k] for k in i], [gt[k] for k in j]


def position_errors(est, gt, tol_ns: int = MATCH_TOL_NS) -> np.ndarray:
    e, g = _matched(est, gt, tol_ns)
    return np.linalg.norm(np.array([a.p for a in e]) - np.array([b.p for b in g]), axis=1)


def attitude_errors(est, gt, tol_ns: int = MATCH_TOL_NS) -> np.ndarray:
    e, g = _matched(est, gt, tol_ns)
    R_est = np.array([a.R for a in e])
    R_gt = np.array([b.R for b in g])
    return np.linalg.norm(so3_log(np.swapaxes(R_gt, -1, -2) @ R_est), axis=1)


def position_rmse(est, gt, tol_ns: int = MATCH_TOL_NS) -> float:
    return float(np.sqrt(np.mean(position_errors(est, gt, tol_ns) ** 2)))


def attitude_rmse(est, gt, tol_ns: int = MATCH_TOL_NS) -> float:
    return float(np.sqrt(np.mean(attitude_errors(est, gt, tol_ns) ** 2)))


def body_error(R_est, v_est, p_est, R_gt, v_gt, p_gt) -> np.ndarray:
    """Left-invariant error log(est * gt^-1) on the (R, v, p) block."""
    est = GroupState.from_nav(R_est, v_est, p_est)
    gt = GroupState.from_nav(R_gt, v_gt, p_gt)
    return group_log(group_compose(est, group_inverse(gt)))


def nees_value(error: np.ndarray, S: np.ndarray) -> float:
    """e^T (S S^T)^-1 e using the triangular factor."""
    if np.any(np.abs(np.diag(S)) < 1e-300):
        raise np.linalg.LinAlgError("singular covariance factor")
    w = solve_triangular(S, error, lower=True)
    return float(w @ w)


def body_sqrt_cov(S_full: np.ndarray) -> np.ndarray:
    """Factor of the 9x9 (rot, vel, pos) marginal; the layout puts it first."""
    return S_full[:9, :9].copy()


@dataclass
class Metrics:
    rmse_pos: float
    rmse_att: float
    pos_series: np.ndarray
    att_series: np.ndarray
    nees_series: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def nees_mean(self) -> float | None:
        return float(np.mean(self.nees_series)) if len(self.nees_series) else None


def nees_series(est_states, gt, tol_ns: int = MATCH_TOL_NS) -> np.ndarray:
    """NEES of (t_ns, R, v, p, S_body) estimates against ground-truth records."""
    i, j = match_timestamps([s[0] for s in est_states], [r.t_ns for r in gt], tol_ns)
    out = []
    for a, b in zip(i, j):
        _, R, v, p, S = est_states[a]
        g = gt[b]
        out.append(nees_value(body_error(R, v, p, g.R, g.v, g.p), S))
    return np.array(out)


def evaluate(est, gt, est_states=None, tol_ns: int = MATCH_TOL_NS) -> Metrics:
    pe = position_errors(est, gt, tol_ns)
    ae = attitude_errors(est, gt, tol_ns)
    ns = nees_series(est_states, gt, tol_ns) if est_states else np.zeros(0)
    return Metrics(float(np.sqrt(np.mean(pe**2))), float(np.sqrt(np.mean(ae**2))), pe, ae, ns)


def align_yaw_translation(est, gt, tol_ns: int = MATCH_TOL_NS):
    """Apply the yaw + translation that best fits est positions onto gt."""
    e, g = _matched(est, gt, tol_ns)
    P = np.array([a.p for a in e])
    Q = np.array([b.p for b in g])
    mp, mq = P.mean(0), Q.mean(0)
    X, Y = P - mp, Q - mq
    yaw = np.arctan2(np.sum(X[:, 0] * Y[:, 1] - X[:, 1] * Y[:, 0]), np.sum(X[:, 0] * Y[:, 0] + X[:, 1] * Y[:, 1]))
    c, s = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t = mq - Rz @ mp
    return [TrajectoryRecord(r.t_ns, Rz @ r.p + t, Rz @ r.R, Rz @ r.v) for r in est]
