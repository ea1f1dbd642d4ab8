"""Square-root cubature Kalman filter whose mean lives on SE_{2+2m}(3).

Tangent / covariance layout (n = 6m + 15)::

    [ rot(3) | vel(3) | pos(3) | line_1 ps(3) pe(3) | ... | line_m | bg(3) | ba(3) ]

Uncertainty is applied on the left, ``chi = exp(xi) * chi_mean``, and every
mean correction is a left multiplication by ``exp``.  The covariance is kept
as a lower-triangular factor ``S`` with ``P = S S^T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .imu import NavState, NoiseParams, propagate_nav, propagate_nav_batch
from .liegroup import GroupState, exp_batch, group_exp, left_mult_batch, log_batch, right_div_batch
from .lines import CameraModel

log = logging.getLogger(__name__)

MAX_LINES = 20
CHI2_2DOF_95 = 5.991464547107979


class FilterError(RuntimeError):
    """Non-finite numbers inside the filter."""


def tangent_dim(num_lines: int) -> int:
    return 6 * num_lines + 9


def state_dim(num_lines: int) -> int:
    return 6 * num_lines + 15


def propagation_dim(num_lines: int) -> int:
    return 6 * num_lines + 21


def update_dim(num_lines: int, num_measured: int | None = None) -> int:
    if num_measured is None:
        num_measured = num_lines
    return state_dim(num_lines) + 2 * num_measured


@dataclass(frozen=True)
class FilterState:
    mean: GroupState
    bias: np.ndarray
    S: np.ndarray
    line_ids: tuple[int, ...] = ()

    def __post_init__(self):
        m = self.mean.num_lines
        if len(self.line_ids) != m:
            raise ValueError(f"{len(self.line_ids)} line ids for {m} lines")
        n = state_dim(m)
        if self.S.shape != (n, n):
            raise ValueError(f"sqrt covariance shape {self.S.shape}, expected {(n, n)}")

    @property
    def num_lines(self) -> int:
        return self.mean.num_lines

    @property
    def P(self) -> np.ndarray:
        return self.S @ self.S.T

    def line_slice(self, index: int) -> slice:
        return slice(9 + 6 * index, 15 + 6 * index)

    @property
    def bias_slice(self) -> slice:
        n = self.S.shape[0]
        return slice(n - 6, n)


@dataclass
class CubaturePoints:
    """2I generator vectors and the states they map to.

    ``zeta`` rows are the generators sqrt(I) * S_aug * (+/- e_j); ``R``,
    ``cols`` and ``bias`` are the materialized states, ``extra`` the noise or
    input block riding along in the augmented vector.
    """

    zeta: np.ndarray
    R: np.ndarray
    cols: np.ndarray
    bias: np.ndarray
    extra: np.ndarray

    def __len__(self) -> int:
        return self.zeta.shape[0]

    @property
    def dim(self) -> int:
        return self.zeta.shape[1]


def block_diag(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    out = np.zeros((A.shape[0] + B.shape[0], A.shape[1] + B.shape[1]))
    out[: A.shape[0], : A.shape[1]] = A
    out[A.shape[0] :, A.shape[1] :] = B
    return out


def tria(M: np.ndarray) -> np.ndarray:
    """Lower-triangular S with S S^T = M^T M, diagonal made non-negative."""
    if not np.all(np.isfinite(M)):
        raise FilterError("non-finite matrix passed to QR")
    r = np.linalg.qr(M, mode="r")
    n = M.shape[1]
    if r.shape[0] < n:
        r = np.vstack([r, np.zeros((n - r.shape[0], n))])
    sign = np.where(np.diag(r) < 0, -1.0, 1.0)
    return (r * sign[:, None]).T


def generators(S_aug: np.ndarray) -> np.ndarray:
    I = S_aug.shape[0]
    cols = np.sqrt(I) * S_aug.T
    return np.vstack([cols, -cols])


def _materialize(fs: FilterState, zeta: np.ndarray) -> CubaturePoints:
    d = tangent_dim(fs.num_lines)
    R, cols = exp_batch(zeta[:, :d])
    R, cols = left_mult_batch(R, cols, fs.mean)
    bias = fs.bias + zeta[:, d : d + 6]
    return CubaturePoints(zeta, R, cols, bias, zeta[:, d + 6 :])


def build_propagation_points(fs: FilterState, u, S_u: np.ndarray) -> CubaturePoints:
    """Points over [xi, bias error, input noise]; ``extra`` holds u + n_u."""
    S_u = np.asarray(S_u, float)
    if S_u.shape != (6, 6):
        raise ValueError("input noise factor must be 6x6")
    S_aug = block_diag(fs.S, S_u)
    if not np.all(np.isfinite(S_aug)):
        raise FilterError("non-finite augmented square-root factor")
    pts = _materialize(fs, generators(S_aug))
    pts.extra = np.concatenate([np.asarray(u[0], float), np.asarray(u[1], float)]) + pts.extra
    return pts


def build_update_points(fs: FilterState, S_s: np.ndarray) -> CubaturePoints:
    """Points over [xi, bias error, measurement noise]; ``extra`` holds n_s."""
    S_aug = block_diag(fs.S, np.asarray(S_s, float))
    return _materialize(fs, generators(S_aug))


def _propagate_states(R, cols, bias, inputs, g, dt):
    omega = inputs[:, :3] - bias[:, :3]
    a_body = inputs[:, 3:] - bias[:, 3:]
    R_new, v, p = propagate_nav_batch(R, cols[:, 0], cols[:, 1], omega, a_body, g, dt)
    cols = cols.copy()
    cols[:, 0] = v
    cols[:, 1] = p
    return R_new, cols


def propagate(fs: FilterState, u, dt: float, noise: NoiseParams) -> FilterState:
    """One IMU step.  ``u`` is (gyro, accel) as measured."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = np.asarray(noise.gravity, float)
    pts = build_propagation_points(fs, u, noise.input_sqrt(dt))
    R, cols = _propagate_states(pts.R, pts.cols, pts.bias, pts.extra, g, dt)

    nav = propagate_nav(
        NavState(fs.mean.R, fs.mean.v, fs.mean.p),
        np.asarray(u[0], float) - fs.bias[:3],
        np.asarray(u[1], float) - fs.bias[3:],
        g,
        dt,
    )
    mcols = fs.mean.cols.copy()
    mcols[0], mcols[1] = nav.v, nav.p
    mean = GroupState(nav.R, mcols)

    scale = 1.0 / np.sqrt(2 * pts.dim)
    dR, dcols = right_div_batch(R, cols, mean)
    dev = np.empty((len(pts), state_dim(fs.num_lines)))
    dev[:, :-6] = scale * log_batch(dR, dcols)
    # bias is constant through f, so b_j - b_mean is the generator block
    dev[:, -6:] = scale * (pts.bias - fs.bias)

    walk = np.zeros((6, dev.shape[1]))
    walk[:, -6:] = noise.bias_walk_sqrt(dt).T
    S = tria(np.vstack([dev, walk]))
    return replace(fs, mean=mean, S=S)


MeasurementFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class UpdateResult:
    state: FilterState
    applied: bool
    z_mean: np.ndarray
    S_z: np.ndarray | None = None
    reason: str = ""


def update(fs: FilterState, h: MeasurementFn, S_s: np.ndarray, target=None) -> UpdateResult:
    """Cubature measurement update.

    ``h(R, cols, bias)`` maps N materialized states to (N, q) predicted
    measurements; it is called with the noise block zero, the noise enters
    additively through ``S_s``.  ``target`` is the observed value (zero for
    the line residual model).
    """
    S_s = np.asarray(S_s, float)
    q = S_s.shape[0]
    pts = build_update_points(fs, S_s)
    z = np.asarray(h(pts.R, pts.cols, pts.bias), float)
    if not np.all(np.isfinite(z)):
        raise FilterError("non-finite predicted measurement")
    z_mean = z.mean(axis=0)
    scale = 1.0 / np.sqrt(len(pts))
    E = scale * (z - z_mean)
    n = fs.S.shape[0]
    X = scale * pts.zeta[:, :n]

    S_z = tria(np.vstack([E, S_s.T]))
    d = np.abs(np.diag(S_z))
    if d.min() <= 1e-12 * max(d.max(), 1e-300):
        log.warning("innovation factor numerically singular, update skipped")
        return UpdateResult(fs, False, z_mean, S_z, "singular innovation covariance")

    P_xz = X.T @ E
    Y = solve_triangular(S_z, P_xz.T, lower=True)
    K = solve_triangular(S_z.T, Y, lower=False).T
    y = np.zeros(q) if target is None else np.asarray(target, float)
    delta = K @ (y - z_mean)
    if not np.all(np.isfinite(delta)):
        raise FilterError("non-finite state correction")

    dt_dim = tangent_dim(fs.num_lines)
    corr = group_exp(delta[:dt_dim])
    mean = GroupState(corr.R @ fs.mean.R, fs.mean.cols @ corr.R.T + corr.cols)
    bias = fs.bias + delta[dt_dim:]
    S = tria(np.vstack([X - E @ K.T, (K @ S_s).T]))
    return UpdateResult(replace(fs, mean=mean, bias=bias, S=S), True, z_mean, S_z)


# --- line measurement model ------------------------------------------------


def line_measurement_fn(cam: CameraModel, line_index: np.ndarray, segments: np.ndarray) -> MeasurementFn:
    """h for a set of state lines observed as pixel segments (q = 2 * len)."""
    line_index = np.asarray(line_index, int)
    segments = np.asarray(segments, float)
    Kl = cam.line_K

    def h(R, cols, bias):
        return line_residuals(Kl, cam.R_ic, cam.p_ic, R, cols, line_index, segments)

    return h


def line_residuals(Kl, R_ic, p_ic, R, cols, line_index, segments, return_moment=False):
    R_wc = R @ R_ic
    C = cols[:, 1] + R @ p_ic
    ps = cols[:, 2 + 2 * line_index]
    pe = cols[:, 3 + 2 * line_index]
    # world line (n, v) from endpoints, then into the camera frame
    n_w = np.cross(ps, pe)
    v_w = pe - ps
    R_cw = np.swapaxes(R_wc, -1, -2)
    t = -(R_cw @ C[..., None])[..., 0]
    v_c = v_w @ R_wc
    n_c = n_w @ R_wc + np.cross(t[:, None, :], v_c)
    l = n_c @ Kl.T
    norm = np.hypot(l[..., 0], l[..., 1])
    s = segments  # (L, 2, 2)
    ds = (l[..., 0] * s[None, :, 0, 0] + l[..., 1] * s[None, :, 0, 1] + l[..., 2]) / norm
    de = (l[..., 0] * s[None, :, 1, 0] + l[..., 1] * s[None, :, 1, 1] + l[..., 2]) / norm
    res = np.stack([ds, de], axis=-1).reshape(R.shape[0], -1)
    if return_moment:
        return res, n_c, v_c
    return res


@dataclass(frozen=True)
class MeasurementBatch:
    track_ids: tuple[int, ...]
    segments: np.ndarray  # (L, 2, 2) pixels, start/end
    sigma_px: float = 1.5

    def __len__(self) -> int:
        return len(self.track_ids)


@dataclass
class LineUpdateReport:
    state: FilterState
    applied: bool
    measured: int
    gated: tuple[int, ...] = ()
    dropped: tuple[int, ...] = ()
    reason: str = ""


def predict_measurements(pts: CubaturePoints, cam: CameraModel, line_index, segments):
    """Predicted residual mean and scaled deviations e_j for a point set."""
    z = line_residuals(cam.line_K, cam.R_ic, cam.p_ic, pts.R, pts.cols, np.asarray(line_index, int), segments)
    z_mean = z.mean(axis=0)
    return z_mean, (z - z_mean) / np.sqrt(len(pts))


# perpendicular distance (m) from the camera centre below which a line's
# projection is treated as degenerate
DEGENERATE_DISTANCE = 1e-6


def update_lines(
    fs: FilterState,
    batch: MeasurementBatch,
    cam: CameraModel,
    gate_chi2: float | None = CHI2_2DOF_95,
) -> LineUpdateReport:
    if len(batch) == 0:
        return LineUpdateReport(fs, False, 0, reason="empty batch")
    index = {tid: i for i, tid in enumerate(fs.line_ids)}
    unknown = [tid for tid in batch.track_ids if tid not in index]
    if unknown:
        raise KeyError(f"track ids not in state: {unknown}")
    ids = list(batch.track_ids)
    segs = np.asarray(batch.segments, float)

    # drop lines whose projection degenerates at the mean
    li = np.array([index[t] for t in ids])
    with np.errstate(invalid="ignore", divide="ignore"):
        _, n_c, v_c = line_residuals(
            cam.line_K, cam.R_ic, cam.p_ic, fs.mean.R[None], fs.mean.cols[None], li, segs, return_moment=True
        )
    dist = np.linalg.norm(n_c[0], axis=-1) / np.linalg.norm(v_c[0], axis=-1)
    keep = dist > DEGENERATE_DISTANCE
    dropped = tuple(t for t, k in zip(ids, keep) if not k)
    ids = [t for t, k in zip(ids, keep) if k]
    segs = segs[keep]
    if not ids:
        return LineUpdateReport(fs, False, 0, dropped=dropped, reason="all projections degenerate")

    gated: tuple[int, ...] = ()
    if gate_chi2 is not None:
        li = np.array([index[t] for t in ids])
        sig2 = batch.sigma_px**2
        pts = build_update_points(fs, batch.sigma_px * np.eye(2 * len(ids)))
        z_mean, E = predict_measurements(pts, cam, li, segs)
        ok = []
        for j in range(len(ids)):
            Ej = E[:, 2 * j : 2 * j + 2]
            Pzz = Ej.T @ Ej + sig2 * np.eye(2)
            zj = z_mean[2 * j : 2 * j + 2]
            ok.append(float(zj @ np.linalg.solve(Pzz, zj)) <= gate_chi2)
        gated = tuple(t for t, k in zip(ids, ok) if not k)
        segs = segs[np.array(ok)]
        ids = [t for t, k in zip(ids, ok) if k]
        if not ids:
            return LineUpdateReport(fs, False, 0, gated, dropped, "all measurements gated")

    li = np.array([index[t] for t in ids])
    S_s = batch.sigma_px * np.eye(2 * len(ids))
    res = update(fs, line_measurement_fn(cam, li, segs), S_s)
    return LineUpdateReport(res.state, res.applied, len(ids), gated, dropped, res.reason)


# --- landmark bookkeeping ----------------------------------------------------


def augment_line(
    fs: FilterState,
    track_id: int,
    ps,
    pe,
    sigma_init: float,
    max_lines: int = MAX_LINES,
    share_position_error: bool = False,
    cross: np.ndarray | None = None,
) -> FilterState:
    """Append a line whose endpoint error is cross @ [body error; bias error] + sigma_init @ w.

    ``sigma_init`` is a scalar or a 6 x 6 square-root factor.
    ``cross`` (6 x 15) is the sensitivity of the triangulated endpoints to the
    current (rot, vel, pos, bg, ba) error; w is fresh unit noise.  With
    ``share_position_error`` and no ``cross`` the endpoints copy the position
    error, which is exact for a line known relative to the current pose.
    Without either the new block is independent of the rest of the state.
    """
    m = fs.num_lines
    if m >= max_lines:
        raise ValueError(f"line budget of {max_lines} exhausted")
    if track_id in fs.line_ids:
        raise ValueError(f"track {track_id} already in state")
    cols = np.vstack([fs.mean.cols, np.asarray(ps, float)[None], np.asarray(pe, float)[None]])
    n = fs.S.shape[0]
    cut = n - 6
    if cross is None and share_position_error:
        cross = np.zeros((6, 15))
        cross[:3, 6:9] = cross[3:, 6:9] = np.eye(3)
    M = np.zeros((n + 6, n + 6))
    M[:cut, :n] = fs.S[:cut]
    M[cut + 6 :, :n] = fs.S[cut:]
    M[cut : cut + 6, n:] = sigma_init * np.eye(6) if np.ndim(sigma_init) == 0 else sigma_init
    if cross is None:
        return FilterState(GroupState(fs.mean.R, cols), fs.bias, tria(M.T), fs.line_ids + (track_id,))
    M[cut : cut + 6, :n] = np.asarray(cross, float) @ np.vstack([fs.S[:9], fs.S[cut:]])
    return FilterState(GroupState(fs.mean.R, cols), fs.bias, tria(M.T), fs.line_ids + (track_id,))


def remove_line(fs: FilterState, track_id: int) -> FilterState:
    if track_id not in fs.line_ids:
        raise KeyError(f"track {track_id} not in state")
    i = fs.line_ids.index(track_id)
    rows = np.ones(fs.S.shape[0], bool)
    rows[fs.line_slice(i)] = False
    S_rows = fs.S[rows]
    # columns of the removed block are zero for a line that is last among the
    # landmarks and uncorrelated; then the factor is already triangular
    S_keep = S_rows[:, rows]
    if np.all(S_rows[:, ~rows] == 0):
        S = S_keep
    else:
        S = tria(S_rows.T)
    cols = np.delete(fs.mean.cols, [2 + 2 * i, 3 + 2 * i], axis=0)
    ids = fs.line_ids[:i] + fs.line_ids[i + 1 :]
    return FilterState(GroupState(fs.mean.R, cols), fs.bias, S, ids)


def initial_state(
    R, v, p, bias=None, sigma_rot=1e-3, sigma_vel=1e-2, sigma_pos=1e-3, sigma_bg=1e-4, sigma_ba=1e-2
) -> FilterState:
    mean = GroupState.from_nav(R, v, p)
    diag = [sigma_rot] * 3 + [sigma_vel] * 3 + [sigma_pos] * 3 + [sigma_bg] * 3 + [sigma_ba] * 3
    b = np.zeros(6) if bias is None else np.asarray(bias, float)
    return FilterState(mean, b, np.diag(diag).astype(float))


@dataclass
class FilterConfig:
    max_lines: int = MAX_LINES
    init_sigma_line: float = 0.15
    gate_chi2: float = CHI2_2DOF_95
    min_baseline_m: float = 0.1
    miss_frames_drop: int = 400
    min_plane_angle_deg: float = 10.0
    # a state line gated this many frames in a row is dropped
    gated_frames_drop: int = 5
    # RMS reprojection bound (px) over a candidate's views at initialization
    init_max_rms_px: float = 3.0
    # frames to wait after a candidate failed to triangulate
    init_retry_frames: int = 5
    # candidate views older than this many frames are forgotten
    init_window_frames: int = 100
    # a candidate is accepted when its fitted endpoint std is below this (m)
    init_max_fit_std: float = 0.1
    # correlate new lines with the body and bias error (see augment_line)
    init_cross_covariance: bool = True
    sigma_px: float = 1.5
    init_sigma_rot: float = 1e-3
    init_sigma_vel: float = 1e-2
    init_sigma_pos: float = 1e-3
    init_sigma_bg: float = 1e-4
    init_sigma_ba: float = 1e-2
