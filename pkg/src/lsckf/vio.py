"""Line landmark management and the event loop that drives the filter."""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import filter as F
from .imu import (
    DEFAULT_GRAVITY,
    REORTHONORMALIZE_EVERY,
    DeadReckoner,
    ImuBias,
    NavState,
    NoiseParams,
    Preintegration,
    chain_backward,
)
from .io import DatasetBundle, LineTrack, TrajectoryRecord
from .liegroup import GroupState, hat, project_to_so3, so3_exp
from .lines import (
    CameraModel,
    DegenerateGeometry,
    LineFit,
    View,
    endpoints_from_plucker,
    refine_line,
    reprojection_residuals,
    triangulate_line,
)

log = logging.getLogger(__name__)

NS = 1_000_000_000
MAX_INIT_DEPTH = 40.0
MIN_INIT_DEPTH = 0.2
# views used by the multi-view line fit (evenly subsampled, ends included)
MAX_FIT_VIEWS = 20


@dataclass
class Candidate:
    """An unmatched track waiting for enough parallax to be triangulated."""

    views: list
    last_seen: int  # frame counter
    next_try: int = 0
    # (t_ns, R, v, p) body estimate and frame counter at each view
    bodies: list = field(default_factory=list)
    frames: list = field(default_factory=list)

    @property
    def first(self) -> View:
        return self.views[0]


@dataclass
class LineManager:
    """Candidate buffer, miss and gating counters for line tracks."""

    cfg: F.FilterConfig
    candidates: dict = field(default_factory=dict)
    misses: dict = field(default_factory=dict)
    gated: dict = field(default_factory=dict)
    frame: int = 0
    gravity: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GRAVITY))
    # frame times and the IMU increments between consecutive frames
    frame_times: deque = field(default_factory=deque)
    increments: deque = field(default_factory=deque)
    _chained: tuple | None = None

    def plan(self, fs: F.FilterState, tracks):
        """Remove stale lines, then split the frame into (batch, unmatched tracks).

        A state line is removed after ``miss_frames_drop`` frames without a
        track or ``gated_frames_drop`` consecutive gated frames.
        """
        self.frame += 1
        by_id = {tr.track_id: tr for tr in tracks}
        removed = []
        for tid in fs.line_ids:
            if tid in by_id:
                self.misses[tid] = 0
            else:
                self.misses[tid] = self.misses.get(tid, 0) + 1
            if self.misses[tid] >= self.cfg.miss_frames_drop or self.gated.get(tid, 0) >= self.cfg.gated_frames_drop:
                removed.append(tid)
        for tid in removed:
            fs = F.remove_line(fs, tid)
            self.misses.pop(tid, None)
            self.gated.pop(tid, None)

        ids = tuple(tid for tid in fs.line_ids if tid in by_id)
        segs = np.array([[by_id[t].start, by_id[t].end] for t in ids]).reshape(-1, 2, 2)
        batch = F.MeasurementBatch(ids, segs, self.cfg.sigma_px)
        unmatched = [by_id[t] for t in sorted(by_id) if t not in fs.line_ids and t not in removed]
        return fs, batch, unmatched, tuple(removed)

    def record_gating(self, measured, gated) -> None:
        for tid in measured:
            self.gated[tid] = self.gated.get(tid, 0) + 1 if tid in gated else 0

    def record_increment(self, t_ns: int, increment: Preintegration | None) -> None:
        """Remember the IMU increment that ended at frame time t_ns."""
        if increment is not None and self.frame_times:
            self.increments.append(increment)
        else:
            self.increments.clear()
        self.frame_times.append(int(t_ns))
        while len(self.frame_times) > self.cfg.init_window_frames:
            self.frame_times.popleft()
        while len(self.increments) >= len(self.frame_times):
            self.increments.popleft()

    def chained_bodies(self, fs: F.FilterState) -> dict:
        """Body states at the stored frame times, walked back from the current mean
        with the current bias, so the window is consistent with the IMU."""
        if self._chained is not None and self._chained[0] == self.frame:
            return self._chained[1]
        m = fs.mean
        times = list(self.frame_times)[-len(self.increments) - 1 :]
        states = chain_backward(m.R, m.v, m.p, list(self.increments), fs.bias, self.gravity) + [(m.R, m.v, m.p)]
        out = {t: (t, *x) for t, x in zip(times, states)}
        self._chained = (self.frame, out)
        return out

    def _rechain(self, cand: Candidate, fs: F.FilterState, cam: CameraModel) -> None:
        chained = self.chained_bodies(fs)
        if not all(b[0] in chained for b in cand.bodies):
            return
        cand.bodies = [chained[b[0]] for b in cand.bodies]
        for i, (vw, (_, R, _, p)) in enumerate(zip(cand.views, cand.bodies)):
            R_wc, C = cam.pose_in_world(R, p)
            cand.views[i] = View(R_wc, C, vw.a, vw.b)

    def initialize(self, fs: F.FilterState, unmatched, cam: CameraModel, t_ns: int = 0):
        """Extend candidates with this frame's view; augment the ones that are ready.

        Views are recorded at the current (posterior) mean pose.  Before a fit
        they are replaced by poses walked back from the current state through
        the IMU increments, when those cover the candidate's window.
        Candidates that cannot be added because the budget is full stay in the
        buffer.
        """
        m = fs.mean
        R_wc, C = cam.pose_in_world(m.R, m.p)
        body = (int(t_ns), m.R, m.v, m.p)
        added = []
        for tr in unmatched:
            view = View(R_wc, C, np.asarray(tr.start, float), np.asarray(tr.end, float))
            cand = self.candidates.get(tr.track_id)
            if cand is None:
                self.candidates[tr.track_id] = Candidate([view], self.frame, bodies=[body], frames=[self.frame])
                continue
            cand.views.append(view)
            cand.bodies.append(body)
            cand.frames.append(self.frame)
            while cand.frames[0] <= self.frame - self.cfg.init_window_frames:
                del cand.views[0], cand.bodies[0], cand.frames[0]
            cand.last_seen = self.frame
            if fs.num_lines >= self.cfg.max_lines or self.frame < cand.next_try:
                continue
            if np.linalg.norm(C - cand.first.C) < self.cfg.min_baseline_m:
                continue
            self._rechain(cand, fs, cam)
            tri = self.triangulate(cand, cam)
            if tri is None:
                cand.next_try = self.frame + self.cfg.init_retry_frames
                continue
            ps, pe, fit, idx, cov = tri
            cross = None
            if self.cfg.init_cross_covariance:
                cross = line_cross_jacobian(cam, fit, cand, idx, self.gravity)
                # pixel noise of the fit plus an isotropic floor
                S_init = np.linalg.cholesky(cov + self.cfg.init_sigma_line**2 * np.eye(6))
            else:
                S_init = self.cfg.init_sigma_line
            fs = F.augment_line(fs, tr.track_id, ps, pe, S_init, self.cfg.max_lines, cross=cross)
            self.misses[tr.track_id] = 0
            self.gated[tr.track_id] = 0
            del self.candidates[tr.track_id]
            added.append(tr.track_id)
        stale = [t for t, c in self.candidates.items() if self.frame - c.last_seen >= self.cfg.miss_frames_drop]
        for t in stale:
            del self.candidates[t]
        return fs, tuple(added)

    def triangulate(self, cand: Candidate, cam: CameraModel):
        """(ps, pe, fit, view indices) for a candidate, or None when it is not
        yet well constrained.

        Two-view triangulation between the first and the latest view seeds a
        least-squares fit over a subset of all views; the fit is accepted only
        if its endpoint standard deviation from pixel noise is small enough.
        """
        first, now = cand.views[0], cand.views[-1]
        try:
            L = triangulate_line(cam, first, now, self.cfg.min_plane_angle_deg)
            idx = np.unique(np.linspace(0, len(cand.views) - 1, min(len(cand.views), MAX_FIT_VIEWS)).round().astype(int))
            fit = refine_line(cam, L, [cand.views[i] for i in idx])
            ps, pe = endpoints_from_plucker(cam, fit.L, now.R_wc, now.C, now.a, now.b)
            if fit.rms_px > self.cfg.init_max_rms_px:
                return None
            if not (_in_front(ps, pe, now) and _in_front(ps, pe, first)):
                return None
            cov = _endpoint_cov(cam, fit, now, self.cfg.sigma_px)
        except DegenerateGeometry:
            return None
        if not _largest_std(cov) <= self.cfg.init_max_fit_std:
            return None
        return ps, pe, fit, idx, cov


def _endpoint_cov(cam: CameraModel, fit: LineFit, view: View, sigma_px: float, h: float = 1e-6) -> np.ndarray:
    """6 x 6 endpoint covariance implied by the fit covariance and pixel noise."""
    base = np.concatenate(endpoints_from_plucker(cam, fit.L, view.R_wc, view.C, view.a, view.b))
    J = np.empty((6, 4))
    for k in range(4):
        dx = np.zeros(4)
        dx[k] = h
        J[:, k] = (np.concatenate(endpoints_from_plucker(cam, fit.line_of(dx), view.R_wc, view.C, view.a, view.b)) - base) / h
    return sigma_px**2 * J @ fit.cov @ J.T


def _largest_std(cov: np.ndarray) -> float:
    return float(np.sqrt(max(np.linalg.eigvalsh(cov[:3, :3]).max(), np.linalg.eigvalsh(cov[3:, 3:]).max())))


def window_transitions(bodies, gravity) -> np.ndarray:
    """Map from the latest (rot, vel, pos, bg, ba) error to the error at each view.

    Left-invariant error dynamics with a constant bias error, integrated
    backwards at view rate along the stored estimates:
    d(phi) = -R dbg, d(rho_v) = g^ phi - v^ R dbg - R dba, d(rho_p) = rho_v - p^ R dbg.
    """
    G = hat(np.asarray(gravity, float))
    out = np.empty((len(bodies), 15, 15))
    Psi = np.eye(15)
    out[-1] = Psi
    for i in range(len(bodies) - 2, -1, -1):
        t, R, v, p = bodies[i + 1]
        A = np.zeros((15, 15))
        A[0:3, 9:12] = -R
        A[3:6, 0:3] = G
        A[3:6, 9:12] = -hat(v) @ R
        A[3:6, 12:15] = -R
        A[6:9, 3:6] = np.eye(3)
        A[6:9, 9:12] = -hat(p) @ R
        Psi = (np.eye(15) + A * ((bodies[i][0] - t) / NS)) @ Psi
        out[i] = Psi
    return out


def _perturbed_views(cam: CameraModel, views, bodies, Psi, delta):
    out = []
    for vw, (_, R, _, p), T in zip(views, bodies, Psi):
        e = T[:9] @ delta
        Q = so3_exp(e[:3])
        R_wc, C = cam.pose_in_world(Q @ R, Q @ p + e[6:9])
        out.append(View(R_wc, C, vw.a, vw.b))
    return out


def line_cross_jacobian(cam: CameraModel, fit: LineFit, cand: Candidate, idx, gravity, h: float = 1e-6) -> np.ndarray:
    """Sensitivity (6 x 15) of the fitted endpoints to the current body and bias error.

    The past view poses move with the current error through the window
    transitions; the fit follows to first order (Gauss-Newton step) and the
    endpoints are re-read at the latest view.  The endpoint error is measured
    the way the filter perturbs line columns, p_true = exp(phi) p + rho.
    """
    Psi = window_transitions(cand.bodies, gravity)[idx]
    views = [cand.views[i] for i in idx]
    bodies = [cand.bodies[i] for i in idx]
    now, now_body = cand.views[-1], cand.bodies[-1]

    def resid(dx, delta):
        return reprojection_residuals(cam, fit.line_of(dx), _perturbed_views(cam, views, bodies, Psi, delta))

    def endpoints(dx, delta):
        vw = _perturbed_views(cam, [now], [now_body], Psi[-1:], delta)[0]
        Q = so3_exp(delta[:3])
        ps, pe = endpoints_from_plucker(cam, fit.line_of(dx), vw.R_wc, vw.C, vw.a, vw.b)
        return np.concatenate([ps - Q @ ref[0], pe - Q @ ref[1]])

    ref = endpoints_from_plucker(cam, fit.L, now.R_wc, now.C, now.a, now.b)
    z4, z15 = np.zeros(4), np.zeros(15)
    Jx = np.column_stack([(resid(h * e, z15) - resid(-h * e, z15)) / (2 * h) for e in np.eye(4)])
    Jd = np.column_stack([(resid(z4, h * e) - resid(z4, -h * e)) / (2 * h) for e in np.eye(15)])
    dx = -np.linalg.lstsq(Jx, Jd, rcond=None)[0]
    return np.column_stack(
        [(endpoints(h * dx[:, k], h * e) - endpoints(-h * dx[:, k], -h * e)) / (2 * h) for k, e in enumerate(np.eye(15))]
    )


def _in_front(ps, pe, view: View) -> bool:
    depth = np.array([view.R_wc[:, 2] @ (x - view.C) for x in (ps, pe)])
    return bool(np.all(depth > MIN_INIT_DEPTH) and np.all(depth < MAX_INIT_DEPTH))


def feature_lifecycle(tracks, manager: LineManager, fs: F.FilterState, cam: CameraModel):
    """One frame of landmark management without the filter update in between.

    Returns (state after removals and augmentations, measurement batch for
    the state lines, ids of newly augmented lines).
    """
    fs, batch, unmatched, _ = manager.plan(fs, tracks)
    fs, added = manager.initialize(fs, unmatched, cam)
    return fs, batch, added


@dataclass
class FrameDiagnostics:
    t_ns: int
    active_lines: int
    measured: int
    gated: int
    applied: bool
    attempted: bool
    initialized: int
    removed: int
    trace_P: float


class LineVio:
    """Filter plus landmark management; one mutation at a time."""

    def __init__(self, fs: F.FilterState, cam: CameraModel, noise: NoiseParams, cfg: F.FilterConfig):
        self.fs = fs
        self.cam = cam
        self.noise = noise
        self.cfg = cfg
        self.manager = LineManager(cfg, gravity=np.asarray(noise.gravity, float))
        self.steps = 0
        self.increment = None

    def propagate(self, gyro, accel, dt: float) -> None:
        if self.increment is None:
            self.increment = Preintegration(self.fs.bias.copy())
        self.increment.integrate(gyro, accel, dt)
        self.fs = F.propagate(self.fs, (gyro, accel), dt, self.noise)
        self.steps += 1
        if self.steps % REORTHONORMALIZE_EVERY == 0:
            m = self.fs.mean
            self.fs = replace(self.fs, mean=GroupState(project_to_so3(m.R), m.cols))

    def process_frame(self, t_ns: int, tracks) -> FrameDiagnostics:
        fs, batch, unmatched, removed = self.manager.plan(self.fs, tracks)
        self.manager.record_increment(t_ns, self.increment)
        self.increment = None
        report = F.update_lines(fs, batch, self.cam, self.cfg.gate_chi2)
        self.manager.record_gating(batch.track_ids, report.gated)
        fs, added = self.manager.initialize(report.state, unmatched, self.cam, t_ns)
        self.fs = fs
        return FrameDiagnostics(
            t_ns,
            fs.num_lines,
            report.measured,
            len(report.gated),
            report.applied,
            len(batch) > 0,
            len(added),
            len(removed),
            float(np.sum(fs.S * fs.S)),
        )


@dataclass
class RunResult:
    trajectory: list
    diagnostics: list
    body_states: list
    diverged: bool = False
    error: str = ""
    last_good: dict | None = None
    runtime_s: float = 0.0

    @property
    def update_ratio(self) -> float:
        attempted = sum(d.attempted for d in self.diagnostics)
        if attempted == 0:
            return 1.0
        return sum(d.applied for d in self.diagnostics if d.attempted) / attempted


def _frames(tracks):
    frames: dict[int, list[LineTrack]] = {}
    for tr in tracks:
        frames.setdefault(tr.t_ns, []).append(tr)
    return frames


def _initial_nav(bundle: DatasetBundle):
    t0 = bundle.imu[0].t_ns
    if bundle.groundtruth:
        gt = min(bundle.groundtruth, key=lambda r: abs(r.t_ns - t0))
        return NavState(gt.R, gt.v, gt.p)
    log.warning("no ground truth; starting from identity at rest")
    return NavState(np.eye(3), np.zeros(3), np.zeros(3))


def snapshot(fs: F.FilterState, t_ns: int) -> dict:
    return {
        "t_ns": int(t_ns),
        "R": fs.mean.R.tolist(),
        "v": fs.mean.v.tolist(),
        "p": fs.mean.p.tolist(),
        "bias": fs.bias.tolist(),
        "line_ids": list(fs.line_ids),
        "S_diag": np.diag(fs.S).tolist(),
    }


def run_dataset(bundle: DatasetBundle, update: bool = True, initial_state: F.FilterState | None = None) -> RunResult:
    """Propagate on every IMU sample, update on every frame, in time order.

    Events at equal timestamps propagate first, then update.  Frames outside
    the IMU time span are skipped.
    """
    start = time.perf_counter()
    imu = bundle.imu
    if len(imu) < 2:
        raise ValueError("need at least two IMU samples")
    cfg = bundle.config
    t_imu = np.array([s.t_ns for s in imu], dtype=np.int64)
    frames = _frames(bundle.tracks) if update else {}
    frame_times = sorted(t for t in frames if t_imu[0] <= t <= t_imu[-1])
    events = np.union1d(t_imu, np.array(frame_times, dtype=np.int64))

    nav0 = _initial_nav(bundle)
    if initial_state is None:
        initial_state = F.initial_state(
            nav0.R, nav0.v, nav0.p,
            sigma_rot=cfg.init_sigma_rot, sigma_vel=cfg.init_sigma_vel, sigma_pos=cfg.init_sigma_pos,
            sigma_bg=cfg.init_sigma_bg, sigma_ba=cfg.init_sigma_ba,
        )
    result = RunResult([], [], [])

    if not update:
        m0 = initial_state.mean
        dr = DeadReckoner(NavState(m0.R, m0.v, m0.p), ImuBias.from_vector(initial_state.bias), bundle.noise.gravity)
        result.trajectory.append(TrajectoryRecord(int(t_imu[0]), dr.x.p, dr.x.R, dr.x.v))
        for k in range(len(imu) - 1):
            x = dr.step(imu[k], (t_imu[k + 1] - t_imu[k]) / NS)
            result.trajectory.append(TrajectoryRecord(int(t_imu[k + 1]), x.p, x.R, x.v))
        result.runtime_s = time.perf_counter() - start
        return result

    vio = LineVio(initial_state, bundle.camera, bundle.noise, cfg)
    k = 0
    t_cur = int(events[0])
    last_good = snapshot(vio.fs, t_cur)
    try:
        for T in events:
            T = int(T)
            while t_cur < T:
                nxt = min(T, int(t_imu[k + 1]))
                s = imu[k]
                vio.propagate(s.gyro, s.accel, (nxt - t_cur) / NS)
                t_cur = nxt
                if t_cur == t_imu[k + 1]:
                    k += 1
            if T in frames:
                result.diagnostics.append(vio.process_frame(T, frames[T]))
                fs = vio.fs
                result.body_states.append((T, fs.mean.R, fs.mean.v, fs.mean.p, fs.S[:9, :9].copy()))
            fs = vio.fs
            if not (np.all(np.isfinite(fs.S)) and np.all(np.isfinite(fs.mean.cols))):
                raise F.FilterError("non-finite filter state")
            result.trajectory.append(TrajectoryRecord(T, fs.mean.p, fs.mean.R, fs.mean.v))
            last_good = snapshot(fs, T)
    except (F.FilterError, FloatingPointError, np.linalg.LinAlgError) as e:
        log.error("filter diverged at t=%d: %s", t_cur, e)
        result.diverged = True
        result.error = str(e)
    result.last_good = last_good
    result.runtime_s = time.perf_counter() - start
    return result
