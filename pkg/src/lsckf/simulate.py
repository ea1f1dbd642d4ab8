"""Synthetic scenarios: analytic trajectories, a wall-line map, IMU and line tracks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imu import ImuSample, NavState, NoiseParams
from .io import LineTrack, SchemaError
from .lines import CameraModel

# EuRoC cam0 intrinsics
EUROC_INTRINSICS = dict(fu=458.654, fv=457.296, cu=367.215, cv=248.375, width=752, height=480)

NS = 1_000_000_000
NEAR_PLANE = 0.1
MIN_SEGMENT_PX = 10.0
EDGE_MARGIN_PX = 5.0


def default_camera_mount(look_deg: float = 180.0):
    """Camera->body rotation; the default looks out of the left side (body +y).

    Body frame is x forward, y left, z up; the optical axis is turned from
    body -y towards +x by ``look_deg``; image y points down.  Looking inward
    from the circle keeps a whole wall plus corners of the box in view.
    """
    a = np.deg2rad(look_deg)
    z_c = np.array([np.sin(a), -np.cos(a), 0.0])
    y_c = np.array([0.0, 0.0, -1.0])
    x_c = np.cross(y_c, z_c)
    return np.column_stack([x_c, y_c, z_c])


def default_camera() -> CameraModel:
    return CameraModel(**EUROC_INTRINSICS, R_ic=default_camera_mount(), p_ic=np.array([0.05, -0.02, 0.0]))


def box_line_map(half_size: float = 5.0, z_low: float = 0.2, z_high: float = 2.9):
    """12 segments, three on each wall of a box centred on the origin.

    Each wall carries one vertical and two steep diagonals.  Horizontal lines
    are avoided on purpose: under planar motion a line parallel to the
    translation has no two-view parallax and cannot be triangulated.
    """
    s = half_size
    lines = []
    for k in range(4):
        c, sn = np.cos(k * np.pi / 2), np.sin(k * np.pi / 2)
        # wall at distance s along (c, sn); tangent direction (-sn, c)
        normal = np.array([c, sn, 0.0]) * s
        tang = np.array([-sn, c, 0.0])
        up = np.array([0.0, 0.0, 1.0])
        off = 0.1 * s * (1 if k % 2 == 0 else -1)
        lines.append((normal + off * tang + z_low * up, normal + off * tang + z_high * up))
        lines.append((normal - 0.9 * s * tang + z_low * up, normal - 0.15 * s * tang + z_high * up))
        lines.append((normal + 0.15 * s * tang + z_high * up, normal + 0.9 * s * tang + z_low * up))
    return [(np.asarray(a, float), np.asarray(b, float)) for a, b in lines]


@dataclass
class ScenarioSpec:
    family: str = "circle"
    duration: float = 60.0
    imu_rate: float = 200.0
    cam_rate: float = 20.0
    lines: list = field(default_factory=box_line_map)
    noise: NoiseParams = field(default_factory=NoiseParams)
    sigma_px: float = 1.5
    seed: int = 0
    camera: CameraModel = field(default_factory=default_camera)
    # trajectory shape
    radius: float = 2.0
    angular_rate: float = 2 * np.pi / 20.0
    height: float = 1.5
    amplitude: tuple = (1.5, 1.0, 0.3)
    frequency: tuple = (0.21, 0.33, 0.5)

    def __post_init__(self):
        if self.family not in ("circle", "sinusoid-3d", "hover"):
            raise ValueError(f"unknown trajectory family {self.family!r}")
        if not (self.imu_rate > 0 and self.cam_rate > 0 and self.duration > 0):
            raise ValueError("rates and duration must be positive")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu rate must be an integer multiple of the camera rate")

    @property
    def imu_period_ns(self) -> int:
        return int(round(NS / self.imu_rate))

    @property
    def cam_period_ns(self) -> int:
        return self.imu_period_ns * int(round(self.imu_rate / self.cam_rate))

    @property
    def num_imu(self) -> int:
        return int(round(self.duration * self.imu_rate))

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.cam_rate))


def _euler_zyx(roll, pitch, yaw):
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    Ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    Rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def _body_rate_zyx(roll, pitch, droll, dpitch, dyaw):
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    return np.array(
        [
            droll - dyaw * sp,
            dpitch * cr + dyaw * sr * cp,
            -dpitch * sr + dyaw * cr * cp,
        ]
    )


def _kinematics(spec: ScenarioSpec, t: float):
    """Position, velocity, acceleration (world) and Euler angles with rates."""
    if spec.family == "hover":
        p = np.array([0.0, 0.0, spec.height])
        return p, np.zeros(3), np.zeros(3), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)
    if spec.family == "circle":
        r, w = spec.radius, spec.angular_rate
        c, s = np.cos(w * t), np.sin(w * t)
        p = np.array([r * c, r * s, spec.height])
        v = np.array([-r * w * s, r * w * c, 0.0])
        a = np.array([-r * w * w * c, -r * w * w * s, 0.0])
        return p, v, a, (0.0, 0.0, w * t + np.pi / 2), (0.0, 0.0, w)
    A = np.asarray(spec.amplitude, float)
    f = 2 * np.pi * np.asarray(spec.frequency, float)
    p = A * np.sin(f * t) + [0.0, 0.0, spec.height]
    v = A * f * np.cos(f * t)
    a = -A * f * f * np.sin(f * t)
    wr, wp, wy = 0.37, 0.29, 0.11
    ang = (0.1 * np.sin(2 * np.pi * wr * t), 0.08 * np.sin(2 * np.pi * wp * t), 0.6 * np.sin(2 * np.pi * wy * t))
    rates = (
        0.1 * 2 * np.pi * wr * np.cos(2 * np.pi * wr * t),
        0.08 * 2 * np.pi * wp * np.cos(2 * np.pi * wp * t),
        0.6 * 2 * np.pi * wy * np.cos(2 * np.pi * wy * t),
    )
    return p, v, a, ang, rates


def analytic_trajectory(spec: ScenarioSpec, t: float):
    """(NavState, body rate, body specific force) at time t [s]."""
    if not (-1e-12 <= t <= spec.duration + 1e-9):
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    p, v, a_w, (r, pi, y), (dr, dp, dy) = _kinematics(spec, t)
    R = _euler_zyx(r, pi, y)
    omega = _body_rate_zyx(r, pi, dr, dp, dy)
    a_body = R.T @ (a_w - np.asarray(spec.noise.gravity, float))
    return NavState(R, v, p), omega, a_body


def _rngs(seed: int):
    imu_seq, cam_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(imu_seq), np.random.default_rng(cam_seq)


def synthesize_imu(spec: ScenarioSpec) -> list[ImuSample]:
    rng, _ = _rngs(spec.seed)
    nz = spec.noise
    dt = 1.0 / spec.imu_rate
    period = spec.imu_period_ns
    bg = np.zeros(3)
    ba = np.zeros(3)
    out = []
    for k in range(spec.num_imu):
        t_ns = k * period
        _, omega, a_body = analytic_trajectory(spec, t_ns / NS)
        n = rng.standard_normal(12)
        gyro = omega + bg + nz.sigma_g / np.sqrt(dt) * n[:3]
        acc = a_body + ba + nz.sigma_a / np.sqrt(dt) * n[3:6]
        out.append(ImuSample(t_ns, gyro, acc))
        bg = bg + nz.sigma_bg * np.sqrt(dt) * n[6:9]
        ba = ba + nz.sigma_ba * np.sqrt(dt) * n[9:12]
    return out


def ground_truth(spec: ScenarioSpec):
    """(t_ns, NavState) at every IMU sample time."""
    period = spec.imu_period_ns
    return [(k * period, analytic_trajectory(spec, k * period / NS)[0]) for k in range(spec.num_imu)]


def _clip_segment_2d(a, b, xmin, ymin, xmax, ymax):
    """Liang-Barsky clip; None when the segment misses the box."""
    d = b - a
    t0, t1 = 0.0, 1.0
    for p, q in ((-d[0], a[0] - xmin), (d[0], xmax - a[0]), (-d[1], a[1] - ymin), (d[1], ymax - a[1])):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return a + t0 * d, a + t1 * d


def observe_segment(cam: CameraModel, R_wb, p_wb, ps, pe, margin: float = EDGE_MARGIN_PX):
    """Noiseless clipped pixel segment of a world segment, or None if unseen."""
    R_wc, C = cam.pose_in_world(R_wb, p_wb)
    Xs = R_wc.T @ (np.asarray(ps) - C)
    Xe = R_wc.T @ (np.asarray(pe) - C)
    if Xs[2] < NEAR_PLANE and Xe[2] < NEAR_PLANE:
        return None
    if Xs[2] < NEAR_PLANE or Xe[2] < NEAR_PLANE:
        s = (NEAR_PLANE - Xs[2]) / (Xe[2] - Xs[2])
        X_cut = Xs + s * (Xe - Xs)
        if Xs[2] < NEAR_PLANE:
            Xs = X_cut
        else:
            Xe = X_cut
    a = cam.project_point(Xs)
    b = cam.project_point(Xe)
    clipped = _clip_segment_2d(a, b, margin, margin, cam.width - margin, cam.height - margin)
    if clipped is None:
        return None
    a, b = clipped
    if np.linalg.norm(b - a) < MIN_SEGMENT_PX:
        return None
    return a, b


def synthesize_tracks(spec: ScenarioSpec) -> list[LineTrack]:
    _, rng = _rngs(spec.seed)
    cam = spec.camera
    out = []
    for f in range(spec.num_frames):
        t_ns = f * spec.cam_period_ns
        x, _, _ = analytic_trajectory(spec, t_ns / NS)
        for tid, (ps, pe) in enumerate(spec.lines):
            seg = observe_segment(cam, x.R, x.p, ps, pe)
            if seg is None:
                continue
            noise = spec.sigma_px * rng.standard_normal(4)
            a = np.clip(seg[0] + noise[:2], 0.0, [cam.width, cam.height])
            b = np.clip(seg[1] + noise[2:], 0.0, [cam.width, cam.height])
            out.append(LineTrack(t_ns, tid, a, b))
    return out


# --- scenario files ------------------------------------------------------------

SCENARIO_KEYS = {
    "family": str,
    "duration": float,
    "imu_rate": float,
    "cam_rate": float,
    "seed": int,
    "sigma_px": float,
    "radius": float,
    "angular_rate": float,
    "height": float,
    "amplitude": list,
    "frequency": list,
    "lines": list,
    "noise": dict,
    "filter": dict,
}
NOISE_FIELDS = ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba")


def scenario_from_dict(raw: dict) -> tuple[ScenarioSpec, dict]:
    """ScenarioSpec plus the ``filter`` overrides to write into config.json.

    Every key is optional.  ``lines`` is a list of 6-number rows
    ``[x1, y1, z1, x2, y2, z2]``; ``noise`` holds sigma_g, sigma_a, sigma_bg,
    sigma_ba and optionally gravity.
    """
    if not isinstance(raw, dict):
        raise SchemaError("<root>", "scenario must be a JSON object")
    kw = {}
    for key, val in raw.items():
        if key not in SCENARIO_KEYS:
            raise SchemaError(key, "unknown key")
        want = SCENARIO_KEYS[key]
        if want is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise SchemaError(key, f"expected a number, got {val!r}")
            val = float(val)
        elif want is int:
            if isinstance(val, bool) or not isinstance(val, int) or val < 0:
                raise SchemaError(key, f"expected a non-negative integer, got {val!r}")
        elif not isinstance(val, want):
            raise SchemaError(key, f"expected {want.__name__}")
        kw[key] = val
    filter_overrides = kw.pop("filter", {})
    if "noise" in kw:
        nz = kw.pop("noise")
        extra = set(nz) - set(NOISE_FIELDS) - {"gravity"}
        if extra:
            raise SchemaError(f"noise.{sorted(extra)[0]}", "unknown key")
        args = {k: float(nz[k]) for k in NOISE_FIELDS if k in nz}
        if "gravity" in nz:
            g = nz["gravity"]
            if not (isinstance(g, list) and len(g) == 3):
                raise SchemaError("noise.gravity", "expected 3 numbers")
            args["gravity"] = np.array(g, float)
        try:
            kw["noise"] = NoiseParams(**args)
        except (TypeError, ValueError) as e:
            raise SchemaError("noise", str(e)) from None
    if "lines" in kw:
        rows = kw["lines"]
        if not all(isinstance(r, list) and len(r) == 6 for r in rows):
            raise SchemaError("lines", "each line must be [x1, y1, z1, x2, y2, z2]")
        kw["lines"] = [(np.array(r[:3], float), np.array(r[3:], float)) for r in rows]
    for key in ("amplitude", "frequency"):
        if key in kw:
            if len(kw[key]) != 3:
                raise SchemaError(key, "expected 3 numbers")
            kw[key] = tuple(float(x) for x in kw[key])
    try:
        spec = ScenarioSpec(**kw)
    except ValueError as e:
        raise SchemaError("<root>", str(e)) from None
    return spec, filter_overrides
