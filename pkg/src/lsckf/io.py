"""Dataset files: IMU CSV, line-track CSV, JSON config, trajectory CSV, metrics JSON.

Column orders are fixed:

* imu:        ``timestamp_ns,wx,wy,wz,ax,ay,az`` (EuRoC layout, ``#`` header)
* tracks:     ``timestamp_ns,track_id,u1,v1,u2,v2``
* trajectory: ``t_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz`` (unit quaternion, qw >= 0)
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .filter import FilterConfig
from .imu import DEFAULT_GRAVITY, ImuSample, NoiseParams
from .lines import CameraModel

IMU_HEADER = "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]"
TRACK_HEADER = "#timestamp_ns,track_id,u1,v1,u2,v2"
TRAJ_HEADER = "#t_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz"


@dataclass(frozen=True)
class LineTrack:
    """One tracked segment in one frame; endpoints in undistorted pixels."""

    t_ns: int
    track_id: int
    start: np.ndarray
    end: np.ndarray


class ParseError(ValueError):
    """Malformed input file; message carries the location."""

    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.path = str(path)
        self.line = line


class SchemaError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


def _fmt(x: float) -> str:
    return repr(float(x))


def _rows(path):
    """Yield (line number, fields) for non-comment, non-blank lines."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as e:
        raise ParseError(path, None, f"cannot open: {e.strerror}") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            yield lineno, [f.strip() for f in s.split(",")]


def _int(path, lineno, s):
    try:
        return int(s)
    except ValueError:
        raise ParseError(path, lineno, f"not an integer: {s!r}") from None


def _floats(path, lineno, items):
    try:
        vals = [float(s) for s in items]
    except ValueError:
        raise ParseError(path, lineno, f"non-numeric field in {items}") from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(path, lineno, "non-finite value")
    return vals


# --- IMU -------------------------------------------------------------------


def parse_imu_csv(path) -> list[ImuSample]:
    out: list[ImuSample] = []
    last = None
    for lineno, f in _rows(path):
        if len(f) != 7:
            raise ParseError(path, lineno, f"expected 7 fields, got {len(f)}")
        t = _int(path, lineno, f[0])
        vals = _floats(path, lineno, f[1:])
        if last is not None and t <= last:
            raise ParseError(path, lineno, f"timestamp {t} not after {last}")
        last = t
        out.append(ImuSample(t, np.array(vals[:3]), np.array(vals[3:])))
    return out


def write_imu_csv(path, samples) -> None:
    with _open_w(path) as fh:
        fh.write(IMU_HEADER + "\n")
        for s in samples:
            fh.write(",".join([str(int(s.t_ns))] + [_fmt(x) for x in (*s.gyro, *s.accel)]) + "\n")


# --- line tracks -------------------------------------------------------------


def parse_line_tracks(path, width: float | None = None, height: float | None = None) -> list[LineTrack]:
    out: list[LineTrack] = []
    seen = set()
    last_t = None
    for lineno, f in _rows(path):
        if len(f) != 6:
            raise ParseError(path, lineno, f"expected 6 fields, got {len(f)}")
        t = _int(path, lineno, f[0])
        tid = _int(path, lineno, f[1])
        u1, v1, u2, v2 = _floats(path, lineno, f[2:])
        if last_t is not None and t < last_t:
            raise ParseError(path, lineno, f"timestamp {t} before {last_t}")
        last_t = t
        if (t, tid) in seen:
            raise ParseError(path, lineno, f"duplicate track {tid} at {t}")
        seen.add((t, tid))
        if u1 == u2 and v1 == v2:
            raise ParseError(path, lineno, "zero-length segment")
        if width is not None and height is not None:
            for u, v in ((u1, v1), (u2, v2)):
                if not (0 <= u <= width and 0 <= v <= height):
                    raise ParseError(path, lineno, f"pixel ({u}, {v}) outside {width}x{height} image")
        out.append(LineTrack(t, tid, np.array([u1, v1]), np.array([u2, v2])))
    return out


def write_line_tracks(path, tracks) -> None:
    with _open_w(path) as fh:
        fh.write(TRACK_HEADER + "\n")
        for tr in tracks:
            vals = [_fmt(x) for x in (*tr.start, *tr.end)]
            fh.write(",".join([str(int(tr.t_ns)), str(int(tr.track_id))] + vals) + "\n")


# --- config ------------------------------------------------------------------

CAMERA_KEYS = ("fu", "fv", "cu", "cv", "width", "height")
NOISE_KEYS = ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "sigma_px")
FILTER_KEYS = tuple(f.name for f in fields(FilterConfig) if f.name != "sigma_px")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _number(cfg, key, positive=False, nonneg=False):
    if key not in cfg:
        raise SchemaError(key, "missing")
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SchemaError(key, f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise SchemaError(key, "must be positive")
    if nonneg and not v >= 0:
        raise SchemaError(key, "must be non-negative")
    return v


def _vector(cfg, key, n):
    v = cfg[key]
    if not isinstance(v, list) or len(v) != n:
        raise SchemaError(key, f"expected a list of {n} numbers")
    for i, x in enumerate(v):
        _number({f"{key}[{i}]": x}, f"{key}[{i}]")
    return np.array(v, float)


def parse_config(path):
    """(CameraModel, NoiseParams, FilterConfig) from a JSON config file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ParseError(path, None, f"cannot read: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, f"invalid JSON: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ParseError(path, None, "top level must be an object")
    return config_from_dict(raw)


def config_from_dict(raw: dict):
    cfg = _flatten(raw)
    known = {f"camera.{k}" for k in CAMERA_KEYS} | {f"noise.{k}" for k in NOISE_KEYS}
    known |= {f"filter.{k}" for k in FILTER_KEYS} | {"T_IC", "gravity"}
    for key in cfg:
        if key not in known:
            raise SchemaError(key, "unknown key")

    cam_vals = {k: _number(cfg, f"camera.{k}", positive=True) for k in CAMERA_KEYS}
    if "T_IC" not in cfg:
        raise SchemaError("T_IC", "missing")
    T = _vector(cfg, "T_IC", 16).reshape(4, 4)
    R = T[:3, :3]
    if not np.allclose(T[3], [0, 0, 0, 1], atol=1e-9):
        raise SchemaError("T_IC", "last row must be 0 0 0 1")
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
        raise SchemaError("T_IC", "rotation block is not in SO(3)")
    cam = CameraModel(**cam_vals, R_ic=R.copy(), p_ic=T[:3, 3].copy())

    nz = {k: _number(cfg, f"noise.{k}", nonneg=True) for k in NOISE_KEYS}
    gravity = _vector(cfg, "gravity", 3) if "gravity" in cfg else np.array(DEFAULT_GRAVITY)
    noise = NoiseParams(nz["sigma_g"], nz["sigma_a"], nz["sigma_bg"], nz["sigma_ba"], gravity)

    fc = FilterConfig(sigma_px=nz["sigma_px"])
    for k in FILTER_KEYS:
        key = f"filter.{k}"
        if key in cfg:
            default = getattr(fc, k)
            if isinstance(default, bool):
                if not isinstance(cfg[key], bool):
                    raise SchemaError(key, f"expected true/false, got {cfg[key]!r}")
                setattr(fc, k, cfg[key])
                continue
            val = _number(cfg, key, nonneg=True)
            if isinstance(default, int) and not isinstance(default, bool):
                if int(val) != val:
                    raise SchemaError(key, "expected an integer")
                val = int(val)
            setattr(fc, k, val)
    return cam, noise, fc


def config_to_dict(cam: CameraModel, noise: NoiseParams, fc: FilterConfig) -> dict:
    T = np.eye(4)
    T[:3, :3] = cam.R_ic
    T[:3, 3] = cam.p_ic
    out = {f"camera.{k}": getattr(cam, k) for k in CAMERA_KEYS}
    out["T_IC"] = [float(x) for x in T.ravel()]
    for k in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
        out[f"noise.{k}"] = getattr(noise, k)
    out["noise.sigma_px"] = fc.sigma_px
    out["gravity"] = [float(x) for x in noise.gravity]
    for k, v in asdict(fc).items():
        if k != "sigma_px":
            out[f"filter.{k}"] = v
    return out


def write_config(path, cam, noise, fc) -> None:
    with _open_w(path) as fh:
        json.dump(config_to_dict(cam, noise, fc), fh, indent=2)
        fh.write("\n")


# --- trajectories & metrics ----------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRecord:
    t_ns: int
    p: np.ndarray
    R: np.ndarray
    v: np.ndarray


def rot_to_quat(R) -> np.ndarray:
    """(w, x, y, z) with w >= 0."""
    x, y, z, w = Rotation.from_matrix(R).as_quat(canonical=True)
    return np.array([w, x, y, z])


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def write_trajectory(path, records) -> None:
    with _open_w(path) as fh:
        fh.write(TRAJ_HEADER + "\n")
        for r in records:
            q = rot_to_quat(r.R)
            vals = [_fmt(x) for x in (*r.p, *q, *r.v)]
            fh.write(",".join([str(int(r.t_ns))] + vals) + "\n")


def parse_trajectory(path) -> list[TrajectoryRecord]:
    out = []
    last = None
    for lineno, f in _rows(path):
        if len(f) != 11:
            raise ParseError(path, lineno, f"expected 11 fields, got {len(f)}")
        t = _int(path, lineno, f[0])
        vals = _floats(path, lineno, f[1:])
        if last is not None and t <= last:
            raise ParseError(path, lineno, f"timestamp {t} not after {last}")
        last = t
        q = np.array(vals[3:7])
        nq = np.linalg.norm(q)
        if abs(nq - 1.0) > 1e-6:
            raise ParseError(path, lineno, f"quaternion norm {nq} is not 1")
        out.append(TrajectoryRecord(t, np.array(vals[:3]), quat_to_rot(q / nq), np.array(vals[7:])))
    return out


def write_metrics(path, metrics: dict) -> None:
    with _open_w(path) as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics(path) -> dict:
    return json.loads(Path(path).read_text())


# --- dataset directory -------------------------------------------------------

IMU_FILE = "imu.csv"
TRACKS_FILE = "tracks.csv"
CONFIG_FILE = "config.json"
GROUNDTRUTH_FILE = "groundtruth.csv"


@dataclass
class DatasetBundle:
    imu: list
    tracks: list
    camera: CameraModel
    noise: NoiseParams
    config: FilterConfig
    groundtruth: list | None = None


def load_bundle(directory) -> DatasetBundle:
    """Read imu.csv, tracks.csv, config.json and (if present) groundtruth.csv."""
    d = Path(directory)
    cam, noise, fc = parse_config(d / CONFIG_FILE)
    imu = parse_imu_csv(d / IMU_FILE)
    if len(imu) < 2:
        raise ParseError(d / IMU_FILE, None, "need at least two samples")
    tracks = parse_line_tracks(d / TRACKS_FILE, cam.width, cam.height)
    lo, hi = imu[0].t_ns, imu[-1].t_ns
    for tr in tracks:
        if not lo <= tr.t_ns <= hi:
            raise ParseError(d / TRACKS_FILE, None, f"frame at {tr.t_ns} ns outside the IMU span [{lo}, {hi}]")
    gt_path = d / GROUNDTRUTH_FILE
    gt = parse_trajectory(gt_path) if gt_path.exists() else None
    return DatasetBundle(imu, tracks, cam, noise, fc, gt)


def _open_w(path):
    path = Path(path)
    try:
        return path.open("w", newline="")
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from e


def write_rows(path, header: list[str], rows) -> None:
    """Plain CSV with a '#' header line, for diagnostics and error series."""
    with _open_w(path) as fh:
        fh.write("#" + ",".join(header) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])
