"""Plücker line algebra, pinhole line projection and two-view triangulation.

A Plücker line is stored as a 6-vector ``(n, v)``: ``n`` is the moment (normal
of the plane through the line and the origin), ``v`` the direction.  Most
functions broadcast over leading dimensions so the filter can evaluate many
cubature points in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .liegroup import so3_exp


class DegenerateGeometry(ValueError):
    """Configuration where a line quantity is undefined."""


@dataclass(frozen=True)
class CameraModel:
    fu: float
    fv: float
    cu: float
    cv: float
    width: int = 752
    height: int = 480
    # camera frame -> IMU frame
    R_ic: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_ic: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu], [0.0, self.fv, self.cv], [0.0, 0.0, 1.0]])

    @property
    def line_K(self) -> np.ndarray:
        fu, fv, cu, cv = self.fu, self.fv, self.cu, self.cv
        return np.array([[fv, 0.0, 0.0], [0.0, fu, 0.0], [-fv * cu, -fu * cv, fu * fv]])

    def pose_in_world(self, R_wb: np.ndarray, p_wb: np.ndarray):
        """Camera-to-world rotation and camera centre for a body pose."""
        R_wb = np.asarray(R_wb, float)
        return R_wb @ self.R_ic, np.asarray(p_wb, float) + R_wb @ self.p_ic

    def backproject(self, uv) -> np.ndarray:
        """Normalized image-plane coordinates (x, y, 1) of pixels."""
        uv = np.asarray(uv, float)
        x = (uv[..., 0] - self.cu) / self.fu
        y = (uv[..., 1] - self.cv) / self.fv
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def project_point(self, Xc) -> np.ndarray:
        Xc = np.asarray(Xc, float)
        return np.stack(
            [self.fu * Xc[..., 0] / Xc[..., 2] + self.cu, self.fv * Xc[..., 1] / Xc[..., 2] + self.cv],
            axis=-1,
        )


def plucker_from_points(p1, p2) -> np.ndarray:
    """Line through two points; 3-vectors are taken as finite points (w = 1)."""
    p1 = np.asarray(p1, float)
    p2 = np.asarray(p2, float)
    if p1.shape[-1] == 3:
        p1 = np.concatenate([p1, np.ones(p1.shape[:-1] + (1,))], axis=-1)
    if p2.shape[-1] == 3:
        p2 = np.concatenate([p2, np.ones(p2.shape[:-1] + (1,))], axis=-1)
    x1, w1 = p1[..., :3], p1[..., 3:]
    x2, w2 = p2[..., :3], p2[..., 3:]
    n = np.cross(x1, x2)
    v = w1 * x2 - w2 * x1
    L = np.concatenate([n, v], axis=-1)
    scale = np.linalg.norm(p1, axis=-1) * np.linalg.norm(p2, axis=-1)
    if np.any(np.linalg.norm(L, axis=-1) <= 1e-12 * scale):
        raise DegenerateGeometry("points are projectively equal")
    return L


def transform_plucker(R, t, L) -> np.ndarray:
    """Apply X -> R X + t to a line."""
    R = np.asarray(R, float)
    t = np.asarray(t, float)
    L = np.asarray(L, float)
    Rn = np.einsum("...ij,...j->...i", R, L[..., :3])
    Rv = np.einsum("...ij,...j->...i", R, L[..., 3:])
    return np.concatenate([Rn + np.cross(t, Rv), Rv], axis=-1)


def world_to_camera(R_wc, C):
    """Rotation and translation of the world->camera transform."""
    R_cw = np.swapaxes(np.asarray(R_wc, float), -1, -2)
    return R_cw, -np.einsum("...ij,...j->...i", R_cw, np.asarray(C, float))


def project_plucker(cam: CameraModel, Lc, check: bool = True) -> np.ndarray:
    """Homogeneous image line of a camera-frame line; only the moment is used."""
    n = np.asarray(Lc, float)[..., :3]
    if check and np.any(np.linalg.norm(n, axis=-1) < 1e-12):
        raise DegenerateGeometry("line passes through the camera centre")
    return np.einsum("ij,...j->...i", cam.line_K, n)


def line_residual(l, s_s, s_e, check: bool = True) -> np.ndarray:
    """Signed distances (px) of two segment endpoints from image line l."""
    l = np.asarray(l, float)
    norm = np.hypot(l[..., 0], l[..., 1])
    if check and np.any(norm == 0):
        raise DegenerateGeometry("image line at infinity")
    s_s = np.asarray(s_s, float)
    s_e = np.asarray(s_e, float)
    ds = l[..., 0] * s_s[..., 0] + l[..., 1] * s_s[..., 1] + l[..., 2]
    de = l[..., 0] * s_e[..., 0] + l[..., 1] * s_e[..., 1] + l[..., 2]
    return np.stack([ds / norm, de / norm], axis=-1)


def _cross(a, b) -> np.ndarray:
    """Cross product of two 3-vectors without np.cross's broadcasting overhead."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def plane_from_segment(cam: CameraModel, R_wc, C, a, b) -> np.ndarray:
    """Plane through the camera centre and the back-projected segment a-b."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if abs(a[0] - b[0]) <= 1e-8 and abs(a[1] - b[1]) <= 1e-8:
        raise DegenerateGeometry("segment endpoints coincide")
    C = np.asarray(C, float)
    ra = np.array([(a[0] - cam.cu) / cam.fu, (a[1] - cam.cv) / cam.fv, 1.0])
    rb = np.array([(b[0] - cam.cu) / cam.fu, (b[1] - cam.cv) / cam.fv, 1.0])
    nc = _cross(ra, rb)
    if nc @ nc < 1e-24 * (ra @ ra) * (rb @ rb):
        raise DegenerateGeometry("camera centre and segment are collinear")
    normal = np.asarray(R_wc, float) @ nc
    return np.array([normal[0], normal[1], normal[2], -(normal @ C)])


@dataclass(frozen=True)
class View:
    """One observation of a segment: camera pose in world and pixel endpoints."""

    R_wc: np.ndarray
    C: np.ndarray
    a: np.ndarray
    b: np.ndarray


def plane_angle(pi1, pi2) -> float:
    u1, u2 = pi1[:3], pi2[:3]
    c = _cross(u1, u2)
    return float(np.arctan2(np.sqrt(c @ c), abs(u1 @ u2)))


def triangulate_line(cam: CameraModel, view1: View, view2: View, min_angle_deg: float = 1.0) -> np.ndarray:
    pi1 = plane_from_segment(cam, view1.R_wc, view1.C, view1.a, view1.b)
    pi2 = plane_from_segment(cam, view2.R_wc, view2.C, view2.a, view2.b)
    if plane_angle(pi1, pi2) < np.deg2rad(min_angle_deg):
        raise DegenerateGeometry("back-projected planes are nearly parallel")
    dual = np.outer(pi1, pi2) - np.outer(pi2, pi1)
    v = np.array([dual[2, 1], dual[0, 2], dual[1, 0]])
    n = dual[:3, 3]
    L = np.concatenate([n, v])
    L /= np.linalg.norm(v)
    # exact arithmetic gives n.v = 0; remove the rounding residue
    L[:3] -= (L[:3] @ L[3:]) * L[3:]
    return L


def _orthonormal(L):
    """(U, phi) with n = cos(phi) U[:, 0], v = sin(phi) U[:, 1] up to scale."""
    n, v = L[:3], L[3:]
    nn, vn = np.linalg.norm(n), np.linalg.norm(v)
    if nn < 1e-12:
        raise DegenerateGeometry("line through the origin has no orthonormal form")
    U = np.column_stack([n / nn, v / vn, np.cross(n, v) / (nn * vn)])
    return U, np.arctan2(vn, nn)


def _from_orthonormal(U, phi):
    return np.concatenate([np.cos(phi) * U[:, 0], np.sin(phi) * U[:, 1]])


def reprojection_residuals(cam: CameraModel, L, views) -> np.ndarray:
    """Endpoint distances (px) of every view's segment from the projection of L."""
    if not views:
        return np.zeros(0)
    R_wc = np.array([vw.R_wc for vw in views])
    C = np.array([vw.C for vw in views])
    R_cw, t = world_to_camera(R_wc, C)
    l = project_plucker(cam, transform_plucker(R_cw, t, np.broadcast_to(L, (len(views), 6))), check=False)
    a = np.array([vw.a for vw in views])
    b = np.array([vw.b for vw in views])
    return line_residual(l, a, b, check=False).ravel()


@dataclass(frozen=True)
class LineFit:
    L: np.ndarray
    # covariance of the 4 orthonormal parameters, unit pixel variance
    cov: np.ndarray
    rms_px: float
    line_of: object


def refine_line(cam: CameraModel, L, views, max_nfev: int = 50) -> LineFit:
    """Least-squares line over many views, started from L.

    Uses the 4-parameter orthonormal representation, expressed in the first
    view's camera frame so the line never passes through the origin.
    """
    ref = views[0]
    R_cw, t = world_to_camera(ref.R_wc, ref.C)
    U0, phi0 = _orthonormal(transform_plucker(R_cw, t, L))

    def line_of(x):
        out = transform_plucker(ref.R_wc, ref.C, _from_orthonormal(U0 @ so3_exp(x[:3]), phi0 + x[3]))
        return out / np.linalg.norm(out[3:])

    sol = least_squares(lambda x: reprojection_residuals(cam, line_of(x), views), np.zeros(4), max_nfev=max_nfev)
    J = sol.jac
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.full((4, 4), np.inf)
    rms = float(np.sqrt(np.mean(sol.fun**2)))
    x_opt = sol.x.copy()
    return LineFit(line_of(x_opt), cov, rms, lambda dx: line_of(x_opt + dx))


def closest_point_on_line(L, origin, direction) -> np.ndarray:
    """Point of line L closest to the ray origin + s * direction."""
    n, v = np.asarray(L[:3], float), np.asarray(L[3:], float)
    vv = v @ v
    P0 = np.cross(v, n) / vv
    u = v / np.sqrt(vv)
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    w0 = P0 - np.asarray(origin, float)
    b = u @ d
    denom = 1.0 - b * b
    if denom < 1e-12:
        raise DegenerateGeometry("viewing ray is parallel to the line")
    t = (b * (d @ w0) - (u @ w0)) / denom
    return P0 + t * u


def endpoints_from_plucker(cam: CameraModel, L, R_wc, C, a, b):
    """3D endpoints on L matching the detected segment a-b seen from (R_wc, C)."""
    R_wc = np.asarray(R_wc, float)
    ps = closest_point_on_line(L, C, R_wc @ cam.backproject(a))
    pe = closest_point_on_line(L, C, R_wc @ cam.backproject(b))
    if np.linalg.norm(ps - pe) < 1e-9:
        raise DegenerateGeometry("endpoints coincide")
    return ps, pe


def camera_frame_line(cam: CameraModel, R_wb, p_wb, ps, pe) -> np.ndarray:
    """Camera-frame Plücker line of the world segment ps-pe seen from body pose."""
    R_wc, C = cam.pose_in_world(R_wb, p_wb)
    R_cw, t = world_to_camera(R_wc, C)
    return transform_plucker(R_cw, t, plucker_from_points(ps, pe))


__all__ = [
    "CameraModel",
    "DegenerateGeometry",
    "View",
    "camera_frame_line",
    "closest_point_on_line",
    "endpoints_from_plucker",
    "line_residual",
    "plane_angle",
    "plane_from_segment",
    "plucker_from_points",
    "project_plucker",
    "LineFit",
    "refine_line",
    "reprojection_residuals",
    "transform_plucker",
    "triangulate_line",
    "world_to_camera",
]
