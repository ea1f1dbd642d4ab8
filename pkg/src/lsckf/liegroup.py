"""SO(3) and the block group SE_k(3) that carries the filter state.

An element of SE_k(3) is a rotation plus k translation-like columns.  For the
VIO state k = 2 + 2m: velocity, position, then the two endpoints of each of the
m line landmarks.  The tangent vector is ordered the same way: rotation (3),
then one 3-block per column.

All functions accept leading batch dimensions where it is cheap to do so; the
filter relies on that to push every cubature point through exp/log at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-6
# beyond this angle the skew part of R is too small to recover the axis from
NEAR_PI = np.pi - 1e-2


class DomainError(ValueError):
    """Input outside the domain where a map is well defined."""


def hat(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _coefficients(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series fallback near zero."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    # half-angle form avoids the cancellation in 1 - cos(t)
    b = np.where(small, 0.5 - t2 / 24.0, 0.5 * (np.sin(0.5 * t) / (0.5 * t)) ** 2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; works on (..., 3) arrays."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _coefficients(theta)
    K = hat(phi)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _coefficients(theta)
    K = hat(phi)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    # t sin(t) / (2 (1 - cos t)) = (t/2) cot(t/2), without the 1 - cos t cancellation
    h = 0.5 * t
    d = np.where(small, 1.0 / 12.0 + theta * theta / 720.0, (1.0 - h / np.tan(h)) / (t * t))
    K = hat(phi)
    return np.eye(3) - 0.5 * K + d[..., None, None] * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R, (..., 3, 3) -> (..., 3).

    Raises DomainError for rotation angles within 1e-6 of pi, where the axis
    sign is not determined by R.
    """
    R = np.asarray(R, dtype=float)
    w = vee(R - np.swapaxes(R, -1, -2))  # 2 sin(t) * axis
    s = 0.5 * np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta > np.pi - SMALL_ANGLE):
        raise DomainError("rotation angle too close to pi for a unique log")
    small = theta < SMALL_ANGLE
    s_safe = np.where(small, 1.0, s)
    scale = np.where(small, 0.5 * (1.0 + theta * theta / 6.0), theta / (2.0 * s_safe))
    phi = scale[..., None] * w

    near = theta > NEAR_PI
    if np.any(near):
        # axis from the symmetric part, sign from the skew part
        Rn = R[near]
        B = 0.5 * (Rn + np.swapaxes(Rn, -1, -2)) - c[near][:, None, None] * np.eye(3)
        k = np.argmax(np.diagonal(B, axis1=-2, axis2=-1), axis=-1)
        col = B[np.arange(len(k)), :, k]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.sign(np.einsum("ij,ij->i", axis, w[near]))
        sign = np.where(sign == 0, 1.0, sign)
        phi[near] = (sign * theta[near])[:, None] * axis
    return phi


def project_to_so3(R: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.ones(R.shape[:-2] + (3,))
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


@dataclass(frozen=True)
class GroupState:
    """Element of SE_k(3): rotation R and k columns stored as a (k, 3) array.

    Column order is velocity, position, then (start, end) endpoint pairs of
    each line landmark.
    """

    R: np.ndarray
    cols: np.ndarray

    @property
    def k(self) -> int:
        return self.cols.shape[0]

    @property
    def num_lines(self) -> int:
        return (self.k - 2) // 2

    @property
    def v(self) -> np.ndarray:
        return self.cols[0]

    @property
    def p(self) -> np.ndarray:
        return self.cols[1]

    def line(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.cols[2 + 2 * i], self.cols[3 + 2 * i]

    @property
    def tangent_dim(self) -> int:
        return 3 + 3 * self.k

    @classmethod
    def identity(cls, num_lines: int = 0) -> GroupState:
        return cls(np.eye(3), np.zeros((2 + 2 * num_lines, 3)))

    @classmethod
    def from_nav(cls, R, v, p, lines=()) -> GroupState:
        cols = [np.asarray(v, float), np.asarray(p, float)]
        for ps, pe in lines:
            cols += [np.asarray(ps, float), np.asarray(pe, float)]
        return cls(np.asarray(R, float), np.array(cols))

    def matrix(self) -> np.ndarray:
        """The (3+k)x(3+k) embedding with identity lower-right block."""
        k = self.k
        M = np.eye(3 + k)
        M[:3, :3] = self.R
        M[:3, 3:] = self.cols.T
        return M

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> GroupState:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3].copy(), M[:3, 3:].T.copy())


def _check_same_k(a: GroupState, b: GroupState) -> None:
    if a.k != b.k:
        raise ValueError(f"group dimension mismatch: {a.k} columns vs {b.k}")


def group_compose(a: GroupState, b: GroupState) -> GroupState:
    _check_same_k(a, b)
    return GroupState(a.R @ b.R, b.cols @ a.R.T + a.cols)


def group_inverse(a: GroupState) -> GroupState:
    return GroupState(a.R.T, -a.cols @ a.R)


def group_exp(xi: np.ndarray, num_lines: int | None = None) -> GroupState:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1 or (xi.size - 3) % 6 != 0 or xi.size < 9:
        raise ValueError(f"tangent vector length {xi.size} is not 6m+9")
    if num_lines is not None and xi.size != 6 * num_lines + 9:
        raise ValueError(f"tangent vector length {xi.size} != 6*{num_lines}+9")
    R, cols = exp_batch(xi[None])
    return GroupState(R[0], cols[0])


def group_log(x: GroupState) -> np.ndarray:
    return log_batch(x.R[None], x.cols[None])[0]


# batched forms used by the filter: R is (N, 3, 3), cols is (N, k, 3),
# tangent vectors are (N, 3 + 3k)


def exp_batch(xi: np.ndarray):
    n = xi.shape[0]
    phi = xi[:, :3]
    rho = xi[:, 3:].reshape(n, -1, 3)
    R = so3_exp(phi)
    J = so3_left_jacobian(phi)
    return R, rho @ np.swapaxes(J, -1, -2)


def log_batch(R: np.ndarray, cols: np.ndarray) -> np.ndarray:
    n = R.shape[0]
    phi = so3_log(R)
    Jinv = so3_left_jacobian_inv(phi)
    rho = cols @ np.swapaxes(Jinv, -1, -2)
    return np.concatenate([phi, rho.reshape(n, -1)], axis=1)


def left_mult_batch(R: np.ndarray, cols: np.ndarray, mean: GroupState):
    """(R_j, cols_j) * mean for every j."""
    return R @ mean.R, mean.cols @ np.swapaxes(R, -1, -2) + cols


def right_div_batch(R: np.ndarray, cols: np.ndarray, mean: GroupState):
    """(R_j, cols_j) * mean^-1 for every j."""
    Rd = R @ mean.R.T
    return Rd, cols - mean.cols @ np.swapaxes(Rd, -1, -2)
