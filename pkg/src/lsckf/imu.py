"""IMU measurement model and the zero-order-hold strapdown step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .liegroup import hat, project_to_so3, so3_exp, so3_left_jacobian

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)
# polar re-projection period for integrated rotations
REORTHONORMALIZE_EVERY = 1000


@dataclass(frozen=True)
class ImuSample:
    t_ns: int
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])

    @classmethod
    def from_vector(cls, b) -> ImuBias:
        b = np.asarray(b, float)
        return cls(b[:3].copy(), b[3:6].copy())


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities.

    sigma_g [rad/s/sqrt(Hz)], sigma_a [m/s^2/sqrt(Hz)] are white measurement
    noise; sigma_bg, sigma_ba drive the bias random walks.
    """

    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_bg: float = 1.9393e-5
    sigma_ba: float = 3.0e-3
    gravity: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GRAVITY))

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")

    def input_sqrt(self, dt: float) -> np.ndarray:
        """Square-root covariance of the discrete gyro/accel white noise."""
        return np.diag([self.sigma_g] * 3 + [self.sigma_a] * 3) / np.sqrt(dt)

    def bias_walk_sqrt(self, dt: float) -> np.ndarray:
        return np.diag([self.sigma_bg] * 3 + [self.sigma_ba] * 3) * np.sqrt(dt)


@dataclass(frozen=True)
class NavState:
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray


def correct_measurement(sample: ImuSample, bias: ImuBias, noise=None):
    """Body rate and specific force with bias and (optional) noise removed."""
    n = np.zeros(6) if noise is None else np.asarray(noise, float)
    omega = np.asarray(sample.gyro, float) - bias.gyro - n[:3]
    a_body = np.asarray(sample.accel, float) - bias.accel - n[3:]
    return omega, a_body


def propagate_nav(x: NavState, omega, a_body, g, dt: float) -> NavState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    a_w = x.R @ np.asarray(a_body, float) + np.asarray(g, float)
    R = x.R @ so3_exp(np.asarray(omega, float) * dt)
    v = x.v + a_w * dt
    p = x.p + x.v * dt + 0.5 * a_w * dt * dt
    return NavState(R, v, p)


def propagate_bias(b: ImuBias, n_b, dt: float) -> ImuBias:
    if not dt > 0:
        raise ValueError("dt must be positive")
    return ImuBias.from_vector(b.vector() + np.asarray(n_b, float) * dt)


def propagate_nav_batch(R, v, p, omega, a_body, g, dt: float):
    """Vectorized propagate_nav over N states: R (N,3,3), v, p, omega, a_body (N,3)."""
    a_w = (R @ a_body[..., None])[..., 0] + g
    R_new = R @ so3_exp(omega * dt)
    return R_new, v + a_w * dt, p + v * dt + 0.5 * a_w * dt * dt


class DeadReckoner:
    """Chains propagate_nav with the periodic re-orthonormalization policy."""

    def __init__(self, x: NavState, bias: ImuBias | None = None, gravity=DEFAULT_GRAVITY):
        self.x = x
        self.bias = bias or ImuBias()
        self.g = np.asarray(gravity, float)
        self.steps = 0

    def step(self, sample: ImuSample, dt: float) -> NavState:
        omega, a_body = correct_measurement(sample, self.bias)
        x = propagate_nav(self.x, omega, a_body, self.g, dt)
        self.steps += 1
        if self.steps % REORTHONORMALIZE_EVERY == 0:
            x = NavState(project_to_so3(x.R), x.v, x.p)
        self.x = x
        return x


def _right_jacobian(phi) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(phi, float))


@dataclass
class Preintegration:
    """IMU increments between two instants, linearized in the bias.

    With R_{k+1} = R_k dR, v_{k+1} = v_k + g dt + R_k dv and
    p_{k+1} = p_k + v_k dt + g dt^2/2 + R_k dp.  ``bias`` is the linearization
    point; ``corrected`` applies first-order bias updates.
    """

    bias: np.ndarray
    dt: float = 0.0
    dR: np.ndarray = field(default_factory=lambda: np.eye(3))
    dv: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # d(log dR)/dbg, d(dv)/d(bg, ba), d(dp)/d(bg, ba)
    J_R: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v: np.ndarray = field(default_factory=lambda: np.zeros((3, 6)))
    J_p: np.ndarray = field(default_factory=lambda: np.zeros((3, 6)))

    def integrate(self, gyro, accel, dt: float) -> None:
        if not dt > 0:
            raise ValueError("dt must be positive")
        w = np.asarray(gyro, float) - self.bias[:3]
        a = np.asarray(accel, float) - self.bias[3:]
        dRa = self.dR @ hat(a)
        self.dp = self.dp + self.dv * dt + 0.5 * self.dR @ a * dt * dt
        self.J_p = self.J_p + self.J_v * dt
        self.J_p[:, :3] -= 0.5 * dRa @ self.J_R * dt * dt
        self.J_p[:, 3:] -= 0.5 * self.dR * dt * dt
        self.dv = self.dv + self.dR @ a * dt
        self.J_v[:, :3] -= dRa @ self.J_R * dt
        self.J_v[:, 3:] -= self.dR * dt
        step = so3_exp(w * dt)
        self.J_R = step.T @ self.J_R - _right_jacobian(w * dt) * dt
        self.dR = self.dR @ step
        self.dt += dt

    def corrected(self, bias):
        db = np.asarray(bias, float) - self.bias
        return self.dR @ so3_exp(self.J_R @ db[:3]), self.dv + self.J_v @ db, self.dp + self.J_p @ db


def chain_backward(R, v, p, increments, bias, gravity=DEFAULT_GRAVITY):
    """States before each increment, walking back from (R, v, p).

    ``increments`` is in time order; the result lists the state at the start
    of each increment, in the same order.
    """
    g = np.asarray(gravity, float)
    out = []
    for pre in reversed(increments):
        dR, dv, dp = pre.corrected(bias)
        R = R @ dR.T
        v = v - g * pre.dt - R @ dv
        p = p - v * pre.dt - 0.5 * g * pre.dt**2 - R @ dp
        out.append((R, v, p))
    return out[::-1]
