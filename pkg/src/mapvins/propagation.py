"""IMU state and covariance propagation between image times.

Mean integration is RK4 over the standard inertial kinematics

    dq/dt = -1/2 (w_m - bg) * q        (q maps {G}->{I})
    dp/dt = v
    dv/dt = R(q)' (a_m - ba) + g
    db/dt = 0

with the measurement pair held constant over each integration subinterval
(subintervals split at sample times; the held value is the linear
interpolant of the readings at the subinterval midpoint).  The error-state
transition matrix is integrated jointly with the mean through the
variational equation dPhi/dt = F(t) Phi, which keeps it consistent with the
nonlinear mean map to the integrator's order.  Process noise is discretized
trapezoidally per subinterval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import quat_multiply, quat_to_rot
from .state import ATT, BA, BG, IMU_DIM, POS, VEL, StateVector

DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.81])


class GapInReadings(Exception):
    """IMU readings do not cover the propagation interval."""


class NonMonotonicTime(Exception):
    """IMU timestamps are not strictly increasing, or target time is in the past."""


@dataclass
class ImuReading:
    t: float
    w: np.ndarray  # rad/s, body frame
    a: np.ndarray  # m/s^2, body frame

    def __post_init__(self):
        self.t = float(self.t)
        self.w = np.asarray(self.w, dtype=float).reshape(3)
        self.a = np.asarray(self.a, dtype=float).reshape(3)
        if not (np.isfinite(self.w).all() and np.isfinite(self.a).all()):
            raise ValueError("IMU reading has non-finite components")


@dataclass
class ImuNoiseParams:
    """Continuous-time noise densities (units: rad/s/sqrt(Hz) etc.)."""

    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_wg: float = 1.0e-5
    sigma_wa: float = 1.0e-4

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_wg", "sigma_wa"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    def continuous_Q(self) -> np.ndarray:
        return np.diag(
            np.concatenate([
                np.full(3, self.sigma_g ** 2),
                np.full(3, self.sigma_a ** 2),
                np.full(3, self.sigma_wg ** 2),
                np.full(3, self.sigma_wa ** 2),
            ])
        )


@dataclass
class PropagationInfo:
    """Accumulated transition matrix and discrete noise over the interval."""

    Phi: np.ndarray
    Qd: np.ndarray


def _error_state_F(R_GtoI: np.ndarray, w_hat: np.ndarray, a_hat: np.ndarray) -> np.ndarray:
    F = np.zeros((IMU_DIM, IMU_DIM))
    F[ATT, ATT] = -_skew(w_hat)
    F[ATT, BG] = -np.eye(3)
    F[POS, VEL] = np.eye(3)
    F[VEL, ATT] = -R_GtoI.T @ _skew(a_hat)
    F[VEL, BA] = -R_GtoI.T
    return F


def _noise_G(R_GtoI: np.ndarray) -> np.ndarray:
    G = np.zeros((IMU_DIM, 12))
    G[ATT, 0:3] = -np.eye(3)
    G[VEL, 3:6] = -R_GtoI.T
    G[BG, 6:9] = np.eye(3)
    G[BA, 9:12] = np.eye(3)
    return G


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _rk4_step(q, p, v, Phi, w_hat, a_hat, g, dt):
    """One RK4 step of the mean and the variational equation."""

    def deriv(qs, vs, Phis):
        qn = qs / np.linalg.norm(qs)
        R = quat_to_rot(qn)
        dq = -0.5 * quat_multiply(np.array([w_hat[0], w_hat[1], w_hat[2], 0.0]), qs)
        dv = R.T @ a_hat + g
        dPhi = _error_state_F(R, w_hat, a_hat) @ Phis
        return dq, vs, dv, dPhi

    k1q, k1p, k1v, k1P = deriv(q, v, Phi)
    k2q, k2p, k2v, k2P = deriv(q + 0.5 * dt * k1q, v + 0.5 * dt * k1v, Phi + 0.5 * dt * k1P)
    k3q, k3p, k3v, k3P = deriv(q + 0.5 * dt * k2q, v + 0.5 * dt * k2v, Phi + 0.5 * dt * k2P)
    k4q, k4p, k4v, k4P = deriv(q + dt * k3q, v + dt * k3v, Phi + dt * k3P)

    q1 = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    p1 = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    v1 = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    Phi1 = Phi + dt / 6.0 * (k1P + 2 * k2P + 2 * k3P + k4P)
    return q1 / np.linalg.norm(q1), p1, v1, Phi1


def propagate(state: StateVector, readings, to_time: float, noise: ImuNoiseParams,
              gravity=DEFAULT_GRAVITY, coverage_tol: float = 0.02,
              max_gap: float = 0.1) -> PropagationInfo:
    """Propagate the state mean and covariance to ``to_time`` in place.

    Clone and landmark blocks are updated through the accumulated
    cross-covariance multiplication only.  Returns the accumulated
    transition matrix and discrete noise for the interval.
    """
    t0 = state.time
    t1 = float(to_time)
    if t1 < t0:
        raise NonMonotonicTime(f"target time {t1} before state time {t0}")

    times = np.array([r.t for r in readings], dtype=float)
    if len(times) == 0:
        raise GapInReadings("no IMU readings supplied")
    if np.any(np.diff(times) <= 0):
        raise NonMonotonicTime("IMU timestamps must be strictly increasing")

    Phi_acc = np.eye(IMU_DIM)
    Qd_acc = np.zeros((IMU_DIM, IMU_DIM))

    if t1 > t0:
        if times[0] > t0 + coverage_tol or times[-1] < t1 - coverage_tol:
            raise GapInReadings(
                f"readings [{times[0]:.4f}, {times[-1]:.4f}] do not cover "
                f"[{t0:.4f}, {t1:.4f}]"
            )
        inside = times[(times > t0) & (times < t1)]
        if len(inside) > 0:
            gaps = np.diff(np.concatenate([[t0], inside, [t1]]))
            if gaps.max() > max_gap:
                raise GapInReadings(f"max gap {gaps.max():.4f}s exceeds {max_gap}s")
        knots = np.concatenate([[t0], inside, [t1]])

        ws = np.array([r.w for r in readings])
        accs = np.array([r.a for r in readings])
        g = np.asarray(gravity, dtype=float)
        Qc = noise.continuous_Q()

        q, p, v = state.imu.q, state.imu.p, state.imu.v
        bg, ba = state.imu.bg, state.imu.ba
        Phi_step = None
        for ta, tb in zip(knots[:-1], knots[1:]):
            dt = tb - ta
            if dt <= 0:
                continue
            tm = 0.5 * (ta + tb)
            w_m = np.array([np.interp(tm, times, ws[:, k]) for k in range(3)])
            a_m = np.array([np.interp(tm, times, accs[:, k]) for k in range(3)])
            w_hat = w_m - bg
            a_hat = a_m - ba

            R0 = quat_to_rot(q)
            Phi_step = np.eye(IMU_DIM)
            q, p, v, Phi_step = _rk4_step(q, p, v, Phi_step, w_hat, a_hat, g, dt)
            R1 = quat_to_rot(q)

            G0 = _noise_G(R0)
            G1 = _noise_G(R1)
            Qd = 0.5 * dt * (
                Phi_step @ G0 @ Qc @ G0.T @ Phi_step.T + G1 @ Qc @ G1.T
            )
            Phi_acc = Phi_step @ Phi_acc
            Qd_acc = Phi_step @ Qd_acc @ Phi_step.T + Qd

        state.imu.q, state.imu.p, state.imu.v = q, p, v

        n = state.dim
        P = state.P
        P[:IMU_DIM, :IMU_DIM] = Phi_acc @ P[:IMU_DIM, :IMU_DIM] @ Phi_acc.T + Qd_acc
        if n > IMU_DIM:
            P[:IMU_DIM, IMU_DIM:] = Phi_acc @ P[:IMU_DIM, IMU_DIM:]
            P[IMU_DIM:, :IMU_DIM] = P[:IMU_DIM, IMU_DIM:].T
        state._symmetrize()

    state.time = t1
    return PropagationInfo(Phi_acc, Qd_acc)
