"""Planar wheeled-inverted-pendulum (Segway) dynamics in control-affine form.

The state is the 4-vector ``(position, velocity, pitch, pitch_rate)`` with
pitch measured in radians from upright (0 = upright, positive = leaning in
the driving direction). The single input is the wheel torque in N*m.

Equations of motion come from the Newton-Euler balance of the wheel/body pair
in generalized coordinates ``q = (x, psi)``::

    m_t x'' + m_b L cos(psi) psi'' - m_b L sin(psi) psi'^2 + b_w x' = u / R
    m_b L cos(psi) x'' + J_t psi'' - m_b g L sin(psi) + b_psi psi' = -u

with ``m_t = m_b + m_w`` and ``J_t = J_b + m_b L**2``. Rotor and gearbox
inertia are folded into the wheel-assembly mass. All operations broadcast
over leading axes, so a batch of states can be evaluated in one call.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import MassMatrixSingular, NonFinite

POSITION, VELOCITY, PITCH, PITCH_RATE = range(4)
STATE_DIM = 4


@dataclass(frozen=True)
class SegwayParams:
    """Physical constants of the planar Segway model (SI units)."""

    body_mass: float = 45.0
    wheel_assembly_mass: float = 5.0
    body_inertia: float = 4.0
    com_distance: float = 0.8
    wheel_radius: float = 0.2
    gravity: float = 9.81
    viscous_friction_wheel: float = 0.1
    viscous_friction_pitch: float = 0.1
    torque_limit: float = 20.0

    def __post_init__(self):
        for name in ("body_mass", "wheel_assembly_mass", "body_inertia",
                     "com_distance", "wheel_radius", "gravity", "torque_limit"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"SegwayParams.{name} must be strictly positive")
        for name in ("viscous_friction_wheel", "viscous_friction_pitch"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"SegwayParams.{name} must be nonnegative")

    @property
    def total_mass(self):
        return self.body_mass + self.wheel_assembly_mass

    @property
    def total_inertia(self):
        return self.body_inertia + self.body_mass * self.com_distance**2

    def frictionless(self):
        return replace(self, viscous_friction_wheel=0.0, viscous_friction_pitch=0.0)


def state(position=0.0, velocity=0.0, pitch=0.0, pitch_rate=0.0):
    """Build a state vector; mostly sugar for tests and configs."""
    return np.array([position, velocity, pitch, pitch_rate], dtype=float)


def wrap_pitch(s):
    """Normalize the pitch entry to [-pi, pi)."""
    out = np.array(s, dtype=float, copy=True)
    out[..., PITCH] = (out[..., PITCH] + np.pi) % (2.0 * np.pi) - np.pi
    return out


def _mass_terms(params, pitch):
    """Mass-matrix entries and determinant at the given pitch (broadcasts)."""
    mbl = params.body_mass * params.com_distance
    m_off = mbl * np.cos(pitch)
    det = params.total_mass * params.total_inertia - m_off**2
    return m_off, det


def _check_det(det):
    if np.any(np.abs(det) < 1e-12):
        raise MassMatrixSingular("mass-matrix determinant below 1e-12")


def _solve_accel(params, pitch, r1, r2):
    """Solve M(pitch) @ (xdd, pitchdd) = (r1, r2) by the closed-form inverse."""
    m_off, det = _mass_terms(params, pitch)
    _check_det(det)
    xdd = (params.total_inertia * r1 - m_off * r2) / det
    pitchdd = (-m_off * r1 + params.total_mass * r2) / det
    return xdd, pitchdd


def drift(params, s):
    """Unforced state derivative f(x) of the control-affine model."""
    s = np.asarray(s, dtype=float)
    v = s[..., VELOCITY]
    psi = s[..., PITCH]
    omega = s[..., PITCH_RATE]
    mbl = params.body_mass * params.com_distance
    r1 = mbl * np.sin(psi) * omega**2 - params.viscous_friction_wheel * v
    r2 = (params.body_mass * params.gravity * params.com_distance * np.sin(psi)
          - params.viscous_friction_pitch * omega)
    xdd, pitchdd = _solve_accel(params, psi, r1, r2)
    out = np.stack([v, xdd, omega, pitchdd], axis=-1)
    if not np.all(np.isfinite(out)):
        raise NonFinite("drift produced non-finite entries")
    return out


def actuation(params, s):
    """Input direction g(x); depends on pitch only."""
    s = np.asarray(s, dtype=float)
    psi = s[..., PITCH]
    one = np.ones_like(psi)
    xdd, pitchdd = _solve_accel(params, psi, one / params.wheel_radius, -one)
    zero = np.zeros_like(psi)
    out = np.stack([zero, xdd, zero, pitchdd], axis=-1)
    if not np.all(np.isfinite(out)):
        raise NonFinite("actuation produced non-finite entries")
    return out


def deriv(params, s, u):
    """Full state derivative f(x) + g(x) u (u broadcasts against batches)."""
    u = np.asarray(u, dtype=float)
    return drift(params, s) + actuation(params, s) * u[..., None]


def drift_jacobian(params, s):
    """Analytic Jacobian of drift with respect to the state (broadcasts)."""
    s = np.asarray(s, dtype=float)
    v = s[..., VELOCITY]
    psi = s[..., PITCH]
    omega = s[..., PITCH_RATE]
    mbl = params.body_mass * params.com_distance
    sin_p = np.sin(psi)
    cos_p = np.cos(psi)
    m_off, det = _mass_terms(params, psi)
    _check_det(det)

    r1 = mbl * sin_p * omega**2 - params.viscous_friction_wheel * v
    r2 = (params.body_mass * params.gravity * params.com_distance * sin_p
          - params.viscous_friction_pitch * omega)
    d1 = (params.total_inertia * r1 - m_off * r2) / det
    d2 = (-m_off * r1 + params.total_mass * r2) / det

    def solve(b1, b2):
        return ((params.total_inertia * b1 - m_off * b2) / det,
                (-m_off * b1 + params.total_mass * b2) / det)

    # d/dv and d/domega act on the right-hand side only.
    dv1, dv2 = solve(-params.viscous_friction_wheel * np.ones_like(psi),
                     np.zeros_like(psi))
    dw1, dw2 = solve(2.0 * mbl * sin_p * omega,
                     -params.viscous_friction_pitch * np.ones_like(psi))
    # d/dpsi also moves the mass matrix: dD = M^-1 (dr/dpsi - dM/dpsi D).
    dM_off = -mbl * sin_p
    dr1 = mbl * cos_p * omega**2 - dM_off * d2
    dr2 = params.body_mass * params.gravity * params.com_distance * cos_p - dM_off * d1
    dp1, dp2 = solve(dr1, dr2)

    J = np.zeros(s.shape[:-1] + (4, 4))
    J[..., POSITION, VELOCITY] = 1.0
    J[..., PITCH, PITCH_RATE] = 1.0
    J[..., VELOCITY, VELOCITY] = dv1
    J[..., VELOCITY, PITCH] = dp1
    J[..., VELOCITY, PITCH_RATE] = dw1
    J[..., PITCH_RATE, VELOCITY] = dv2
    J[..., PITCH_RATE, PITCH] = dp2
    J[..., PITCH_RATE, PITCH_RATE] = dw2
    return J


def actuation_jacobian(params, s):
    """Analytic Jacobian of g(x); only the pitch column is nonzero."""
    s = np.asarray(s, dtype=float)
    psi = s[..., PITCH]
    mbl = params.body_mass * params.com_distance
    m_off, det = _mass_terms(params, psi)
    _check_det(det)
    one = np.ones_like(psi)
    g1 = (params.total_inertia * one / params.wheel_radius + m_off) / det
    g2 = (-m_off / params.wheel_radius - params.total_mass) / det
    # dg/dpsi = -M^-1 (dM/dpsi) g
    dM_off = -mbl * np.sin(psi)
    b1 = -dM_off * g2
    b2 = -dM_off * g1
    dg1 = (params.total_inertia * b1 - m_off * b2) / det
    dg2 = (-m_off * b1 + params.total_mass * b2) / det

    J = np.zeros(s.shape[:-1] + (4, 4))
    J[..., VELOCITY, PITCH] = dg1
    J[..., PITCH_RATE, PITCH] = dg2
    return J


def linearize(params, s_eq):
    """Linearization (A, B) of the unforced dynamics about a state."""
    A = drift_jacobian(params, s_eq)
    B = actuation(params, s_eq)
    return A, B


def step(params, s, u, dt, method="rk4"):
    """One explicit integration step with the torque clamped to the limit.

    Pitch is renormalized to [-pi, pi) after the step. ``method`` is
    ``"euler"`` or ``"rk4"``; rk4 is the ground-truth integrator, Euler
    matches the backup-flow discretization.
    """
    s = np.asarray(s, dtype=float)
    if dt < 0.0:
        raise ValueError("dt must be nonnegative")
    if dt == 0.0:
        return s.copy()
    u = np.clip(np.asarray(u, dtype=float), -params.torque_limit, params.torque_limit)
    if method == "euler":
        out = s + dt * deriv(params, s, u)
    elif method == "rk4":
        k1 = deriv(params, s, u)
        k2 = deriv(params, s + 0.5 * dt * k1, u)
        k3 = deriv(params, s + 0.5 * dt * k2, u)
        k4 = deriv(params, s + dt * k3, u)
        out = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        raise ValueError(f"unknown integration method {method!r}")
    if not np.all(np.isfinite(out)):
        raise NonFinite("integration step produced non-finite state")
    return wrap_pitch(out)


def energy(params, s):
    """Total mechanical energy; conserved by the frictionless unforced model."""
    s = np.asarray(s, dtype=float)
    v = s[..., VELOCITY]
    psi = s[..., PITCH]
    omega = s[..., PITCH_RATE]
    m_off, _ = _mass_terms(params, psi)
    kinetic = 0.5 * (params.total_mass * v**2
                     + 2.0 * m_off * v * omega
                     + params.total_inertia * omega**2)
    potential = (params.body_mass * params.gravity * params.com_distance
                 * np.cos(psi))
    return kinetic + potential
