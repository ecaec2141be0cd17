"""Backup controller synthesis: LQR gain, Lyapunov ellipsoid, and its translation.

The backup controller is a saturated LQR about the upright equilibrium. Its
region of attraction is estimated by a sublevel set of the closed-loop
Lyapunov function: an analytic level guaranteeing the torque never saturates
inside the set, shrunk by bisection until seeded boundary trajectories
certify forward invariance. The resulting ellipsoid slides along the position
axis to follow the vehicle, capped so it never leaves the safe half-space.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
from scipy.signal import place_poles

from . import segway
from .errors import EmptySet, NotHurwitz, NotStabilizable
from .segway import POSITION


def solve_lyapunov(a_cl, q):
    """Solve A' P + P A = -Q for the continuous Lyapunov matrix P.

    Backed by the Bartels-Stewart solver; the residual is verified before
    returning and P is symmetrized.
    """
    a_cl = np.asarray(a_cl, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(np.real(np.linalg.eigvals(a_cl)) >= 0.0):
        raise NotHurwitz("Lyapunov equation requires a Hurwitz matrix")
    p = scipy.linalg.solve_continuous_lyapunov(a_cl.T, -q)
    p = 0.5 * (p + p.T)
    residual = np.linalg.norm(a_cl.T @ p + p @ a_cl + q, "fro")
    if residual > 1e-9 * (1.0 + np.linalg.norm(p, "fro")):
        raise NotHurwitz(f"Lyapunov residual {residual:.3e} too large")
    return p


def _initial_stabilizing_gain(a, b):
    n = a.shape[0]
    if np.all(np.real(np.linalg.eigvals(a)) < 0.0):
        return np.zeros((b.shape[1], n))
    poles = -np.arange(1.0, n + 1.0)
    try:
        placed = place_poles(a, b, poles)
    except ValueError as exc:
        raise NotStabilizable(f"pole placement for the initial gain failed: {exc}")
    return placed.gain_matrix


def solve_care(a, b, q, r, tol=1e-10, max_iter=200):
    """Continuous algebraic Riccati equation by Newton-Kleinman iteration.

    Seeded with a stabilizing gain from pole placement; each Newton step is
    one Lyapunov solve. Raises NotStabilizable if the iteration does not
    converge or the closed loop ends up unstable.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    q = np.asarray(q, dtype=float)
    r = np.atleast_2d(np.asarray(r, dtype=float))
    r_inv = np.linalg.inv(r)

    k = _initial_stabilizing_gain(a, b)
    p = None
    for _ in range(max_iter):
        a_cl = a - b @ k
        if np.any(np.real(np.linalg.eigvals(a_cl)) >= 0.0):
            raise NotStabilizable("Newton-Kleinman iterate lost stability")
        p = solve_lyapunov(a_cl, q + k.T @ r @ k)
        k_next = r_inv @ b.T @ p
        if np.max(np.abs(k_next - k)) <= tol * (1.0 + np.max(np.abs(k_next))):
            k = k_next
            break
        k = k_next
    residual = np.linalg.norm(a.T @ p + p @ a - p @ b @ r_inv @ b.T @ p + q, "fro")
    if residual > 1e-8 * (1.0 + np.linalg.norm(p, "fro")):
        raise NotStabilizable(f"Riccati residual {residual:.3e} did not converge")
    if np.any(np.real(np.linalg.eigvals(a - b @ (r_inv @ b.T @ p))) >= 0.0):
        raise NotStabilizable("converged Riccati solution is not stabilizing")
    return p


def lqr_gain(p, b, r):
    """LQR feedback gain K = R^-1 B' P."""
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    r = np.atleast_2d(np.asarray(r, dtype=float))
    return np.linalg.inv(r) @ b.T @ np.asarray(p, dtype=float)


@dataclass(frozen=True)
class SafeSetSpec:
    """Half-space safe set: h(x) = x_max - position."""

    x_max: float = 2.0

    def value(self, s):
        return self.x_max - np.asarray(s, dtype=float)[..., POSITION]

    def gradient(self):
        return np.array([-1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class BackupPolicy:
    """Saturated LQR backup controller about the upright equilibrium."""

    gain: np.ndarray            # row of the 1x4 LQR gain matrix
    torque_limit: float
    equilibrium_template: np.ndarray  # position entry is free, rest pinned

    def __post_init__(self):
        object.__setattr__(self, "gain", np.asarray(self.gain, dtype=float))
        object.__setattr__(self, "equilibrium_template",
                           np.asarray(self.equilibrium_template, dtype=float))


@dataclass(frozen=True)
class QuadraticBackupSet:
    """Ellipsoidal backup set h_B(x) = level - (x - center)' shape (x - center)."""

    shape: np.ndarray
    level: float
    center: np.ndarray

    def __post_init__(self):
        shape = np.asarray(self.shape, dtype=float)
        if np.max(np.abs(shape - shape.T)) > 1e-12:
            raise ValueError("backup-set shape matrix must be symmetric")
        if np.min(np.linalg.eigvalsh(shape)) <= 0.0:
            raise ValueError("backup-set shape matrix must be positive definite")
        if not self.level > 0.0:
            raise ValueError("backup-set level must be positive")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    def value(self, s):
        z = np.asarray(s, dtype=float) - self.center
        return self.level - np.einsum("...i,ij,...j->...", z, self.shape, z)

    def gradient(self, s):
        z = np.asarray(s, dtype=float) - self.center
        return -2.0 * z @ self.shape

    @property
    def position_extent(self):
        """Half-width of the ellipsoid along the position axis."""
        p_inv_11 = np.linalg.inv(self.shape)[POSITION, POSITION]
        return float(np.sqrt(self.level * p_inv_11))

    def with_center(self, center):
        return replace(self, center=np.asarray(center, dtype=float))


def backup_control(policy, s, center):
    """Saturated LQR torque -K (s - center), clamped to the torque limit."""
    err = np.asarray(s, dtype=float) - np.asarray(center, dtype=float)
    raw = -err @ policy.gain
    return np.clip(raw, -policy.torque_limit, policy.torque_limit)


def translate_center(backup_set, safe, current_position):
    """Slide the ellipsoid center to the current position, capped at the wall.

    The cap keeps the whole ellipsoid inside the safe half-space:
    center position = min(current_position, x_max - position_extent).
    """
    center = backup_set.center.copy()
    center[POSITION] = np.minimum(current_position,
                                  safe.x_max - backup_set.position_extent)
    return center


def saturation_level(gain, p_lyap, torque_limit):
    """Largest Lyapunov level on which |K z| never exceeds the torque limit."""
    gain = np.asarray(gain, dtype=float)
    quad = float(gain @ np.linalg.solve(np.asarray(p_lyap, dtype=float), gain))
    return torque_limit**2 / quad


def sample_ellipsoid_boundary(p_lyap, level, n, seed):
    """Seeded states z with z' P z = level, uniformly from sphere directions."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, p_lyap.shape[0]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    scale = np.sqrt(level / np.einsum("ni,ij,nj->n", d, p_lyap, d))
    return d * scale[:, None]


def _simulate_backup_batch(params, policy, center, starts, horizon, dt):
    """Roll a batch of states under the saturated backup controller (rk4)."""
    n_steps = int(round(horizon / dt))
    xs = np.array(starts, dtype=float)
    trajectory = np.empty((n_steps + 1,) + xs.shape)
    trajectory[0] = xs
    for k in range(n_steps):
        u = backup_control(policy, xs, center)
        xs = segway.step(params, xs, u, dt, method="rk4")
        trajectory[k + 1] = xs
    return trajectory


def certify_invariance(params, policy, backup_set, safe, n_samples, seed,
                       horizon=1.0, dt=1e-3, transient=0.1):
    """Check forward invariance of the set from seeded boundary states.

    Requires h_B >= 0 along every trajectory, h >= 0 along every trajectory,
    and a monotone decrease of the Lyapunov value after the initial transient.
    """
    z = sample_ellipsoid_boundary(backup_set.shape, backup_set.level,
                                  n_samples, seed)
    starts = backup_set.center + z
    traj = _simulate_backup_batch(params, policy, backup_set.center, starts,
                                  horizon, dt)
    hb = backup_set.value(traj)
    if np.min(hb) < -1e-9:
        return False
    if np.min(safe.value(traj)) < -1e-9:
        return False
    lyap = backup_set.level - hb
    k0 = int(round(transient / dt))
    if np.any(np.diff(lyap[k0:], axis=0) > 1e-9):
        return False
    return True


def synthesize_backup_set(params, policy, p_lyap, safe, n_samples=500, seed=0,
                          horizon=1.0, dt=1e-3):
    """Pick the backup-set level: saturation bound, then bisection to certify.

    Starts from the analytic no-saturation level and halves it until the
    seeded boundary-invariance check passes. Raises EmptySet if the level
    collapses below 1e-6.
    """
    c = saturation_level(policy.gain, p_lyap, policy.torque_limit)
    center = policy.equilibrium_template.copy()
    center[POSITION] = 0.0
    while c > 1e-6:
        candidate = QuadraticBackupSet(shape=p_lyap, level=c, center=center)
        if certify_invariance(params, policy, candidate, safe, n_samples, seed,
                              horizon=horizon, dt=dt):
            return candidate
        c *= 0.5
    raise EmptySet("backup-set certification drove the level below 1e-6")


def synthesize_policy(params, q_weights=None, r_weight=1.0):
    """LQR backup policy for the upright equilibrium of the given Segway."""
    if q_weights is None:
        q_weights = np.array([1.0, 1.0, 100.0, 10.0])
    a, b = segway.linearize(params, segway.state())
    p = solve_care(a, b, np.diag(q_weights), np.atleast_2d(r_weight))
    k = lqr_gain(p, b, r_weight)[0]
    return BackupPolicy(gain=k, torque_limit=params.torque_limit,
                        equilibrium_template=segway.state())


def policy_to_dict(policy):
    return {
        "gain": list(policy.gain),
        "torque_limit": policy.torque_limit,
        "equilibrium_template": list(policy.equilibrium_template),
    }


def policy_from_dict(d):
    return BackupPolicy(gain=np.array(d["gain"], dtype=float),
                        torque_limit=float(d["torque_limit"]),
                        equilibrium_template=np.array(d["equilibrium_template"],
                                                      dtype=float))


def backup_set_to_dict(backup_set):
    return {
        "shape": [float(v) for v in backup_set.shape.ravel()],  # row-major
        "level": backup_set.level,
        "center": list(backup_set.center),
    }


def backup_set_from_dict(d):
    shape = np.array(d["shape"], dtype=float).reshape(4, 4)
    return QuadraticBackupSet(shape=shape, level=float(d["level"]),
                              center=np.array(d["center"], dtype=float))
