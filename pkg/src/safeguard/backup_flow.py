"""Backup trajectory integration with sensitivities and implicit-set data.

The implicit control-invariant set is defined by the backup flow: a state
belongs to it when the trajectory under the saturated backup controller
stays in the safe half-space for the whole horizon and ends inside the
backup ellipsoid. The filter consumes, per anchor state, the safety values
along the flow together with their Lie derivatives, obtained by chaining
the safe-set/backup-set gradients through the flow sensitivity matrices.

The backup-set center is frozen at its anchor translation for the whole
flow, which keeps the closed loop autonomous and differentiable.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import segway
from ._kernels import flow_extremes_kernel, flow_kernel, flow_kernel_batch
from .errors import NonFinite
from .segway import POSITION


def _params_vec(params):
    return np.array([params.body_mass, params.wheel_assembly_mass,
                     params.body_inertia, params.com_distance,
                     params.wheel_radius, params.gravity,
                     params.viscous_friction_wheel,
                     params.viscous_friction_pitch])


def grid_times(horizon, dt_int, n_constraints):
    """Constraint-grid step indices and times, snapped to the Euler grid.

    The nominal grid j * horizon / (n_constraints - 1) rarely lands on
    integer multiples of dt_int, so each node snaps to the nearest Euler
    step; endpoints are exact. Returns (indices, taus, n_steps).
    """
    if horizon == 0.0:
        return np.array([0], dtype=np.int64), np.array([0.0]), 0
    ratio = horizon / dt_int
    n_steps = int(round(ratio))
    if abs(ratio - n_steps) > 1e-9 * max(1.0, ratio):
        raise ValueError("horizon must be an integer multiple of dt_int")
    if n_constraints < 2:
        raise ValueError("n_constraints must be at least 2")
    if n_steps < n_constraints - 1:
        raise ValueError("integration grid too coarse for the constraint grid")
    idx = np.round(np.arange(n_constraints) * n_steps / (n_constraints - 1))
    idx = idx.astype(np.int64)
    return idx, idx * dt_int, n_steps


@dataclass(frozen=True)
class FlowGrid:
    """Backup-flow samples and sensitivities on the constraint grid."""

    taus: np.ndarray           # (N,) strictly increasing, taus[0]=0, last=horizon
    states: np.ndarray         # (N, 4) flow states at taus
    sensitivities: np.ndarray  # (N, 4, 4) Jacobians of the discrete flow
    anchor: np.ndarray         # state the flow started from
    dt_int: float
    horizon: float
    saturation_boundary: bool = False  # a recorded node sat on the clamp switch

    def __post_init__(self):
        if self.taus[0] != 0.0 or np.any(np.diff(self.taus) <= 0.0):
            raise ValueError("taus must be strictly increasing from 0")
        if abs(self.taus[-1] - self.horizon) > 1e-12:
            raise ValueError("last tau must equal the horizon")


def flow_with_sensitivity(dyn, policy, backup_set, x0, horizon=1.0,
                          dt_int=5e-3, n_constraints=4):
    """Integrate the backup flow and its sensitivity from one anchor.

    The backup set must already be translated for this anchor; its center
    is held fixed along the flow. Raises NonFinite if the integration blows
    up; the saturation_boundary flag marks one-sided sensitivities at nodes
    landing on a clamp switch.
    """
    x0 = np.asarray(x0, dtype=float)
    idx, taus, n_steps = grid_times(horizon, dt_int, n_constraints)
    states, sens, sat, finite = flow_kernel(
        _params_vec(dyn), policy.gain, backup_set.center, policy.torque_limit,
        x0, dt_int, n_steps, idx)
    if not finite:
        raise NonFinite("backup flow produced non-finite values")
    return FlowGrid(taus=taus, states=states, sensitivities=sens, anchor=x0,
                    dt_int=dt_int, horizon=horizon, saturation_boundary=bool(sat))


@dataclass(frozen=True)
class ConstraintData:
    """Implicit-set constraint rows evaluated at one anchor.

    Trajectory rows hold h at each grid node; the final row holds the
    terminal backup-set value. Gradients are chained through the flow
    sensitivities, so lie_f/lie_g are Lie derivatives along the anchor's
    own dynamics.
    """

    values: np.ndarray   # (R,)
    lie_f: np.ndarray    # (R,)
    lie_g: np.ndarray    # (R, m)
    labels: tuple        # row identities; trajectory rows then "B"
    taus: np.ndarray     # (R-1,) grid times of the trajectory rows

    @property
    def n_trajectory(self):
        return len(self.labels) - 1


def constraint_data(grid, safe, backup_set, dyn):
    """Assemble constraint rows (values and Lie derivatives) from a flow."""
    f_anchor = segway.drift(dyn, grid.anchor)
    g_anchor = segway.actuation(dyn, grid.anchor)

    traj_values = safe.value(grid.states)
    traj_grads = -grid.sensitivities[:, POSITION, :]  # affine h: grad h = -e1

    z_t = grid.states[-1] - backup_set.center
    grad_b = -2.0 * backup_set.shape @ z_t
    row_b = grad_b @ grid.sensitivities[-1]
    value_b = backup_set.value(grid.states[-1])

    grads = np.vstack([traj_grads, row_b])
    values = np.append(traj_values, value_b)
    lie_f = grads @ f_anchor
    lie_g = (grads @ g_anchor)[:, None]
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(lie_f))
            and np.all(np.isfinite(lie_g))):
        raise NonFinite("constraint data contains non-finite entries")
    labels = tuple(f"tau{j}" for j in range(len(grid.taus))) + ("B",)
    return ConstraintData(values=values, lie_f=lie_f, lie_g=lie_g,
                          labels=labels, taus=grid.taus)


@dataclass(frozen=True)
class Membership:
    in_set: bool
    margins: np.ndarray  # tightened trajectory margins (value - mu), then h_B


def membership(cd, mu=0.0):
    """Implicit-set membership of the anchor (untightened), with margins.

    Membership itself uses the raw values; mu only shifts the reported
    trajectory margins for diagnostics.
    """
    n = cd.n_trajectory
    in_set = bool(np.all(cd.values[:n] >= 0.0) and cd.values[n] >= 0.0)
    margins = np.append(cd.values[:n] - mu, cd.values[n])
    return Membership(in_set=in_set, margins=margins)


def dense_flow_extremes(dyn, policy, backup_set, x0, horizon=1.0, dt=1e-4):
    """Max position along a dense backup flow and its terminal state.

    Independent-oracle helper: re-simulates the flow on a fine grid so
    implicit-set decisions can be cross-checked against the definition.
    """
    n_steps = int(round(horizon / dt))
    max_pos, x_t = flow_extremes_kernel(
        _params_vec(dyn), policy.gain, backup_set.center, policy.torque_limit,
        np.asarray(x0, dtype=float), dt, n_steps)
    return max_pos, x_t


def rows_for_anchors(dyn, policy, backup_set, safe, anchors, horizon=1.0,
                     dt_int=5e-3, n_constraints=4, translate=True):
    """Constraint rows for a batch of anchors (values, lie_f, lie_g).

    Each anchor gets its own translated center, mirroring what the filter
    does one anchor at a time. Returns arrays of shape (B, R), (B, R),
    (B, R, 1) with R = n_constraints + 1.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if translate:
        cap = safe.x_max - backup_set.position_extent
        centers = np.broadcast_to(backup_set.center, anchors.shape).copy()
        centers[:, POSITION] = np.minimum(anchors[:, POSITION], cap)
    else:
        centers = np.broadcast_to(backup_set.center, anchors.shape).copy()
    idx, taus, n_steps = grid_times(horizon, dt_int, n_constraints)
    states, sens, finite = flow_kernel_batch(
        _params_vec(dyn), policy.gain, centers, policy.torque_limit,
        anchors, dt_int, n_steps, idx)
    if not np.all(finite):
        raise NonFinite("batched backup flow produced non-finite values")

    f_anchor = segway.drift(dyn, anchors)        # (B, 4)
    g_anchor = segway.actuation(dyn, anchors)    # (B, 4)

    traj_grads = -sens[:, :, POSITION, :]        # (B, N, 4)
    z_t = states[:, -1, :] - centers
    grad_b = -2.0 * z_t @ backup_set.shape
    row_b = np.einsum("bi,bij->bj", grad_b, sens[:, -1])
    grads = np.concatenate([traj_grads, row_b[:, None, :]], axis=1)  # (B,R,4)

    traj_values = safe.value(states)             # (B, N)
    zp = np.einsum("bi,ij,bj->b", z_t, backup_set.shape, z_t)
    values = np.concatenate([traj_values, (backup_set.level - zp)[:, None]], axis=1)
    lie_f = np.einsum("brj,bj->br", grads, f_anchor)
    lie_g = np.einsum("brj,bj->br", grads, g_anchor)[..., None]
    return values, lie_f, lie_g


def flowgrid_to_csv(grid, path):
    """Debug dump: one row per tau with the state and row-major sensitivity."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau"] + [f"state{i}" for i in range(4)]
                        + [f"S{i}{j}" for i in range(4) for j in range(4)])
        for tau, x, s in zip(grid.taus, grid.states, grid.sensitivities):
            writer.writerow([repr(float(tau))] + [repr(float(v)) for v in x]
                            + [repr(float(v)) for v in s.ravel()])
