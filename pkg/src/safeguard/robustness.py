"""Measurement-error models, Lipschitz estimation, and robustness parameters.

The filter never sees the true state, only an estimate carrying a bounded
error. Robustification needs three ingredients: the error bound itself, a
tightening constant absorbing the finite constraint grid, and Lipschitz
constants of every constraint row so the conditions checked at the estimate
transfer to the true state. Lipschitz constants are estimated by sampling
a low-discrepancy point set and taking the largest numerical gradient,
inflated by a safety factor; analytic values can be supplied instead where
they are known exactly.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import segway
from .backup_flow import rows_for_anchors
from .errors import NonFinite
from .linear_control import backup_control
from .segway import POSITION

FD_STEP = 1e-5


@dataclass(frozen=True)
class ErrorModel:
    """State-estimate error: identity, constant bias, or bounded uniform draws.

    ``directions`` records the subspace the error lives in (unit rows); the
    default is the full state space. A vision-only position error, for
    example, is the single direction e1.
    """

    kind: str = "identity"          # identity | constant_bias | bounded_uniform
    offset: np.ndarray = field(default_factory=lambda: np.zeros(4))
    radius: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("identity", "constant_bias", "bounded_uniform"):
            raise ValueError(f"unknown error model kind {self.kind!r}")
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        if self.kind == "bounded_uniform" and self.radius < 0.0:
            raise ValueError("bounded_uniform radius must be nonnegative")

    @property
    def worst_norm(self):
        if self.kind == "identity":
            return 0.0
        if self.kind == "constant_bias":
            return float(np.linalg.norm(self.offset))
        return self.radius

    @property
    def directions(self):
        """Orthonormal basis of the error subspace (rows)."""
        if self.kind == "constant_bias":
            n = np.linalg.norm(self.offset)
            if n > 0.0:
                return (self.offset / n)[None, :]
        return np.eye(4)

    def stream(self):
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class Measurement:
    """What the controller receives each tick: the estimate plus a model tag."""

    x_hat: np.ndarray
    tag: str


def apply_measurement(model, s_true, rng=None):
    """Corrupt the true state per the error model; returns (y, x_hat).

    bounded_uniform needs an RNG stream for sequences of draws; pass the
    run's generator, otherwise a fresh stream seeded from the model is used.
    """
    s_true = np.asarray(s_true, dtype=float)
    if model.kind == "identity":
        x_hat = s_true.copy()
    elif model.kind == "constant_bias":
        x_hat = s_true + model.offset
    else:
        if rng is None:
            rng = model.stream()
        d = rng.standard_normal(4)
        d /= np.linalg.norm(d)
        r = model.radius * rng.uniform() ** 0.25
        x_hat = s_true + r * d
    return Measurement(x_hat=x_hat, tag=model.kind), x_hat


@dataclass(frozen=True)
class EpsilonProvider:
    """Upper bound on the estimate-error norm; only the constant kind exists."""

    value: float = 0.0

    def __post_init__(self):
        if self.value < 0.0:
            raise ValueError("epsilon bound must be nonnegative")


def epsilon_of(provider, y=None):
    """The error bound for a measurement (constant provider ignores y)."""
    return provider.value


def validate_epsilon_pairing(provider, model):
    """Check the bound covers the paired error model's worst-case norm."""
    if provider.value < model.worst_norm - 1e-12:
        raise ValueError(
            f"epsilon bound {provider.value} is below the error model's "
            f"worst-case norm {model.worst_norm}")


def halton_box(box, n, seed):
    """n seeded Halton points inside an axis-aligned box (lo, hi)."""
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    engine = qmc.Halton(d=lo.size, scramble=True, seed=seed)
    return lo + engine.random(n) * (hi - lo)


def _directional_slopes(fn, points, directions, fd_step=FD_STEP):
    """Central-difference directional derivatives of fn at the points.

    fn must accept a (B, 4) batch and return (B,) or (B, m). Returns an
    array of shape (n_points, out_dim, n_directions).
    """
    n, d = points.shape[0], directions.shape[0]
    plus = (points[:, None, :] + fd_step * directions[None, :, :]).reshape(n * d, -1)
    minus = (points[:, None, :] - fd_step * directions[None, :, :]).reshape(n * d, -1)
    vals = np.asarray(fn(np.vstack([plus, minus])), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise NonFinite("field returned non-finite values during sampling")
    if vals.ndim == 1:
        vals = vals[:, None]
    m = vals.shape[1]
    vp = vals[: n * d].reshape(n, d, m)
    vm = vals[n * d:].reshape(n, d, m)
    return ((vp - vm) / (2.0 * fd_step)).transpose(0, 2, 1)


def _max_operator_norm(slopes):
    """Largest induced 2-norm over the sampled Jacobians (n, m, d)."""
    if slopes.shape[1] == 1:
        return float(np.max(np.linalg.norm(slopes[:, 0, :], axis=1)))
    return float(np.max(np.linalg.norm(slopes, ord=2, axis=(1, 2))))


def estimate_lipschitz(fn, box, n=1000, seed=0, inflation=1.0, directions=None):
    """Sampled Lipschitz constant of a field over a box.

    Takes the largest numerical gradient (2-norm; induced 2-norm for vector
    fields) over n seeded Halton points, times the inflation factor. With
    ``directions`` the gradient is restricted to that error subspace.
    Deterministic for a fixed seed.
    """
    if n < 100:
        raise ValueError("need at least 100 samples")
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    if np.any(hi <= lo):
        raise ValueError("box must be non-degenerate")
    if inflation < 1.0:
        raise ValueError("inflation factor must be >= 1")
    if directions is None:
        directions = np.eye(lo.size)
    points = halton_box(box, n, seed)
    slopes = _directional_slopes(fn, points, np.asarray(directions, dtype=float))
    return inflation * _max_operator_norm(slopes)


def sup_norm_over_box(fn, box, n=1000, seed=0, inflation=1.0):
    """Inflated max of ||fn(x)||_2 over seeded Halton samples of the box.

    Degenerate (zero-width) axes are allowed; the point set collapses onto
    the slice.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    engine = qmc.Halton(d=lo.size, scramble=True, seed=seed)
    points = lo + engine.random(n) * (hi - lo)
    vals = np.asarray(fn(points), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise NonFinite("field returned non-finite values during sampling")
    if vals.ndim == 1:
        norms = np.abs(vals)
    else:
        norms = np.linalg.norm(vals, axis=-1)
    return inflation * float(np.max(norms))


def sup_backup_speed(dyn, policy, backup_set, box, n=1000, seed=0, inflation=1.2):
    """Sup of the closed-loop speed ||f + g k_B||_2 over a box of states.

    The box's position axis is interpreted relative to the translated
    backup-set center (the backup controller only sees that offset, and the
    dynamics are position-invariant), so one box covers every translation.
    """
    center = backup_set.center

    def speed(pts):
        states = pts.copy()
        states[:, POSITION] += center[POSITION]
        u = backup_control(policy, states, center)
        return segway.deriv(dyn, states, u)

    return sup_norm_over_box(speed, box, n=n, seed=seed, inflation=inflation)


def mu_bound(delta_t, l_h, speed):
    """Minimal admissible tightening (delta_t / 2) * L_h * sup speed."""
    if delta_t < 0.0 or l_h < 0.0 or speed < 0.0:
        raise ValueError("mu bound inputs must be nonnegative")
    return 0.5 * delta_t * l_h * speed


@dataclass(frozen=True)
class LipschitzBundle:
    """Per-row Lipschitz constants plus the class-K and safe-set constants."""

    labels: tuple
    l_value: np.ndarray   # per row: constant of the row value
    l_lie_f: np.ndarray   # per row: constant of the f-Lie derivative
    l_lie_g: np.ndarray   # per row: constant of the g-Lie derivative
    l_alpha: float        # constant of the (linear) class-K function
    l_h: float            # constant of the safe-set function h

    def __post_init__(self):
        for arr in (self.l_value, self.l_lie_f, self.l_lie_g):
            if np.any(~np.isfinite(np.asarray(arr))) or np.any(np.asarray(arr) < 0):
                raise ValueError("Lipschitz constants must be finite and nonnegative")


def lipschitz_bundle(dyn, policy, backup_set, safe, box, horizon=1.0,
                     dt_int=5e-3, n_constraints=4, n_samples=2048, seed=0,
                     inflation=1.2, alpha_gain=1.0, directions=None,
                     overrides=None, secant_scale=None):
    """Estimate the Lipschitz bundle of every constraint row over a box.

    One batched flow evaluates all rows at all finite-difference points, so
    this is the same estimator as estimate_lipschitz applied per row on a
    shared point set. ``directions`` restricts the constants to an error
    subspace; ``overrides`` maps "<label>.<field>" to analytic values.

    The Euler-discretized flow rows carry O(dt) jumps where a saturation
    switch crosses a grid node; infinitesimal gradients miss them, so when
    ``secant_scale`` is given (normally the error bound itself) the
    constants also cover secant slopes at that displacement.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    if directions is None:
        directions = np.eye(4)
    directions = np.asarray(directions, dtype=float)
    points = halton_box((lo, hi), n_samples, seed)

    def all_rows(states):
        values, lie_f, lie_g = rows_for_anchors(
            dyn, policy, backup_set, safe, states, horizon=horizon,
            dt_int=dt_int, n_constraints=n_constraints)
        return np.concatenate([values, lie_f, lie_g[..., 0]], axis=1)

    slopes = _directional_slopes(all_rows, points, directions)
    if secant_scale is not None and secant_scale > 0.0:
        coarse = _directional_slopes(all_rows, points, directions,
                                     fd_step=0.5 * secant_scale)
        slopes = np.concatenate([slopes, coarse], axis=0)
    n_rows = slopes.shape[1] // 3
    l_value = np.empty(n_rows)
    l_lie_f = np.empty(n_rows)
    l_lie_g = np.empty(n_rows)
    for r in range(n_rows):
        l_value[r] = inflation * _max_operator_norm(slopes[:, r:r + 1, :])
        l_lie_f[r] = inflation * _max_operator_norm(slopes[:, n_rows + r:n_rows + r + 1, :])
        l_lie_g[r] = inflation * _max_operator_norm(slopes[:, 2 * n_rows + r:2 * n_rows + r + 1, :])
    labels = tuple(f"tau{j}" for j in range(n_rows - 1)) + ("B",)
    # h is affine with gradient (-1, 0, 0, 0): its constant is exactly 1.
    l_h = float(np.linalg.norm(safe.gradient()))
    bundle = {"l_value": l_value, "l_lie_f": l_lie_f, "l_lie_g": l_lie_g}
    for key, value in (overrides or {}).items():
        label, field_name = key.rsplit(".", 1)
        bundle["l_" + field_name][labels.index(label)] = float(value)
    return LipschitzBundle(labels=labels, l_value=bundle["l_value"],
                           l_lie_f=bundle["l_lie_f"], l_lie_g=bundle["l_lie_g"],
                           l_alpha=float(alpha_gain), l_h=l_h)


def mr_parameters(bundle, eps):
    """Per-row robustness offsets (a_r, b_r), linear in the error bound."""
    if eps < 0.0:
        raise ValueError("epsilon must be nonnegative")
    a = (bundle.l_lie_f + bundle.l_alpha * bundle.l_value) * eps
    b = bundle.l_lie_g * eps
    return a, b


def bundle_to_dict(bundle):
    rows = {}
    for i, label in enumerate(bundle.labels):
        rows[label] = {"value": float(bundle.l_value[i]),
                       "lie_f": float(bundle.l_lie_f[i]),
                       "lie_g": float(bundle.l_lie_g[i])}
    return {"rows": rows, "alpha": bundle.l_alpha, "h": bundle.l_h,
            "labels": list(bundle.labels)}


def bundle_from_dict(d):
    labels = tuple(d["labels"])
    return LipschitzBundle(
        labels=labels,
        l_value=np.array([d["rows"][k]["value"] for k in labels]),
        l_lie_f=np.array([d["rows"][k]["lie_f"] for k in labels]),
        l_lie_g=np.array([d["rows"][k]["lie_g"] for k in labels]),
        l_alpha=float(d["alpha"]), l_h=float(d["h"]))
