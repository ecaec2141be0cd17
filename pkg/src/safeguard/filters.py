"""Safety-filter controllers as small conic programs over the torque input.

Three filters share one program shape: minimize the distance to the desired
input subject to rows ``constant + linear' u - cone_coeff ||u||_2 >= 0``
inside a symmetric box.

* cbf_qp: one row from the plain safe-set function.
* bs_qp: one row per backup-flow grid node (tightened by mu) plus the
  terminal backup-set row.
* mr_bs_op: the same rows with robustness offsets, turning each row into a
  second-order cone constraint.

The scalar-torque case is solved exactly by splitting each row into two
linear inequalities; a log-barrier interior-point path handles higher input
dimensions. Infeasible programs are relaxed by one uniform slack across all
rows, reported and never hidden.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .backup_flow import constraint_data, flow_with_sensitivity, membership
from .errors import BadCombination, DimensionMismatch, MaxIterations
from .linear_control import translate_center
from .robustness import epsilon_of, mr_parameters
from .segway import POSITION


@dataclass(frozen=True)
class ConeRow:
    """One constraint row: constant + linear' u - cone_coeff ||u||_2 >= 0."""

    constant: float
    linear: np.ndarray
    cone_coeff: float = 0.0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "linear",
                           np.atleast_1d(np.asarray(self.linear, dtype=float)))
        if self.cone_coeff < 0.0:
            raise ValueError("cone coefficient must be nonnegative")

    def margin(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return self.constant + float(self.linear @ u) - self.cone_coeff * float(np.linalg.norm(u))


@dataclass(frozen=True)
class ConicProgram:
    u_desired: np.ndarray
    rows: tuple
    box: float                 # symmetric bound per input entry
    slack_weight: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "u_desired",
                           np.atleast_1d(np.asarray(self.u_desired, dtype=float)))
        object.__setattr__(self, "rows", tuple(self.rows))
        if not self.box > 0.0:
            raise ValueError("box bound must be positive")
        if not self.slack_weight > 0.0:
            raise ValueError("slack weight must be positive")

    @property
    def dim(self):
        return self.u_desired.size


@dataclass(frozen=True)
class FilterSolution:
    u: np.ndarray
    slack: float
    status: str                # optimal | relaxed | error
    active_rows: tuple
    kkt_residual: float


def assemble(kind, x_hat, y, cd, mu, params_ab, alpha_gain, u_desired,
             torque_limit, slack_weight=1e4):
    """Build the conic program for one controller kind at one estimate.

    cbf_qp uses only the grid's tau=0 row (identity sensitivity), bs_qp all
    rows with the trajectory tightening, mr_bs_op additionally installs the
    per-row robustness offsets (a_r shifts the constant, b_r is the cone
    coefficient).
    """
    if kind == "cbf_qp":
        if mu > 0.0:
            raise BadCombination("cbf_qp does not take a tightening margin")
        row = ConeRow(constant=cd.lie_f[0] + alpha_gain * cd.values[0],
                      linear=cd.lie_g[0], cone_coeff=0.0, label=cd.labels[0])
        return ConicProgram(u_desired=u_desired, rows=(row,), box=torque_limit,
                            slack_weight=slack_weight)
    if kind not in ("bs_qp", "mr_bs_op"):
        raise BadCombination(f"unknown filter kind {kind!r}")

    n_rows = len(cd.labels)
    if kind == "bs_qp":
        a = np.zeros(n_rows)
        b = np.zeros(n_rows)
    else:
        a, b = params_ab
    nu = np.append(np.full(cd.n_trajectory, mu), 0.0)
    rows = []
    for r in range(n_rows):
        rows.append(ConeRow(
            constant=cd.lie_f[r] + alpha_gain * (cd.values[r] - nu[r]) - a[r],
            linear=cd.lie_g[r], cone_coeff=b[r], label=cd.labels[r]))
    return ConicProgram(u_desired=u_desired, rows=tuple(rows), box=torque_limit,
                        slack_weight=slack_weight)


def _split_bounds(p, slack=0.0):
    """Feasible interval [lo, hi] of a scalar program under a uniform slack.

    Each cone row splits into the pair constant + (linear -+ cone)*u >= 0;
    zero-slope pairs contribute pure feasibility conditions on the slack.
    """
    lo, hi = -p.box, p.box
    feasible = True
    for row in p.rows:
        c = row.constant + slack
        for s in (row.linear[0] - row.cone_coeff, row.linear[0] + row.cone_coeff):
            if s > 0.0:
                lo = max(lo, -c / s)
            elif s < 0.0:
                hi = min(hi, -c / s)
            elif c < 0.0:
                feasible = False
    return lo, hi, feasible


def _min_slack_1d(p):
    """Smallest uniform slack making the scalar program feasible (closed form).

    Lower bounds fall and upper bounds rise affinely in the slack, so the
    minimal slack is the largest pairwise crossing requirement.
    """
    lower = [(-p.box, 0.0)]   # (intercept, slope) of lo_i(delta)
    upper = [(p.box, 0.0)]
    zero_rows = []
    for row in p.rows:
        for s in (row.linear[0] - row.cone_coeff, row.linear[0] + row.cone_coeff):
            if s > 0.0:
                lower.append((-row.constant / s, -1.0 / s))
            elif s < 0.0:
                upper.append((-row.constant / s, -1.0 / s))
            else:
                zero_rows.append(-row.constant)
    delta = max(zero_rows, default=0.0)
    for a_i, b_i in lower:
        for a_j, b_j in upper:
            if b_j - b_i > 0.0:
                delta = max(delta, (a_i - a_j) / (b_j - b_i))
            elif a_i > a_j:  # parallel and ordered wrong: unfixable by slack
                return np.inf
    return max(delta, 0.0)


def solve_1d(p):
    """Exact solution of the scalar-torque conic program.

    The feasible set is an interval; the minimizer of the projection
    objective is the clamp of the desired input onto it. When empty, the
    minimal uniform slack is found in closed form and reported.
    """
    if p.dim != 1:
        raise DimensionMismatch("solve_1d requires a one-dimensional input")
    u_d = p.u_desired[0]
    lo, hi, feasible = _split_bounds(p)
    if feasible and lo <= hi:
        slack, status = 0.0, "optimal"
    else:
        slack = _min_slack_1d(p)
        status = "relaxed"
        if not np.isfinite(slack):
            return FilterSolution(u=np.array([np.clip(u_d, -p.box, p.box)]),
                                  slack=np.inf, status="error",
                                  active_rows=(), kkt_residual=np.inf)
        lo, hi, _ = _split_bounds(p, slack)
        lo, hi = min(lo, hi), max(lo, hi)
    u = float(np.clip(u_d, lo, hi))
    margins = np.array([row.margin(u) + slack for row in p.rows])
    active = tuple(row.label for row, m in zip(p.rows, margins) if m <= 1e-9)
    # Stationarity holds exactly by construction (projection onto an
    # interval), so the reported residual is the worst row violation.
    viol = max(0.0, float(-np.min(margins, initial=0.0)))
    return FilterSolution(u=np.array([u]), slack=float(slack), status=status,
                          active_rows=active, kkt_residual=viol)


class _Epigraph:
    """Epigraph formulation z = [u, t_aux, delta] with barrier calculus.

    Affine inequalities a'z + c > 0 cover the rows, the box, and the slack;
    each cone row additionally carries the quadratic term t_k^2 - ||u||^2 > 0
    (a standard second-order-cone barrier with parameter 2).
    """

    def __init__(self, p):
        self.p = p
        m = p.dim
        self.m = m
        cone_rows = [row for row in p.rows if row.cone_coeff > 0.0]
        self.n_cone = len(cone_rows)
        self.n_var = m + self.n_cone + 1
        a_list, c_list = [], []
        k = 0
        for row in p.rows:
            a = np.zeros(self.n_var)
            a[:m] = row.linear
            a[-1] = 1.0
            if row.cone_coeff > 0.0:
                a[m + k] = -row.cone_coeff
                k += 1
            a_list.append(a)
            c_list.append(row.constant)
        for i in range(m):
            for sign in (-1.0, 1.0):
                a = np.zeros(self.n_var)
                a[i] = sign
                a_list.append(a)
                c_list.append(p.box)
        a = np.zeros(self.n_var)
        a[-1] = 1.0
        a_list.append(a)
        c_list.append(0.0)
        self.A = np.array(a_list)
        self.c = np.array(c_list)
        self.nu = self.A.shape[0] + 2 * self.n_cone  # barrier parameter

    def start(self):
        z = np.zeros(self.n_var)
        z[self.m:self.m + self.n_cone] = 1.0
        z[-1] = 1.0 + max(0.0, max((-row.constant for row in self.p.rows),
                                   default=0.0))
        return z

    def terms(self, z):
        affine = self.A @ z + self.c
        u = z[:self.m]
        t_aux = z[self.m:self.m + self.n_cone]
        quad = t_aux**2 - float(u @ u)
        return affine, quad

    def objective(self, z):
        du = z[:self.m] - self.p.u_desired
        return 0.5 * float(du @ du) + self.p.slack_weight * z[-1]

    def value(self, z, t_bar):
        affine, quad = self.terms(z)
        if np.any(affine <= 0.0) or np.any(quad <= 0.0):
            return np.inf
        return t_bar * self.objective(z) - np.sum(np.log(affine)) - np.sum(np.log(quad))

    def grad_hess(self, z, t_bar):
        affine, quad = self.terms(z)
        g = np.zeros(self.n_var)
        g[:self.m] = t_bar * (z[:self.m] - self.p.u_desired)
        g[-1] = t_bar * self.p.slack_weight
        h = np.zeros((self.n_var, self.n_var))
        h[:self.m, :self.m] = t_bar * np.eye(self.m)
        g -= self.A.T @ (1.0 / affine)
        h += (self.A / affine[:, None]**2).T @ self.A
        u = z[:self.m]
        for k in range(self.n_cone):
            q = quad[k]
            gq = np.zeros(self.n_var)
            gq[:self.m] = -2.0 * u
            gq[self.m + k] = 2.0 * z[self.m + k]
            hq = np.zeros((self.n_var, self.n_var))
            hq[:self.m, :self.m] = -2.0 * np.eye(self.m)
            hq[self.m + k, self.m + k] = 2.0
            g -= gq / q
            h += -hq / q + np.outer(gq, gq) / q**2
        return g, h


def solve_general(p, tol=1e-8, max_centering=200):
    """Log-barrier interior-point solve of the multi-input program.

    Decision variables are the input, one epigraph auxiliary per cone row
    (t >= ||u||_2), and a uniform slack with linear penalty. The barrier
    path runs until the duality-gap estimate drops below tol; the solution
    is reported relaxed when the optimal slack is materially positive.
    Raises MaxIterations (best iterate attached) past the centering cap.
    """
    if p.dim < 2:
        raise DimensionMismatch("solve_general requires input dimension >= 2")
    if not 1e-10 <= tol <= 1e-6:
        raise ValueError("tol must lie in [1e-10, 1e-6]")
    epi = _Epigraph(p)
    z = epi.start()
    t_bar = 1.0
    centerings = 0
    while True:
        if centerings >= max_centering:
            raise MaxIterations("barrier solver hit the centering cap",
                                best=_finish(p, epi, z, np.inf))
        for _ in range(80):
            g, h = epi.grad_hess(z, t_bar)
            try:
                step = np.linalg.solve(h + 1e-14 * np.eye(epi.n_var), -g)
            except np.linalg.LinAlgError:
                step = -g
            decrement = float(-g @ step)
            if decrement * 0.5 < 1e-13:
                break
            base = epi.value(z, t_bar)
            alpha = 1.0
            while alpha > 1e-13 and epi.value(z + alpha * step, t_bar) > base - 0.25 * alpha * decrement:
                alpha *= 0.5
            z = z + alpha * step
        centerings += 1
        if epi.nu / t_bar <= tol:
            break
        t_bar *= 20.0
    return _finish(p, epi, z, epi.nu / t_bar)


def _finish(p, epi, z, gap):
    u = z[:epi.m]
    delta = z[-1]
    margins = np.array([row.margin(u) + delta for row in p.rows]) if p.rows else np.array([])
    active = tuple(row.label for row, mm in zip(p.rows, margins) if mm <= 1e-6)
    status = "optimal" if delta <= 1e-6 else "relaxed"
    slack = 0.0 if status == "optimal" else float(delta)
    viol = max(0.0, float(-np.min(margins, initial=0.0)))
    return FilterSolution(u=u.copy(), slack=slack, status=status,
                          active_rows=active, kkt_residual=max(gap, viol))


@dataclass(frozen=True)
class FilterContext:
    """Everything synthesized offline that a filter step needs, frozen."""

    params: object
    policy: object
    backup_set: object
    safe: object
    bundle: object
    epsilon: object            # EpsilonProvider
    mu: float
    alpha_gain: float = 1.0
    horizon: float = 1.0
    dt_int: float = 5e-3
    n_constraints: int = 4
    slack_weight: float = 1e4


@dataclass
class StepDiagnostics:
    status: str
    slack: float
    margins: np.ndarray        # row values at the applied input
    values: np.ndarray         # h-bar values at the estimate
    in_implicit_set: bool
    epsilon: float
    center: np.ndarray
    solve_time: float
    active_rows: tuple = field(default_factory=tuple)
    saturation_boundary: bool = False


def filter_step(kind, context, y, x_hat, u_desired):
    """One controller evaluation: translate, flow, assemble, solve.

    Returns (torque, diagnostics). A relaxed solve is reported in the
    diagnostics, never hidden.
    """
    t0 = time.perf_counter()
    x_hat = np.asarray(x_hat, dtype=float)
    center = translate_center(context.backup_set, context.safe, x_hat[POSITION])
    translated = context.backup_set.with_center(center)
    grid = flow_with_sensitivity(context.params, context.policy, translated,
                                 x_hat, horizon=context.horizon,
                                 dt_int=context.dt_int,
                                 n_constraints=context.n_constraints)
    cd = constraint_data(grid, context.safe, translated, context.params)
    eps = epsilon_of(context.epsilon, y)
    ab = mr_parameters(context.bundle, eps) if kind == "mr_bs_op" else None
    mu = 0.0 if kind == "cbf_qp" else context.mu
    program = assemble(kind, x_hat, y, cd, mu, ab, context.alpha_gain,
                       np.atleast_1d(u_desired), context.policy.torque_limit,
                       slack_weight=context.slack_weight)
    sol = solve_1d(program)
    member = membership(cd, mu)
    diag = StepDiagnostics(
        status=sol.status, slack=sol.slack,
        margins=np.array([row.margin(sol.u) for row in program.rows]),
        values=cd.values.copy(), in_implicit_set=member.in_set, epsilon=eps,
        center=center, solve_time=time.perf_counter() - t0,
        active_rows=sol.active_rows,
        saturation_boundary=grid.saturation_boundary)
    return float(sol.u[0]), diag
