"""Deterministic closed-loop simulation of the filtered Segway.

Ground truth advances with rk4 at a fine step while the controller runs at
a fixed rate with zero-order hold, seeing only the corrupted state estimate.
Every tick is logged (states, commands, solver status, constraint margins)
so safety outcomes can be evaluated offline and runs can be reproduced
bit-for-bit from their configuration.
"""

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import segway
from .errors import EmptyLog, NonFinite
from .filters import filter_step
from .linear_control import translate_center
from .robustness import EpsilonProvider, ErrorModel, apply_measurement
from .segway import PITCH, PITCH_RATE, POSITION, VELOCITY


@dataclass(frozen=True)
class ScenarioConfig:
    """One closed-loop experiment: controller, error injection, command."""

    controller: str = "mr_bs_op"      # cbf_qp | bs_qp | mr_bs_op | none
    error_model: ErrorModel = field(default_factory=ErrorModel)
    epsilon: EpsilonProvider = field(default_factory=lambda: EpsilonProvider(0.4))
    v_desired: tuple = ((0.0, 1.0),)  # piecewise-constant (t_from, value)
    duration: float = 8.0
    control_rate: float = 250.0
    truth_dt: float = 1e-3
    initial_state: np.ndarray = field(default_factory=segway.state)
    pd_gains: tuple = (3.0, 160.0, 30.0)  # velocity, pitch, pitch-rate
    seed: int = 0

    def __post_init__(self):
        if self.controller not in ("cbf_qp", "bs_qp", "mr_bs_op", "none"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if not self.duration > 0.0:
            raise ValueError("duration must be positive")
        period = 1.0 / self.control_rate
        ratio = period / self.truth_dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("control period must be a multiple of truth_dt")
        object.__setattr__(self, "initial_state",
                           np.asarray(self.initial_state, dtype=float))
        object.__setattr__(self, "v_desired",
                           tuple((float(t), float(v)) for t, v in self.v_desired))

    def v_desired_at(self, t):
        value = self.v_desired[0][1]
        for t_from, v in self.v_desired:
            if t >= t_from - 1e-12:
                value = v
        return value


def nominal_command(cfg, x_hat, v_des):
    """PD velocity-tracking command with pitch stabilization.

    The velocity error enters with the drive-toward-the-fall sign this
    non-minimum-phase plant needs (accelerating forward starts by pitching
    forward), and positive pitch gains are stabilizing under this torque
    convention (positive torque pitches the body back).
    """
    k_v, k_pitch, k_rate = cfg.pd_gains
    return (k_v * (x_hat[VELOCITY] - v_des) + k_pitch * x_hat[PITCH]
            + k_rate * x_hat[PITCH_RATE])


@dataclass
class SimLog:
    """Per-tick record of a scenario run."""

    t: np.ndarray
    true: np.ndarray
    est: np.ndarray
    u_des: np.ndarray
    u_applied: np.ndarray
    slack: np.ndarray
    status: list
    margins: np.ndarray         # row margins at the applied input
    h_true: np.ndarray
    h_est: np.ndarray
    hb_true: np.ndarray
    margin_labels: tuple
    error: str = ""

    def __len__(self):
        return self.t.size


def run_scenario(cfg, context):
    """Run one scenario; bitwise deterministic for a fixed (cfg, context).

    The loop per control tick is measure -> nominal command -> filter ->
    hold the torque while the true state advances at the fine step. On a
    non-finite failure the partial log is returned with an error marker.
    """
    steps_per_tick = int(round(1.0 / cfg.control_rate / cfg.truth_dt))
    n_ticks = int(round(cfg.duration * cfg.control_rate))
    n_rows = context.n_constraints + 1
    labels = tuple(f"tau{j}" for j in range(context.n_constraints)) + ("B",)

    run_context = replace(context, epsilon=cfg.epsilon)
    rng = cfg.error_model.stream()
    x_true = cfg.initial_state.copy()

    t_arr = np.empty(n_ticks)
    true_arr = np.empty((n_ticks, 4))
    est_arr = np.empty((n_ticks, 4))
    u_des_arr = np.empty(n_ticks)
    u_app_arr = np.empty(n_ticks)
    slack_arr = np.zeros(n_ticks)
    status = []
    margins_arr = np.full((n_ticks, n_rows), np.nan)
    hb_true_arr = np.empty(n_ticks)
    error = ""

    filled = 0
    for tick in range(n_ticks):
        t = tick / cfg.control_rate
        try:
            y, x_hat = apply_measurement(cfg.error_model, x_true, rng)
            u_des = nominal_command(cfg, x_hat, cfg.v_desired_at(t))
            if cfg.controller == "none":
                u = float(np.clip(u_des, -context.policy.torque_limit,
                                  context.policy.torque_limit))
                tick_status = "none"
                tick_slack = 0.0
                center = translate_center(context.backup_set, context.safe,
                                          x_true[POSITION])
                tick_margins = np.full(n_rows, np.nan)
            else:
                u, diag = filter_step(cfg.controller, run_context, y, x_hat, u_des)
                tick_status = diag.status
                tick_slack = diag.slack
                tick_margins = diag.margins
                center = diag.center
            t_arr[tick] = t
            true_arr[tick] = x_true
            est_arr[tick] = x_hat
            u_des_arr[tick] = u_des
            u_app_arr[tick] = u
            slack_arr[tick] = tick_slack
            status.append(tick_status)
            margins_arr[tick] = tick_margins
            hb_true_arr[tick] = context.backup_set.with_center(center).value(x_true)
            filled = tick + 1
            for _ in range(steps_per_tick):
                x_true = segway.step(context.params, x_true, u, cfg.truth_dt,
                                     method="rk4")
        except NonFinite as exc:
            error = f"non-finite state at t={t:.4f}: {exc}"
            break

    sl = slice(0, filled)
    safe = context.safe
    return SimLog(t=t_arr[sl], true=true_arr[sl], est=est_arr[sl],
                  u_des=u_des_arr[sl], u_applied=u_app_arr[sl],
                  slack=slack_arr[sl], status=status,
                  margins=margins_arr[sl], h_true=safe.value(true_arr[sl]),
                  h_est=safe.value(est_arr[sl]), hb_true=hb_true_arr[sl],
                  margin_labels=labels, error=error)


@dataclass(frozen=True)
class SafetyReport:
    min_h_true: float
    min_h_est: float
    first_violation_time: float | None
    max_slack: float
    relaxed_tick_count: int
    ticks: int
    error: str = ""

    def to_dict(self):
        return {"min_h_true": self.min_h_true, "min_h_est": self.min_h_est,
                "first_violation_time": self.first_violation_time,
                "max_slack": self.max_slack,
                "relaxed_tick_count": self.relaxed_tick_count,
                "ticks": self.ticks, "error": self.error}


def evaluate_safety(log, safe=None):
    """Summarize a run: worst margins and the interpolated violation time."""
    if len(log) == 0:
        raise EmptyLog("cannot evaluate an empty simulation log")
    h_true = log.h_true
    first_violation = None
    below = np.nonzero(h_true < 0.0)[0]
    if below.size:
        k = int(below[0])
        if k == 0:
            first_violation = float(log.t[0])
        else:
            h0, h1 = h_true[k - 1], h_true[k]
            frac = h0 / (h0 - h1)
            first_violation = float(log.t[k - 1] + frac * (log.t[k] - log.t[k - 1]))
    return SafetyReport(
        min_h_true=float(np.min(h_true)),
        min_h_est=float(np.min(log.h_est)),
        first_violation_time=first_violation,
        max_slack=float(np.max(log.slack, initial=0.0)),
        relaxed_tick_count=int(np.sum([s == "relaxed" for s in log.status])),
        ticks=len(log), error=log.error)


def _worker_count():
    cap = os.environ.get("SAFEGUARD_THREADS")
    if cap:
        return max(1, int(cap))
    return min(8, os.cpu_count() or 1)


def sweep_epsilon(cfg, context, eps_values, parallel=False):
    """Independent runs per error bound; reports returned in input order."""
    eps_values = list(eps_values)
    if any(e < 0.0 for e in eps_values):
        raise ValueError("epsilon values must be nonnegative")

    def one(eps):
        run_cfg = replace(cfg, epsilon=EpsilonProvider(eps))
        log = run_scenario(run_cfg, context)
        return eps, evaluate_safety(log)

    if parallel:
        with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
            return list(pool.map(one, eps_values))
    return [one(e) for e in eps_values]


CSV_FIXED_COLUMNS = ["t", "x_true", "v_true", "pitch_true", "pitchrate_true",
                     "x_est", "v_est", "pitch_est", "pitchrate_est",
                     "u_des", "u_applied", "slack", "status",
                     "h_true", "h_est", "hB_true"]


def log_to_csv(log, path_or_buffer):
    """Write the SimLog in the fixed column order (margins last)."""
    own = isinstance(path_or_buffer, (str, os.PathLike))
    fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIXED_COLUMNS
                        + [f"margin_{lab}" for lab in log.margin_labels])
        for i in range(len(log)):
            row = [repr(float(log.t[i]))]
            row += [repr(float(v)) for v in log.true[i]]
            row += [repr(float(v)) for v in log.est[i]]
            row += [repr(float(log.u_des[i])), repr(float(log.u_applied[i])),
                    repr(float(log.slack[i])), log.status[i],
                    repr(float(log.h_true[i])), repr(float(log.h_est[i])),
                    repr(float(log.hb_true[i]))]
            row += [repr(float(v)) for v in log.margins[i]]
            writer.writerow(row)
    finally:
        if own:
            fh.close()


def log_to_csv_string(log):
    buf = io.StringIO()
    log_to_csv(log, buf)
    return buf.getvalue()
