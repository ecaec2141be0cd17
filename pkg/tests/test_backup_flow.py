"""Tests for backup-flow integration, sensitivities, and constraint rows."""

import numpy as np
import pytest

from safeguard import segway
from safeguard.backup_flow import (constraint_data, dense_flow_extremes,
                                   flow_with_sensitivity, flowgrid_to_csv,
                                   grid_times, membership, rows_for_anchors)
from safeguard.linear_control import translate_center
from safeguard.segway import POSITION


@pytest.fixture()
def translated(scenario_context):
    def make(x0):
        center = translate_center(scenario_context.backup_set,
                                  scenario_context.safe, x0[POSITION])
        return scenario_context.backup_set.with_center(center)
    return make


def flow(ctx, translated, x0, **kw):
    bs = translated(x0)
    args = dict(horizon=ctx.horizon, dt_int=ctx.dt_int,
                n_constraints=ctx.n_constraints)
    args.update(kw)
    return bs, flow_with_sensitivity(ctx.params, ctx.policy, bs, x0, **args)


class TestGridTimes:
    def test_default_grid_snaps_to_euler_steps(self):
        idx, taus, n_steps = grid_times(1.0, 5e-3, 4)
        assert n_steps == 200
        np.testing.assert_array_equal(idx, [0, 67, 133, 200])
        np.testing.assert_allclose(taus, [0.0, 0.335, 0.665, 1.0])

    def test_zero_horizon(self):
        idx, taus, n_steps = grid_times(0.0, 5e-3, 4)
        assert list(idx) == [0] and n_steps == 0

    def test_non_integral_ratio_rejected(self):
        with pytest.raises(ValueError):
            grid_times(1.0, 3e-3, 4)


class TestFlowWithSensitivity:
    def test_zero_horizon_single_row(self, scenario_context, translated):
        x0 = segway.state(0.3, 0.2, 0.01, 0.0)
        _, grid = flow(scenario_context, translated, x0, horizon=0.0)
        assert grid.states.shape == (1, 4)
        np.testing.assert_array_equal(grid.states[0], x0)
        np.testing.assert_array_equal(grid.sensitivities[0], np.eye(4))

    def test_initial_row_is_anchor_and_identity(self, scenario_context, translated):
        x0 = segway.state(0.0, 0.5, 0.05, 0.0)
        _, grid = flow(scenario_context, translated, x0)
        np.testing.assert_array_equal(grid.states[0], x0)
        np.testing.assert_array_equal(grid.sensitivities[0], np.eye(4))

    def test_sensitivity_is_variational_product(self, scenario_context, translated):
        """S_T must equal the product of per-step Euler Jacobians."""
        ctx = scenario_context
        x0 = segway.state(0.1, 0.4, 0.03, -0.1)
        bs, grid = flow(ctx, translated, x0)
        x = x0.copy()
        s_ref = np.eye(4)
        for _ in range(200):
            raw = float(-ctx.policy.gain @ (x - bs.center))
            u = np.clip(raw, -20.0, 20.0)
            jac = (segway.drift_jacobian(ctx.params, x)
                   + u * segway.actuation_jacobian(ctx.params, x))
            if abs(raw) <= 20.0:
                jac = jac - np.outer(segway.actuation(ctx.params, x),
                                     ctx.policy.gain)
            x_next = x + ctx.dt_int * segway.deriv(ctx.params, x, u)
            s_ref = s_ref + ctx.dt_int * (jac @ s_ref)
            x = x_next
        np.testing.assert_allclose(grid.sensitivities[-1], s_ref, atol=1e-12)
        np.testing.assert_allclose(grid.states[-1], x, atol=1e-12)

    def test_sensitivity_matches_finite_differences(self, scenario_context,
                                                    translated):
        ctx = scenario_context
        x0 = segway.state(0.0, 0.5, 0.05, 0.0)
        bs, grid = flow(ctx, translated, x0)
        h = 1e-6
        s_fd = np.zeros((4, 4))
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            gp = flow_with_sensitivity(ctx.params, ctx.policy, bs, x0 + e)
            gm = flow_with_sensitivity(ctx.params, ctx.policy, bs, x0 - e)
            s_fd[:, i] = (gp.states[-1] - gm.states[-1]) / (2 * h)
        assert np.max(np.abs(s_fd - grid.sensitivities[-1])) <= 1e-5

    def test_semigroup(self, scenario_context, translated):
        """Flowing k then j steps equals flowing k+j steps."""
        ctx = scenario_context
        x0 = segway.state(0.2, 0.6, 0.02, 0.1)
        bs, grid_full = flow(ctx, translated, x0, horizon=0.4, n_constraints=2)
        bs2, grid_half = flow(ctx, translated, x0, horizon=0.2, n_constraints=2)
        # restart from the midpoint with the SAME frozen center
        grid_rest = flow_with_sensitivity(ctx.params, ctx.policy, bs,
                                          grid_half.states[-1], horizon=0.2,
                                          dt_int=ctx.dt_int, n_constraints=2)
        np.testing.assert_array_equal(grid_rest.states[-1], grid_full.states[-1])
        chained = grid_rest.sensitivities[-1] @ grid_half.sensitivities[-1]
        np.testing.assert_allclose(chained, grid_full.sensitivities[-1],
                                   atol=1e-12)

    def test_first_order_refinement(self, scenario_context, translated):
        """Halving dt changes recorded h-bar values roughly linearly."""
        ctx = scenario_context
        x0 = segway.state(0.0, 0.8, 0.0, 0.0)
        bs = translated(x0)
        values = {}
        for dt in (0.01, 0.005, 0.0025, 0.00125, 0.000625):
            grid = flow_with_sensitivity(ctx.params, ctx.policy, bs, x0,
                                         horizon=1.0, dt_int=dt, n_constraints=2)
            values[dt] = ctx.safe.value(grid.states[-1])
        ref = values[0.000625]
        errs = [abs(values[dt] - ref) for dt in (0.01, 0.005, 0.0025)]
        assert errs[0] > errs[1] > errs[2]
        # consecutive halvings shrink the error by roughly 2 (first order)
        assert 1.4 <= errs[0] / errs[1] <= 3.0
        assert 1.4 <= errs[1] / errs[2] <= 3.0


class TestConstraintData:
    def test_tau0_row_is_plain_cbf(self, scenario_context, translated):
        ctx = scenario_context
        x0 = segway.state(0.3, 0.4, 0.02, -0.1)
        bs, grid = flow(ctx, translated, x0)
        cd = constraint_data(grid, ctx.safe, bs, ctx.params)
        grad_h = ctx.safe.gradient()
        assert cd.values[0] == ctx.safe.value(x0)
        assert cd.lie_f[0] == pytest.approx(
            float(grad_h @ segway.drift(ctx.params, x0)), abs=0)
        assert cd.lie_g[0, 0] == pytest.approx(
            float(grad_h @ segway.actuation(ctx.params, x0)), abs=0)

    def test_affine_h_rowgrad_is_position_sensitivity_row(self, scenario_context,
                                                          translated):
        ctx = scenario_context
        x0 = segway.state(0.0, 0.5, 0.05, 0.0)
        bs, grid = flow(ctx, translated, x0)
        cd = constraint_data(grid, ctx.safe, bs, ctx.params)
        f0 = segway.drift(ctx.params, x0)
        g0 = segway.actuation(ctx.params, x0)
        for j in range(len(grid.taus)):
            rowgrad = -grid.sensitivities[j][POSITION]
            assert cd.lie_f[j] == pytest.approx(float(rowgrad @ f0), rel=1e-12)
            assert cd.lie_g[j, 0] == pytest.approx(float(rowgrad @ g0), rel=1e-12)

    def test_terminal_lie_f_matches_directional_difference(self, scenario_context,
                                                           translated):
        ctx = scenario_context
        x0 = segway.state(0.0, 0.5, 0.05, 0.0)
        bs, grid = flow(ctx, translated, x0)
        cd = constraint_data(grid, ctx.safe, bs, ctx.params)
        delta = 1e-6
        f0 = segway.drift(ctx.params, x0)
        step = delta * f0 / np.linalg.norm(f0)
        gp = flow_with_sensitivity(ctx.params, ctx.policy, bs, x0 + step)
        gm = flow_with_sensitivity(ctx.params, ctx.policy, bs, x0 - step)
        fd = (bs.value(gp.states[-1]) - bs.value(gm.states[-1])) / (2 * delta)
        assert abs(fd * np.linalg.norm(f0) - cd.lie_f[-1]) <= 1e-4

    def test_row_count_default(self, scenario_context, translated):
        ctx = scenario_context
        x0 = segway.state()
        bs, grid = flow(ctx, translated, x0)
        cd = constraint_data(grid, ctx.safe, bs, ctx.params)
        assert cd.labels == ("tau0", "tau1", "tau2", "tau3", "B")
        assert cd.n_trajectory == 4


class TestMembership:
    def test_rest_inside(self, scenario_context, translated):
        ctx = scenario_context
        x0 = segway.state(0.0)
        bs, grid = flow(ctx, translated, x0)
        cd = constraint_data(grid, ctx.safe, bs, ctx.params)
        assert membership(cd).in_set

    def test_outside_safe_set(self, scenario_context, translated):
        ctx = scenario_context
        x0 = segway.state(3.0)
        bs, grid = flow(ctx, translated, x0)
        cd = constraint_data(grid, ctx.safe, bs, ctx.params)
        assert not membership(cd).in_set

    def test_tightened_margins_reported(self, scenario_context, translated):
        ctx = scenario_context
        x0 = segway.state(0.0)
        bs, grid = flow(ctx, translated, x0)
        cd = constraint_data(grid, ctx.safe, bs, ctx.params)
        m = membership(cd, mu=0.25)
        np.testing.assert_allclose(m.margins[:4], cd.values[:4] - 0.25)
        assert m.margins[4] == cd.values[4]

    @pytest.mark.parametrize("x0", [
        segway.state(1.5, 1.0, 0.0, 0.0),
        segway.state(1.2, 0.4, 0.05, 0.0),
        segway.state(1.9, 0.8, 0.0, 0.0),
    ])
    def test_against_dense_oracle(self, scenario_context, translated, x0):
        """Membership must agree with a dense re-simulation of the flow."""
        ctx = scenario_context
        bs, grid = flow(ctx, translated, x0)
        cd = constraint_data(grid, ctx.safe, bs, ctx.params)
        max_pos, x_t = dense_flow_extremes(ctx.params, ctx.policy, bs, x0,
                                           horizon=ctx.horizon, dt=1e-4)
        oracle = (ctx.safe.x_max - max_pos >= 0.0) and (bs.value(x_t) >= 0.0)
        assert membership(cd).in_set == oracle


class TestBatchedRows:
    def test_matches_single_anchor_path(self, scenario_context):
        ctx = scenario_context
        anchors = np.array([[0.0, 0.5, 0.05, 0.0], [1.0, 0.2, -0.02, 0.1]])
        values, lie_f, lie_g = rows_for_anchors(
            ctx.params, ctx.policy, ctx.backup_set, ctx.safe, anchors,
            horizon=ctx.horizon, dt_int=ctx.dt_int,
            n_constraints=ctx.n_constraints)
        for i, x0 in enumerate(anchors):
            center = translate_center(ctx.backup_set, ctx.safe, x0[POSITION])
            bs = ctx.backup_set.with_center(center)
            grid = flow_with_sensitivity(ctx.params, ctx.policy, bs, x0,
                                         horizon=ctx.horizon, dt_int=ctx.dt_int,
                                         n_constraints=ctx.n_constraints)
            cd = constraint_data(grid, ctx.safe, bs, ctx.params)
            np.testing.assert_allclose(values[i], cd.values, atol=1e-12)
            np.testing.assert_allclose(lie_f[i], cd.lie_f, atol=1e-12)
            np.testing.assert_allclose(lie_g[i], cd.lie_g, atol=1e-12)


def test_flowgrid_csv_dump(tmp_path, scenario_context):
    ctx = scenario_context
    x0 = segway.state(0.0, 0.3, 0.0, 0.0)
    center = translate_center(ctx.backup_set, ctx.safe, 0.0)
    bs = ctx.backup_set.with_center(center)
    grid = flow_with_sensitivity(ctx.params, ctx.policy, bs, x0)
    path = tmp_path / "grid.csv"
    flowgrid_to_csv(grid, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:6] == ["tau", "state0", "state1", "state2",
                                       "state3", "S00"]
    assert len(lines) == 1 + len(grid.taus)
    assert len(lines[1].split(",")) == 1 + 4 + 16


def test_saturation_boundary_flag(scenario_context):
    """A recorded node sitting exactly on the clamp switch sets the flag."""
    ctx = scenario_context
    center = translate_center(ctx.backup_set, ctx.safe, 0.0)
    bs = ctx.backup_set.with_center(center)
    gain = ctx.policy.gain
    # anchor along the gain direction with raw torque exactly at the limit
    x0 = center - gain * (ctx.policy.torque_limit / float(gain @ gain))
    raw = float(-gain @ (x0 - center))
    assert raw == pytest.approx(ctx.policy.torque_limit, abs=1e-12)
    grid = flow_with_sensitivity(ctx.params, ctx.policy, bs, x0,
                                 horizon=ctx.horizon, dt_int=ctx.dt_int,
                                 n_constraints=ctx.n_constraints)
    assert grid.saturation_boundary

    benign = flow_with_sensitivity(ctx.params, ctx.policy, bs,
                                   segway.state(0.1, 0.2, 0.0, 0.0),
                                   horizon=ctx.horizon, dt_int=ctx.dt_int,
                                   n_constraints=ctx.n_constraints)
    assert not benign.saturation_boundary
