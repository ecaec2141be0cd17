"""Numba kernels for the backup-flow integration hot loops.

The closed loop under the saturated backup controller is integrated with
explicit Euler jointly with its sensitivity matrix (the variational
recursion ``S <- (I + dt J_cl) S``), so the recorded sensitivities are the
exact Jacobians of the discrete flow. These kernels exist because the
safety filter runs once per control tick and has a millisecond budget;
everything outside the per-step loop stays in plain numpy.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _eval_closed_loop(mb, mw, jb, ell, rr, grav, bw, bpsi,
                      gain, center, umax, x, f, g, jac):
    """Fill f, g, J_cl buffers at state x; return the raw (unclamped) torque."""
    m_t = mb + mw
    j_t = jb + mb * ell * ell
    mbl = mb * ell
    sin_p = np.sin(x[2])
    cos_p = np.cos(x[2])
    m_off = mbl * cos_p
    det = m_t * j_t - m_off * m_off

    raw = -(gain[0] * (x[0] - center[0]) + gain[1] * (x[1] - center[1])
            + gain[2] * (x[2] - center[2]) + gain[3] * (x[3] - center[3]))
    u = raw
    if u > umax:
        u = umax
    elif u < -umax:
        u = -umax

    r1 = mbl * sin_p * x[3] * x[3] - bw * x[1]
    r2 = mb * grav * ell * sin_p - bpsi * x[3]
    d1 = (j_t * r1 - m_off * r2) / det
    d2 = (-m_off * r1 + m_t * r2) / det

    g1 = (j_t / rr + m_off) / det
    g2 = (-m_off / rr - m_t) / det

    f[0] = x[1]
    f[1] = d1
    f[2] = x[3]
    f[3] = d2
    g[0] = 0.0
    g[1] = g1
    g[2] = 0.0
    g[3] = g2

    # drift Jacobian entries
    dv1 = (j_t * (-bw)) / det
    dv2 = (-m_off * (-bw)) / det
    dw1 = (j_t * (2.0 * mbl * sin_p * x[3]) - m_off * (-bpsi)) / det
    dw2 = (-m_off * (2.0 * mbl * sin_p * x[3]) + m_t * (-bpsi)) / det
    dm_off = -mbl * sin_p
    dr1 = mbl * cos_p * x[3] * x[3] - dm_off * d2
    dr2 = mb * grav * ell * cos_p - dm_off * d1
    dp1 = (j_t * dr1 - m_off * dr2) / det
    dp2 = (-m_off * dr1 + m_t * dr2) / det
    # actuation Jacobian (pitch column only): dg/dpsi = -M^-1 dM g
    b1 = -dm_off * g2
    b2 = -dm_off * g1
    dg1 = (j_t * b1 - m_off * b2) / det
    dg2 = (-m_off * b1 + m_t * b2) / det

    for i in range(4):
        for j in range(4):
            jac[i, j] = 0.0
    jac[0, 1] = 1.0
    jac[2, 3] = 1.0
    jac[1, 1] = dv1
    jac[1, 2] = dp1 + u * dg1
    jac[1, 3] = dw1
    jac[3, 1] = dv2
    jac[3, 2] = dp2 + u * dg2
    jac[3, 3] = dw2
    # torque feedback term g (-K), present only off the saturated regime
    if abs(raw) <= umax:
        for j in range(4):
            jac[1, j] -= g1 * gain[j]
            jac[3, j] -= g2 * gain[j]
    return raw


@njit(cache=True)
def flow_kernel(params_vec, gain, center, umax, x0, dt, n_steps, rec_idx):
    """Euler flow with sensitivity, recording state and S at rec_idx steps.

    Returns (states, sensitivities, sat_boundary, finite): sat_boundary is
    set when a recorded node sits within 1e-9 of the clamp switching torque.
    """
    mb, mw, jb, ell, rr, grav, bw, bpsi = (params_vec[0], params_vec[1],
                                           params_vec[2], params_vec[3],
                                           params_vec[4], params_vec[5],
                                           params_vec[6], params_vec[7])
    n_rec = rec_idx.shape[0]
    states = np.empty((n_rec, 4))
    sens = np.empty((n_rec, 4, 4))
    x = x0.copy()
    S = np.eye(4)
    Snew = np.empty((4, 4))
    f = np.empty(4)
    g = np.empty(4)
    jac = np.empty((4, 4))
    sat_boundary = False
    r = 0
    for k in range(n_steps + 1):
        raw = _eval_closed_loop(mb, mw, jb, ell, rr, grav, bw, bpsi,
                                gain, center, umax, x, f, g, jac)
        if r < n_rec and rec_idx[r] == k:
            for i in range(4):
                states[r, i] = x[i]
                for j in range(4):
                    sens[r, i, j] = S[i, j]
            if abs(abs(raw) - umax) <= 1e-9:
                sat_boundary = True
            r += 1
        if k == n_steps:
            break
        u = raw
        if u > umax:
            u = umax
        elif u < -umax:
            u = -umax
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for l in range(4):
                    acc += jac[i, l] * S[l, j]
                Snew[i, j] = S[i, j] + dt * acc
        for i in range(4):
            x[i] = x[i] + dt * (f[i] + g[i] * u)
        for i in range(4):
            for j in range(4):
                S[i, j] = Snew[i, j]
    finite = True
    for r in range(n_rec):
        for i in range(4):
            if not np.isfinite(states[r, i]):
                finite = False
            for j in range(4):
                if not np.isfinite(sens[r, i, j]):
                    finite = False
    return states, sens, sat_boundary, finite


@njit(cache=True)
def flow_kernel_batch(params_vec, gain, centers, umax, x0s, dt, n_steps, rec_idx):
    """flow_kernel across a batch of anchors with per-anchor centers."""
    n = x0s.shape[0]
    n_rec = rec_idx.shape[0]
    states = np.empty((n, n_rec, 4))
    sens = np.empty((n, n_rec, 4, 4))
    finite = np.ones(n, dtype=np.bool_)
    for b in range(n):
        st, se, _, fin = flow_kernel(params_vec, gain, centers[b], umax,
                                     x0s[b], dt, n_steps, rec_idx)
        states[b] = st
        sens[b] = se
        finite[b] = fin
    return states, sens, finite


@njit(cache=True)
def flow_extremes_kernel(params_vec, gain, center, umax, x0, dt, n_steps):
    """Plain Euler flow returning (max position, final state); no sensitivity."""
    mb, mw, jb, ell, rr, grav, bw, bpsi = (params_vec[0], params_vec[1],
                                           params_vec[2], params_vec[3],
                                           params_vec[4], params_vec[5],
                                           params_vec[6], params_vec[7])
    x = x0.copy()
    f = np.empty(4)
    g = np.empty(4)
    jac = np.empty((4, 4))
    max_pos = x[0]
    for k in range(n_steps):
        raw = _eval_closed_loop(mb, mw, jb, ell, rr, grav, bw, bpsi,
                                gain, center, umax, x, f, g, jac)
        u = raw
        if u > umax:
            u = umax
        elif u < -umax:
            u = -umax
        for i in range(4):
            x[i] = x[i] + dt * (f[i] + g[i] * u)
        if x[0] > max_pos:
            max_pos = x[0]
    return max_pos, x
