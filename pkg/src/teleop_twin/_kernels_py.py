"""Pure-Python kernels for the simulator's hot loops.

These are the reference semantics for the compiled extension in
_kernels_c.pyx: both backends perform the same floating-point operations
in the same order, so results are bit-identical whichever one is
selected. Scalar Python loops are deliberately used instead of numpy
vectorization because intermediate summation order must match the C
code exactly.
"""

from __future__ import annotations

import math

import numpy as np


def arma_forecast(hist, c, phi, theta, resid, steps_out, out):
    """Recursive multi-step ARMA forecast for a block of independent axes.

    hist[a, j]  : observed value of axis a at lag j+1 (j=0 is the newest)
    c[a]        : level term
    phi[a, i]   : AR coefficients, lag i+1
    theta[a, j] : MA coefficients, lag j+1
    resid[a, j] : innovation at lag j+1 (newest first)
    steps_out   : ascending positive step counts at which to capture the
                  forecast
    out[k, a]   : forecast of axis a after steps_out[k] recursive steps

    Future innovations are set to zero (minimum-MSE convention); forecasts
    are fed back as inputs for subsequent steps.
    """
    n_axes, p = hist.shape
    q = theta.shape[1]
    n_out = len(steps_out)
    max_steps = int(steps_out[n_out - 1])
    h = hist.tolist()
    e = resid.tolist()
    cl = c.tolist()
    ph = phi.tolist()
    th = theta.tolist()
    for a in range(n_axes):
        ha = h[a]
        ea = e[a]
        pha = ph[a]
        tha = th[a]
        ca = cl[a]
        idx = 0
        for k in range(1, max_steps + 1):
            y = ca
            for i in range(p):
                y += pha[i] * ha[i]
            for j in range(q):
                y += tha[j] * ea[j]
            for i in range(p - 1, 0, -1):
                ha[i] = ha[i - 1]
            if p > 0:
                ha[0] = y
            for j in range(q - 1, 0, -1):
                ea[j] = ea[j - 1]
            if q > 0:
                ea[0] = 0.0
            if k == steps_out[idx]:
                out[idx, a] = y
                idx += 1
                if idx == n_out:
                    break


def spring_track(q, v, target, kp, kd, theta_th, dt, n_steps, renorm):
    """Semi-implicit Euler integration of the capped spring-damper law.

    q, v are 7-axis state arrays updated in place. The proportional term
    acts on the error vector capped to norm theta_th taken over all seven
    axes jointly. When renorm is true the quaternion block q[3:7] is
    rescaled to unit norm after every step.
    """
    n = q.shape[0]
    ql = q.tolist()
    vl = v.tolist()
    tl = target.tolist()
    err = [0.0] * n
    for _ in range(n_steps):
        ss = 0.0
        for i in range(n):
            err[i] = tl[i] - ql[i]
            ss += err[i] * err[i]
        norm = math.sqrt(ss)
        scale = 1.0 if norm < theta_th else theta_th / norm
        for i in range(n):
            acc = kp * err[i] * scale - kd * vl[i]
            vl[i] += acc * dt
            ql[i] += vl[i] * dt
        if renorm:
            qs = math.sqrt(
                ql[3] * ql[3] + ql[4] * ql[4] + ql[5] * ql[5] + ql[6] * ql[6]
            )
            if qs > 1e-12:
                ql[3] /= qs
                ql[4] /= qs
                ql[5] /= qs
                ql[6] /= qs
    q[:] = ql
    v[:] = vl


def pid_track(
    q, v, setpoint, kp, ki, kd, integ, prev_err, iclamp, dt, n_steps, renorm
):
    """Integrate the per-axis PID-driven double-integrator plant n steps.

    q, v, integ, prev_err are updated in place. The integral uses a
    trapezoidal update clamped to +-iclamp; the derivative is a backward
    difference of the error. The PID output acts as acceleration.
    """
    n = q.shape[0]
    ql = q.tolist()
    vl = v.tolist()
    sl = setpoint.tolist()
    il = integ.tolist()
    pl = prev_err.tolist()
    for _ in range(n_steps):
        for i in range(n):
            e = sl[i] - ql[i]
            acc_i = il[i] + 0.5 * dt * (e + pl[i])
            if acc_i > iclamp:
                acc_i = iclamp
            elif acc_i < -iclamp:
                acc_i = -iclamp
            il[i] = acc_i
            deriv = (e - pl[i]) / dt
            u = kp * e + ki * acc_i + kd * deriv
            vl[i] += u * dt
            ql[i] += vl[i] * dt
            pl[i] = e
        if renorm:
            qs = math.sqrt(
                ql[3] * ql[3] + ql[4] * ql[4] + ql[5] * ql[5] + ql[6] * ql[6]
            )
            if qs > 1e-12:
                ql[3] /= qs
                ql[4] /= qs
                ql[5] /= qs
                ql[6] /= qs
    q[:] = ql
    v[:] = vl
    integ[:] = il
    prev_err[:] = pl


def _as_c_double_array(a):
    return np.ascontiguousarray(a, dtype=np.float64)
