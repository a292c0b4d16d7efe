# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the simulator's hot loops.

Operation-for-operation identical to _kernels_py.py; see that module for
the contract. Keep the two in sync: tests assert bit-equality between
backends.
"""

from libc.math cimport sqrt


def arma_forecast(double[:, ::1] hist, double[::1] c, double[:, ::1] phi,
                  double[:, ::1] theta, double[:, ::1] resid,
                  long[::1] steps_out, double[:, ::1] out):
    cdef Py_ssize_t n_axes = hist.shape[0]
    cdef Py_ssize_t p = hist.shape[1]
    cdef Py_ssize_t q = theta.shape[1]
    cdef Py_ssize_t n_out = steps_out.shape[0]
    cdef long max_steps = steps_out[n_out - 1]
    cdef double[64] ha
    cdef double[64] ea
    cdef Py_ssize_t a, i, j, idx
    cdef long k
    cdef double y, ca
    if p > 64 or q > 64:
        raise ValueError("kernel supports model orders up to 64")
    for a in range(n_axes):
        for i in range(p):
            ha[i] = hist[a, i]
        for j in range(q):
            ea[j] = resid[a, j]
        ca = c[a]
        idx = 0
        for k in range(1, max_steps + 1):
            y = ca
            for i in range(p):
                y += phi[a, i] * ha[i]
            for j in range(q):
                y += theta[a, j] * ea[j]
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


def spring_track(double[::1] q, double[::1] v, double[::1] target,
                 double kp, double kd, double theta_th, double dt,
                 long n_steps, bint renorm):
    cdef Py_ssize_t n = q.shape[0]
    cdef double[16] err
    cdef Py_ssize_t i
    cdef long s
    cdef double ss, norm, scale, acc, qs
    if n > 16:
        raise ValueError("kernel supports up to 16 axes")
    for s in range(n_steps):
        ss = 0.0
        for i in range(n):
            err[i] = target[i] - q[i]
            ss += err[i] * err[i]
        norm = sqrt(ss)
        scale = 1.0 if norm < theta_th else theta_th / norm
        for i in range(n):
            acc = kp * err[i] * scale - kd * v[i]
            v[i] += acc * dt
            q[i] += v[i] * dt
        if renorm:
            qs = sqrt(q[3] * q[3] + q[4] * q[4] + q[5] * q[5] + q[6] * q[6])
            if qs > 1e-12:
                q[3] /= qs
                q[4] /= qs
                q[5] /= qs
                q[6] /= qs


def pid_track(double[::1] q, double[::1] v, double[::1] setpoint,
              double kp, double ki, double kd, double[::1] integ,
              double[::1] prev_err, double iclamp, double dt,
              long n_steps, bint renorm):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t i
    cdef long s
    cdef double e, acc_i, deriv, u, qs
    for s in range(n_steps):
        for i in range(n):
            e = setpoint[i] - q[i]
            acc_i = integ[i] + 0.5 * dt * (e + prev_err[i])
            if acc_i > iclamp:
                acc_i = iclamp
            elif acc_i < -iclamp:
                acc_i = -iclamp
            integ[i] = acc_i
            deriv = (e - prev_err[i]) / dt
            u = kp * e + ki * acc_i + kd * deriv
            v[i] += u * dt
            q[i] += v[i] * dt
            prev_err[i] = e
        if renorm:
            qs = sqrt(q[3] * q[3] + q[4] * q[4] + q[5] * q[5] + q[6] * q[6])
            if qs > 1e-12:
                q[3] /= qs
                q[4] /= qs
                q[5] /= qs
                q[6] /= qs
