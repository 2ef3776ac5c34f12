# cython: language_level=3
"""Compiled stepping core; operation-for-operation twin of ``_pycore.py``."""
from libc.math cimport sqrt, log, log1p, cos, sin, pow, fabs, isfinite

cdef double TWO_PI = 6.283185307179586
cdef long MAX_PROPOSALS = 1000000


cdef inline double saturate(double t, const double[::1] hc) noexcept nogil:
    cdef double a = fabs(t)
    cdef double s, v
    if a <= 0.5:
        return t
    if a >= hc[0]:
        v = hc[1]
    else:
        s = a - 0.5
        v = 0.5 + s + s * s * s * s * (hc[2] + s * (hc[3] + s * (hc[4] + s * hc[5])))
        if v > hc[1]:
            v = hc[1]
    if t > 0:
        return v
    return -v


cdef inline void normals(const double[::1] U, long p, long n, double[::1] eps) noexcept nogil:
    cdef long q
    cdef double r, th
    q = 0
    while q < n:
        r = sqrt(-2.0 * log(1.0 - U[p + q]))
        th = TWO_PI * U[p + q + 1]
        eps[q] = r * cos(th)
        if q + 1 < n:
            eps[q + 1] = r * sin(th)
        q += 2


def sfb_chunk(double[::1] x, double[::1] xbar, long t0, long nsteps, long burn_in,
              const double[::1] U, long upos,
              const double[:, ::1] A, const double[::1] mu, const double[:, ::1] L,
              const double[:, ::1] M, const double[:, ::1] N, const double[::1] b,
              const double[:, ::1] NL,
              int proj_kind, const double[::1] lo, const double[::1] hi,
              const double[::1] center, double radius,
              double eta0, double nu, int mode, const double[::1] w, double scale,
              const double[::1] hcoef, double logc,
              double[::1] zsum, double[:, ::1] ggsum, double[::1] acc,
              double[:, ::1] xs_out):
    cdef long d = x.shape[0]
    cdef long n = mu.shape[0]
    cdef long m = 2 * ((n + 1) // 2)
    cdef long nU = U.shape[0]
    cdef bint store = xs_out.shape[0] > 0
    cdef long s, t, i, j, tt, tries, step_start
    cdef double v, a, eta, thr, u, nrm, nrm2, diff, f, gi, cnt
    cdef double logl = acc[0]
    cdef double clips = acc[1]
    cdef double props = acc[2]
    cdef bint accepted, finite, clipped
    cdef long done = 0
    cdef int status = 0

    import numpy as np
    cdef double[::1] eps = np.zeros(max(n, 1))
    cdef double[::1] z = np.zeros(max(n, 1))
    cdef double[::1] G = np.zeros(d)
    cdef double[::1] g = np.zeros(d)
    cdef double[::1] y = np.zeros(d)

    with nogil:
        for s in range(nsteps):
            t = t0 + s
            step_start = upos
            if mode == 2:
                tries = 0
                accepted = False
                while True:
                    if upos + m + 1 > nU:
                        break
                    normals(U, upos, n, eps)
                    a = 0.0
                    for j in range(n):
                        a += w[j] * eps[j]
                    a = scale * a
                    tries += 1
                    thr = 0.5 * (1.0 + saturate(a, hcoef))
                    u = U[upos + m]
                    upos += m + 1
                    if u < thr:
                        accepted = True
                        break
                    if tries >= MAX_PROPOSALS:
                        break
                if not accepted:
                    if tries >= MAX_PROPOSALS:
                        status = 3
                    else:
                        upos = step_start
                        status = 1
                    break
                props += tries
            else:
                if upos + m > nU:
                    status = 1
                    break
                normals(U, upos, n, eps)
                upos += m

            if store:
                for i in range(d):
                    xs_out[s, i] = x[i]
            if t >= burn_in:
                cnt = <double>(t - burn_in + 1)
                for i in range(d):
                    xbar[i] += (x[i] - xbar[i]) / cnt
            tt = t if t > 1 else 1
            eta = eta0 * pow(<double>tt, -nu)

            for i in range(n):
                v = 0.0
                for j in range(d):
                    v += A[i, j] * x[j]
                v += mu[i]
                for j in range(n):
                    v += L[i, j] * eps[j]
                z[i] = v
            finite = True
            for i in range(d):
                v = 0.0
                for j in range(d):
                    v += M[i, j] * x[j]
                for j in range(n):
                    v += N[i, j] * z[j]
                v += b[i]
                G[i] = v
                if not isfinite(v):
                    finite = False
            if not finite:
                status = 2
                upos = step_start
                break

            if mode == 1:
                for i in range(d):
                    v = 0.0
                    for j in range(n):
                        v += NL[i, j] * eps[j]
                    g[i] = v
                a = 0.0
                for j in range(n):
                    a += w[j] * eps[j]
                a = scale * a
                logl += log1p(saturate(a, hcoef)) - logc
                for i in range(d):
                    zsum[i] += g[i]
                    gi = g[i]
                    for j in range(d):
                        ggsum[i, j] += gi * g[j]

            for i in range(d):
                y[i] = x[i] - eta * G[i]
            clipped = False
            if proj_kind == 1:
                for i in range(d):
                    v = y[i]
                    if v < lo[i]:
                        v = lo[i]
                    if v > hi[i]:
                        v = hi[i]
                    if v != y[i]:
                        clipped = True
                    x[i] = v
            elif proj_kind == 2:
                nrm2 = 0.0
                for i in range(d):
                    diff = y[i] - center[i]
                    nrm2 += diff * diff
                nrm = sqrt(nrm2)
                if nrm > radius:
                    clipped = True
                    f = radius / nrm
                    for i in range(d):
                        x[i] = center[i] + (y[i] - center[i]) * f
                else:
                    for i in range(d):
                        x[i] = y[i]
            else:
                for i in range(d):
                    x[i] = y[i]
            if clipped:
                clips += 1.0
            done = s + 1

    acc[0] = logl
    acc[1] = clips
    acc[2] = props
    return done, upos, status
