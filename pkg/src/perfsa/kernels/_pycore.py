"""Pure-Python reference of the stepping core.

Mirrors ``_ccore.pyx`` operation for operation (same accumulation order, same libm
calls) so both backends return identical bits.  See ``sfb_chunk`` in
:mod:`perfsa.kernels` for the argument contract.
"""
import math

TWO_PI = 6.283185307179586
MAX_PROPOSALS = 1000000

OK, NEED_UNIFORMS, NONFINITE, DEGENERATE = 0, 1, 2, 3


def saturate(t, hc):
    a = abs(t)
    if a <= 0.5:
        return t
    if a >= hc[0]:
        v = hc[1]
    else:
        s = a - 0.5
        v = 0.5 + s + s * s * s * s * (hc[2] + s * (hc[3] + s * (hc[4] + s * hc[5])))
        if v > hc[1]:
            v = hc[1]
    return v if t > 0 else -v


def _normals(U, p, n, eps):
    for q in range(0, n, 2):
        r = math.sqrt(-2.0 * math.log(1.0 - U[p + q]))
        th = TWO_PI * U[p + q + 1]
        eps[q] = r * math.cos(th)
        if q + 1 < n:
            eps[q + 1] = r * math.sin(th)


def sfb_chunk(x, xbar, t0, nsteps, burn_in, U, upos,
              A, mu, L, M, N, b, NL,
              proj_kind, lo, hi, center, radius,
              eta0, nu, mode, w, scale, hcoef, logc,
              zsum, ggsum, acc, xs_out):
    d = x.shape[0]
    n = mu.shape[0]
    m = 2 * ((n + 1) // 2)
    nU = U.shape[0]
    store = xs_out.shape[0] > 0

    xs = x.tolist()
    xb = xbar.tolist()
    Ul = U  # indexed lazily; tolist on big blocks costs more than it saves
    Al, mul, Ll = A.tolist(), mu.tolist(), L.tolist()
    Ml, Nl, bl, NLl = M.tolist(), N.tolist(), b.tolist(), NL.tolist()
    lol, hil, cl = lo.tolist(), hi.tolist(), center.tolist()
    wl, hc = w.tolist(), hcoef.tolist()
    zs = zsum.tolist()
    gg = ggsum.tolist()
    logl, clips, props = acc[0], acc[1], acc[2]

    eps = [0.0] * n
    z = [0.0] * n
    G = [0.0] * d
    g = [0.0] * d
    y = [0.0] * d

    done = 0
    status = OK
    for s in range(nsteps):
        t = t0 + s
        step_start = upos
        if mode == 2:
            tries = 0
            accepted = False
            while True:
                if upos + m + 1 > nU:
                    break
                _normals(Ul, upos, n, eps)
                a = 0.0
                for j in range(n):
                    a += wl[j] * eps[j]
                a = scale * a
                tries += 1
                thr = 0.5 * (1.0 + saturate(a, hc))
                u = Ul[upos + m]
                upos += m + 1
                if u < thr:
                    accepted = True
                    break
                if tries >= MAX_PROPOSALS:
                    break
            if not accepted:
                if tries >= MAX_PROPOSALS:
                    status = DEGENERATE
                else:
                    upos = step_start
                    status = NEED_UNIFORMS
                break
            props += tries
        else:
            if upos + m > nU:
                status = NEED_UNIFORMS
                break
            _normals(Ul, upos, n, eps)
            upos += m

        if store:
            for i in range(d):
                xs_out[s, i] = xs[i]
        if t >= burn_in:
            cnt = t - burn_in + 1
            for i in range(d):
                xb[i] += (xs[i] - xb[i]) / cnt
        tt = t if t > 1 else 1
        eta = eta0 * float(tt) ** (-nu)

        for i in range(n):
            v = 0.0
            row = Al[i]
            for j in range(d):
                v += row[j] * xs[j]
            v += mul[i]
            row = Ll[i]
            for j in range(n):
                v += row[j] * eps[j]
            z[i] = v
        finite = True
        for i in range(d):
            v = 0.0
            row = Ml[i]
            for j in range(d):
                v += row[j] * xs[j]
            row = Nl[i]
            for j in range(n):
                v += row[j] * z[j]
            v += bl[i]
            G[i] = v
            if not math.isfinite(v):
                finite = False
        if not finite:
            status = NONFINITE
            upos = step_start
            break

        if mode == 1:
            for i in range(d):
                v = 0.0
                row = NLl[i]
                for j in range(n):
                    v += row[j] * eps[j]
                g[i] = v
            a = 0.0
            for j in range(n):
                a += wl[j] * eps[j]
            a = scale * a
            logl += math.log1p(saturate(a, hc)) - logc
            for i in range(d):
                zs[i] += g[i]
                gi = g[i]
                row = gg[i]
                for j in range(d):
                    row[j] += gi * g[j]

        for i in range(d):
            y[i] = xs[i] - eta * G[i]
        clipped = False
        if proj_kind == 1:
            for i in range(d):
                v = y[i]
                if v < lol[i]:
                    v = lol[i]
                if v > hil[i]:
                    v = hil[i]
                if v != y[i]:
                    clipped = True
                xs[i] = v
        elif proj_kind == 2:
            nrm2 = 0.0
            for i in range(d):
                diff = y[i] - cl[i]
                nrm2 += diff * diff
            nrm = math.sqrt(nrm2)
            if nrm > radius:
                clipped = True
                f = radius / nrm
                for i in range(d):
                    xs[i] = cl[i] + (y[i] - cl[i]) * f
            else:
                for i in range(d):
                    xs[i] = y[i]
        else:
            for i in range(d):
                xs[i] = y[i]
        if clipped:
            clips += 1.0
        done = s + 1

    for i in range(d):
        x[i] = xs[i]
        xbar[i] = xb[i]
        zsum[i] = zs[i]
        for j in range(d):
            ggsum[i, j] = gg[i][j]
    acc[0] = logl
    acc[1] = clips
    acc[2] = props
    return done, upos, status
