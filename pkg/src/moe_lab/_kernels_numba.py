"""Numba-compiled implementations of the hot kernels.

Entry points mirror _kernels_numpy exactly: posterior_from_logits,
mixture_pdf_grids, irls_loop.  All loops are sequential so results are
deterministic; cache=True keeps compilation a one-off cost per machine.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)

ACT_LINEAR = 0
ACT_SIGMOID = 1
ACT_GELU = 2
ACT_POWER = 3
ACT_IDENTITY = 4

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_INV_SQRT_2 = 1.0 / math.sqrt(2.0)


@njit(cache=True)
def _act_value_scalar(z, code, p):
    if code == ACT_SIGMOID:
        if z >= 0.0:
            return 1.0 / (1.0 + math.exp(-z))
        ez = math.exp(z)
        return ez / (1.0 + ez)
    if code == ACT_GELU:
        return z * 0.5 * (1.0 + math.erf(z * _INV_SQRT_2))
    if code == ACT_POWER:
        return z ** p
    return z


@njit(cache=True)
def _act_d1_scalar(z, code, p):
    if code == ACT_SIGMOID:
        s = _act_value_scalar(z, ACT_SIGMOID, p)
        return s * (1.0 - s)
    if code == ACT_GELU:
        phi = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
        return 0.5 * (1.0 + math.erf(z * _INV_SQRT_2)) + z * phi
    if code == ACT_POWER:
        if p == 1:
            return 1.0
        return p * z ** (p - 1)
    return 1.0


@njit(cache=True)
def _chol(a, low):
    m = a.shape[0]
    for i in range(m):
        for j in range(m):
            low[i, j] = 0.0
    for i in range(m):
        for j in range(i + 1):
            acc = a[i, j]
            for t in range(j):
                acc -= low[i, t] * low[j, t]
            if i == j:
                if acc <= 0.0:
                    return False
                low[i, i] = math.sqrt(acc)
            else:
                low[i, j] = acc / low[j, j]
    return True


@njit(cache=True)
def _chol_solve(low, b, x):
    m = low.shape[0]
    y = np.zeros(m)
    for i in range(m):
        acc = b[i]
        for t in range(i):
            acc -= low[i, t] * y[t]
        y[i] = acc / low[i, i]
    for i in range(m - 1, -1, -1):
        acc = y[i]
        for t in range(i + 1, m):
            acc -= low[t, i] * x[t]
        x[i] = acc / low[i, i]


@njit(cache=True)
def posterior_from_logits(logits, means, nus, y):
    n, k = logits.shape
    resp = np.empty((n, k))
    pointll = np.empty(n)
    under = 0
    logn_c = np.empty(k)
    inv2 = np.empty(k)
    for j in range(k):
        logn_c[j] = -0.5 * (LOG_2PI + math.log(nus[j]))
        inv2[j] = 0.5 / nus[j]
    t = np.empty(k)
    for i in range(n):
        lmax = -np.inf
        for j in range(k):
            if logits[i, j] > lmax:
                lmax = logits[i, j]
        acc = 0.0
        for j in range(k):
            acc += math.exp(logits[i, j] - lmax)
        lse = lmax + math.log(acc)
        tmax = -np.inf
        for j in range(k):
            dy = y[i] - means[i, j]
            t[j] = (logits[i, j] - lse) + logn_c[j] - dy * dy * inv2[j]
            if t[j] > tmax:
                tmax = t[j]
        if not np.isfinite(tmax):
            for j in range(k):
                resp[i, j] = 1.0 / k
            pointll[i] = -np.inf
            under += 1
            continue
        tot = 0.0
        for j in range(k):
            resp[i, j] = math.exp(t[j] - tmax)
            tot += resp[i, j]
        for j in range(k):
            resp[i, j] /= tot
        pointll[i] = tmax + math.log(tot)
    return resp, pointll, under


@njit(cache=True)
def mixture_pdf_grids(grids, w, means, nus):
    m, gn = grids.shape
    k = nus.shape[0]
    coef = np.empty(k)
    inv2 = np.empty(k)
    for j in range(k):
        coef[j] = _INV_SQRT_2PI / math.sqrt(nus[j])
        inv2[j] = 0.5 / nus[j]
    out = np.zeros((m, gn))
    for i in range(m):
        for j in range(k):
            wc = w[i, j] * coef[j]
            mj = means[i, j]
            for g in range(gn):
                diff = grids[i, g] - mj
                out[i, g] += wc * math.exp(-inv2[j] * diff * diff)
    return out


@njit(cache=True)
def _gate_parts_fill(X, beta1, beta0, tau, act_code, act_p, s, sp, w, logw):
    n, d = X.shape
    k = beta1.shape[0]
    for i in range(n):
        lmax = -np.inf
        for j in range(k):
            z = 0.0
            for u in range(d):
                z += X[i, u] * beta1[j, u]
            if act_code == ACT_LINEAR:
                s[i, j] = z + beta0[j]
                sp[i, j] = 1.0
            else:
                s[i, j] = _act_value_scalar(z, act_code, act_p) + beta0[j]
                sp[i, j] = _act_d1_scalar(z, act_code, act_p)
            lg = s[i, j] / tau
            logw[i, j] = lg
            if lg > lmax:
                lmax = lg
        tot = 0.0
        for j in range(k):
            w[i, j] = math.exp(logw[i, j] - lmax)
            tot += w[i, j]
        ltot = math.log(tot)
        for j in range(k):
            logw[i, j] = logw[i, j] - lmax - ltot
            w[i, j] /= tot


@njit(cache=True)
def _q_value(resp, logw):
    n, k = resp.shape
    q = 0.0
    for i in range(n):
        for j in range(k):
            if resp[i, j] > 0.0:
                q += resp[i, j] * logw[i, j]
    return q


@njit(cache=True)
def irls_loop(X, resp, beta1_in, beta0_in, tau, act_code, act_p, iters, eta, tau_min, paper_grad, nfree):
    n, d = X.shape
    k = beta1_in.shape[0]
    nf = int(nfree)
    P = nf * (d + 1) + 1
    beta1 = beta1_in.copy()
    beta0 = beta0_in.copy()
    tau = float(tau)

    s = np.empty((n, k))
    sp = np.empty((n, k))
    w = np.empty((n, k))
    logw = np.empty((n, k))
    s2 = np.empty((n, k))
    sp2 = np.empty((n, k))
    w2 = np.empty((n, k))
    logw2 = np.empty((n, k))
    e = np.empty(P)
    R = np.empty((P, P))
    A = np.empty((P, P))
    low = np.empty((P, P))
    delta = np.zeros(P)
    nb1 = np.empty((k, d))
    nb0 = np.empty(k)

    _gate_parts_fill(X, beta1, beta0, tau, act_code, act_p, s, sp, w, logw)
    q0 = _q_value(resp, logw)
    gnorm = np.inf
    rejected = 0
    it_done = 0
    for _ in range(iters):
        it_done += 1
        inv_tau = 1.0 / tau
        inv_tau2 = inv_tau * inv_tau
        bcoef = 1.0 if paper_grad else inv_tau
        for a_ in range(P):
            e[a_] = 0.0
            for b_ in range(P):
                R[a_, b_] = 0.0
        for i in range(n):
            for j in range(k):
                dij = resp[i, j] - w[i, j]
                cij = w[i, j] * (1.0 - w[i, j])
                gt = -s[i, j] * inv_tau2
                if j < nf:
                    o = j * (d + 1)
                    gbf = sp[i, j] * bcoef
                    for u in range(d):
                        gu = gbf * X[i, u]
                        e[o + u] += dij * gu
                        for v in range(u, d):
                            R[o + u, o + v] += cij * gu * (gbf * X[i, v])
                        R[o + u, o + d] += cij * gu * bcoef
                        R[o + u, P - 1] += cij * gu * gt
                    e[o + d] += dij * bcoef
                    R[o + d, o + d] += cij * bcoef * bcoef
                    R[o + d, P - 1] += cij * bcoef * gt
                e[P - 1] += dij * gt
                R[P - 1, P - 1] += cij * gt * gt
        # symmetrize the blocks filled above the diagonal
        for a_ in range(P):
            for b_ in range(a_ + 1, P):
                R[b_, a_] = R[a_, b_]

        acc = 0.0
        for a_ in range(P):
            acc += e[a_] * e[a_]
        gnorm = math.sqrt(acc)
        if gnorm < 1e-10:
            break

        # a linear gate leaves the surrogate exactly flat along the common
        # scaling of (beta1, beta0, tau), so R always has a null direction;
        # a proportional ridge keeps the factorization off that zero pivot
        tr = 0.0
        for a_ in range(P):
            tr += R[a_, a_]
        mu = 1e-6 * (tr / P if tr > 0.0 else 1.0)
        for a_ in range(P):
            for b_ in range(P):
                A[a_, b_] = R[a_, b_]
            A[a_, a_] += mu
        ok = _chol(A, low)
        while not ok:
            mu *= 2.0
            for a_ in range(P):
                for b_ in range(P):
                    A[a_, b_] = R[a_, b_]
                A[a_, a_] += mu
            ok = _chol(A, low)
        for a_ in range(P):
            delta[a_] = 0.0
        _chol_solve(low, e, delta)

        accepted = False
        scale = eta
        for _h in range(11):
            for j in range(k):
                for u in range(d):
                    nb1[j, u] = beta1[j, u]
                nb0[j] = beta0[j]
            for j in range(nf):
                o = j * (d + 1)
                for u in range(d):
                    nb1[j, u] = beta1[j, u] + scale * delta[o + u]
                nb0[j] = beta0[j] + scale * delta[o + d]
            nt = tau + scale * delta[P - 1]
            if nt < tau_min:
                nt = tau_min
            _gate_parts_fill(X, nb1, nb0, nt, act_code, act_p, s2, sp2, w2, logw2)
            q1 = _q_value(resp, logw2)
            if q1 >= q0:
                for j in range(k):
                    for u in range(d):
                        beta1[j, u] = nb1[j, u]
                    beta0[j] = nb0[j]
                tau = nt
                for i in range(n):
                    for j in range(k):
                        s[i, j] = s2[i, j]
                        sp[i, j] = sp2[i, j]
                        w[i, j] = w2[i, j]
                        logw[i, j] = logw2[i, j]
                q0 = q1
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            rejected += 1
            break
        dmax = 0.0
        for a_ in range(P):
            da = abs(delta[a_])
            if da > dmax:
                dmax = da
        move = scale * dmax
        pscale = 1.0 if tau < 1.0 else tau
        for j in range(nf):
            for u in range(d):
                bu = abs(beta1[j, u])
                if bu > pscale:
                    pscale = bu
            b0 = abs(beta0[j])
            if b0 > pscale:
                pscale = b0
        if move <= 1e-9 * pscale:
            break
    return beta1, beta0, tau, it_done, gnorm, rejected
