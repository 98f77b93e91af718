"""Pure-numpy reference implementations of the hot kernels.

The numba module (_kernels_numba) implements the same three entry points
with identical semantics; kernels.py picks one at import time.  Keep the
function signatures and the reduction order stable: experiment output is
required to be deterministic for a fixed backend.
"""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# activation codes shared with the numba backend
ACT_LINEAR = 0
ACT_SIGMOID = 1
ACT_GELU = 2
ACT_POWER = 3
ACT_IDENTITY = 4

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _act_value(z, code, p):
    if code == ACT_SIGMOID:
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if code == ACT_GELU:
        from scipy.special import ndtr

        return z * ndtr(z)
    if code == ACT_POWER:
        return z**p
    return z.copy()


def _act_d1(z, code, p):
    if code == ACT_SIGMOID:
        s = _act_value(z, code, p)
        return s * (1.0 - s)
    if code == ACT_GELU:
        from scipy.special import ndtr

        phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return ndtr(z) + z * phi
    if code == ACT_POWER:
        if p == 1:
            return np.ones_like(z)
        return p * z ** (p - 1)
    return np.ones_like(z)


def _chol(a):
    """Lower Cholesky factor with a success flag instead of an exception."""
    m = a.shape[0]
    low = np.zeros_like(a)
    for i in range(m):
        for j in range(i + 1):
            acc = a[i, j]
            for t in range(j):
                acc -= low[i, t] * low[j, t]
            if i == j:
                if acc <= 0.0:
                    return low, False
                low[i, i] = math.sqrt(acc)
            else:
                low[i, j] = acc / low[j, j]
    return low, True


def _chol_solve(low, b):
    m = low.shape[0]
    y = np.zeros(m)
    for i in range(m):
        acc = b[i]
        for t in range(i):
            acc -= low[i, t] * y[t]
        y[i] = acc / low[i, i]
    x = np.zeros(m)
    for i in range(m - 1, -1, -1):
        acc = y[i]
        for t in range(i + 1, m):
            acc -= low[t, i] * x[t]
        x[i] = acc / low[i, i]
    return x


def posterior_from_logits(logits, means, nus, y):
    """Responsibilities and per-point log density from gate logits.

    logits, means: (n, k); nus: (k,); y: (n,).  Returns (resp, pointll,
    n_underflow) where rows of resp sum to one and pointll is the mixture
    log density at each point.  A row whose terms all degenerate gets the
    uniform fallback and is counted in n_underflow.
    """
    n, k = logits.shape
    lmax = logits.max(axis=1, keepdims=True)
    lse = lmax[:, 0] + np.log(np.exp(logits - lmax).sum(axis=1))
    logw = logits - lse[:, None]
    logn = -0.5 * (LOG_2PI + np.log(nus))[None, :] - (y[:, None] - means) ** 2 / (
        2.0 * nus[None, :]
    )
    t = logw + logn
    m = t.max(axis=1)
    bad = ~np.isfinite(m)
    resp = np.empty((n, k))
    pointll = np.empty(n)
    if bad.any():
        resp[bad] = 1.0 / k
        pointll[bad] = -np.inf
    good = ~bad
    ex = np.exp(t[good] - m[good, None])
    tot = ex.sum(axis=1)
    resp[good] = ex / tot[:, None]
    pointll[good] = m[good] + np.log(tot)
    return resp, pointll, int(bad.sum())


def mixture_pdf_grids(grids, w, means, nus):
    """Mixture density on per-row grids.

    grids: (m, G) evaluation points; w, means: (m, k) gate weights and
    expert means per row; nus: (k,).  Returns (m, G).
    """
    coef = _INV_SQRT_2PI / np.sqrt(nus)
    inv2 = 0.5 / nus
    out = np.zeros_like(grids)
    for j in range(nus.shape[0]):
        diff = grids - means[:, j][:, None]
        out += (w[:, j] * coef[j])[:, None] * np.exp(-inv2[j] * diff * diff)
    return out


def _gate_parts(X, beta1, beta0, tau, act_code, act_p):
    z = X @ beta1.T
    if act_code == ACT_LINEAR:
        s = z + beta0[None, :]
        sp = np.ones_like(z)
    else:
        s = _act_value(z, act_code, act_p) + beta0[None, :]
        sp = _act_d1(z, act_code, act_p)
    logits = s / tau
    lmax = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - lmax)
    tot = ex.sum(axis=1, keepdims=True)
    w = ex / tot
    logw = (logits - lmax) - np.log(tot)
    return s, sp, w, logw


def _q_value(resp, logw):
    return float(np.sum(np.where(resp > 0.0, resp * logw, 0.0)))


def irls_loop(X, resp, beta1_in, beta0_in, tau, act_code, act_p, iters, eta, tau_min, paper_grad, nfree):
    """Damped Newton-style ascent on the gating part of the EM surrogate.

    Experts past nfree are pinned (their gate parameters never move); the
    temperature is a single shared coordinate whose gradient and curvature
    accumulate over every expert.  Steps scale by eta, halve up to 10 times
    until the surrogate does not decrease, and the loop exits early when
    the gradient norm drops below 1e-10, a step is rejected outright, or
    an accepted move is negligible relative to the parameter scale.

    Returns (beta1, beta0, tau, iters_done, grad_norm, n_rejected).
    """
    n, d = X.shape
    k = beta1_in.shape[0]
    nf = int(nfree)
    P = nf * (d + 1) + 1
    beta1 = beta1_in.copy()
    beta0 = beta0_in.copy()
    tau = float(tau)

    s, sp, w, logw = _gate_parts(X, beta1, beta0, tau, act_code, act_p)
    q0 = _q_value(resp, logw)
    gnorm = np.inf
    rejected = 0
    it_done = 0
    eye = np.eye(P)
    for _ in range(iters):
        it_done += 1
        bcoef = 1.0 if paper_grad else 1.0 / tau
        gb = sp * bcoef if paper_grad else sp / tau
        gt = -s / (tau * tau)
        diff = resp - w
        c = w * (1.0 - w)
        e = np.zeros(P)
        R = np.zeros((P, P))
        for j in range(nf):
            o = j * (d + 1)
            dj = diff[:, j] * gb[:, j]
            e[o : o + d] = X.T @ dj
            e[o + d] = diff[:, j].sum() * bcoef
            cj = c[:, j]
            Gj = np.empty((n, d + 1))
            Gj[:, :d] = X * gb[:, j][:, None]
            Gj[:, d] = bcoef
            R[o : o + d + 1, o : o + d + 1] = Gj.T @ (cj[:, None] * Gj)
            rj = Gj.T @ (cj * gt[:, j])
            R[o : o + d + 1, -1] = rj
            R[-1, o : o + d + 1] = rj
        e[-1] = float(np.sum(diff * gt))
        R[-1, -1] = float(np.sum(c * gt * gt))

        gnorm = float(np.linalg.norm(e))
        if gnorm < 1e-10:
            break

        # a linear gate leaves the surrogate exactly flat along the common
        # scaling of (beta1, beta0, tau), so R always has a null direction;
        # a proportional ridge keeps the factorization off that zero pivot
        tr = float(np.trace(R))
        mu = 1e-6 * (tr / P if tr > 0.0 else 1.0)
        low, ok = _chol(R + mu * eye)
        while not ok:
            mu *= 2.0
            low, ok = _chol(R + mu * eye)
        delta = _chol_solve(low, e)

        accepted = False
        scale = eta
        for _h in range(11):
            nb1 = beta1.copy()
            nb0 = beta0.copy()
            for j in range(nf):
                o = j * (d + 1)
                nb1[j] = beta1[j] + scale * delta[o : o + d]
                nb0[j] = beta0[j] + scale * delta[o + d]
            nt = tau + scale * delta[-1]
            if nt < tau_min:
                nt = tau_min
            s2, sp2, w2, logw2 = _gate_parts(X, nb1, nb0, nt, act_code, act_p)
            q1 = _q_value(resp, logw2)
            if q1 >= q0:
                beta1, beta0, tau = nb1, nb0, nt
                s, sp, w, logw, q0 = s2, sp2, w2, logw2, q1
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            # the system is deterministic, so retrying the same rejected
            # step cannot succeed; stop the inner loop here
            rejected += 1
            break
        move = scale * float(np.max(np.abs(delta)))
        pscale = max(1.0, tau)
        if nf > 0:
            pscale = max(pscale, float(np.max(np.abs(beta1[:nf]))))
            pscale = max(pscale, float(np.max(np.abs(beta0[:nf]))))
        if move <= 1e-9 * pscale:
            break
    return beta1, beta0, tau, it_done, gnorm, rejected
