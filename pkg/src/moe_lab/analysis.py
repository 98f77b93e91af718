"""Algebraic-system search, feature independence checks, and slope fits.

The polynomial system in (p_l, q1_l, q2_l), l = 1..m, is

    sum_l sum_{n1 + 2 n2 = s} p_l^2 q1_l^{n1} q2_l^{n2} / (n1! n2!) = 0,
    s = 1..r.

A solution is nontrivial when every p_l is nonzero and some q1_l is
nonzero.  search_nontrivial hunts for one with random restarts plus damped
Gauss-Newton; two exact symmetries (residuals are homogeneous of degree 2
in p, and (q1, q2) -> (c q1, c^2 q2) rescales residual s by c^s) are
removed by fixing sum p_l^2 = 1 and pinning one q1 coordinate to 1, so a
reported best_norm is scale-canonical rather than an artifact of shrinking
q toward the trivial zero solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import sampling

FOUND_TOL = 1e-10
# nontriviality margin: every unit-norm p must keep |p_l| >= DELTA_P, else
# the residuals can be driven to zero by starving the pinned-q1 atom of
# mass while the remaining q values shrink toward the trivial solution
DELTA_P = 0.25
SV_RATIO_TOL = 1e-6


class UnsupportedCellSize(Exception):
    """Raised when a cell size has no known loss exponent."""


def rbar_known(m: int):
    """Loss exponent for a cell of m fitted atoms (2 -> 4, 3 -> 6)."""
    m = int(m)
    if m <= 0:
        raise ValueError("cell size must be positive")
    if m == 1:
        # placeholder for the singleton case; no supporting derivation.
        # Singleton cells use linear terms and never consult this value.
        return 2
    if m == 2:
        return 4
    if m == 3:
        return 6
    raise UnsupportedCellSize("no known exponent for cells of size %d" % m)


@dataclass(frozen=True)
class PolySystemInstance:
    m: int
    r: int

    def __post_init__(self):
        if self.m < 1 or self.r < 1:
            raise ValueError("m and r must be >= 1")


def _term_table(r: int):
    """For each s = 1..r the (n1, n2, 1/(n1! n2!)) triples with n1+2n2 = s."""
    table = []
    for s in range(1, r + 1):
        terms = []
        for n2 in range(s // 2 + 1):
            n1 = s - 2 * n2
            terms.append((n1, n2, 1.0 / (math.factorial(n1) * math.factorial(n2))))
        table.append(terms)
    return table


def poly_residuals(inst: PolySystemInstance, values) -> np.ndarray:
    """Residuals of the r equations at values = (p, q1, q2)."""
    p, q1, q2 = (np.asarray(v, dtype=float) for v in values)
    if p.shape != (inst.m,) or q1.shape != (inst.m,) or q2.shape != (inst.m,):
        raise ValueError("values must be three vectors of length m")
    out = np.empty(inst.r)
    p2 = p * p
    for s_idx, terms in enumerate(_term_table(inst.r)):
        acc = 0.0
        for n1, n2, coef in terms:
            acc += coef * float(np.sum(p2 * q1**n1 * q2**n2))
        out[s_idx] = acc
    return out


def _residual_and_jac(inst, table, p, q1, q2):
    m, r = inst.m, inst.r
    res = np.empty(r)
    dp = np.zeros((r, m))
    dq1 = np.zeros((r, m))
    dq2 = np.zeros((r, m))
    p2 = p * p
    for s_idx, terms in enumerate(table):
        acc = 0.0
        for n1, n2, coef in terms:
            t = q1**n1 * q2**n2
            acc += coef * float(np.sum(p2 * t))
            dp[s_idx] += 2.0 * coef * p * t
            if n1 >= 1:
                dq1[s_idx] += coef * n1 * p2 * q1 ** (n1 - 1) * q2**n2
            if n2 >= 1:
                dq2[s_idx] += coef * n2 * p2 * q1**n1 * q2 ** (n2 - 1)
        res[s_idx] = acc
    return res, dp, dq1, dq2


def _project_p(p: np.ndarray) -> np.ndarray:
    p = p / np.linalg.norm(p)
    small = np.abs(p) < DELTA_P
    if small.any():
        p = p.copy()
        p[small] = np.where(p[small] >= 0, DELTA_P, -DELTA_P)
        p = p / np.linalg.norm(p)
    return p


@dataclass(frozen=True)
class PolySearchResult:
    found: bool
    best_norm: float
    p: np.ndarray | None
    q1: np.ndarray | None
    q2: np.ndarray | None
    restarts: int

    def to_obj(self) -> dict:
        obj = {
            "schema": 1,
            "found": self.found,
            "best_norm": self.best_norm,
            "restarts": self.restarts,
        }
        if self.p is not None:
            obj["witness"] = {
                "p": list(self.p),
                "q1": list(self.q1),
                "q2": list(self.q2),
            }
        else:
            obj["witness"] = None
        return obj


def search_nontrivial(m: int, r: int, budget: int = 200, seed: int = 0) -> PolySearchResult:
    """Look for a nontrivial solution of the (m, r) system.

    Runs `budget` random restarts of Levenberg-damped Gauss-Newton in a
    reduced parameterization (unit p, one q1 coordinate pinned to 1, pivot
    chosen per restart).  found requires a feasible point with residual
    2-norm below 1e-10; best_norm is the smallest norm seen anywhere.
    """
    inst = PolySystemInstance(m, r)
    table = _term_table(r)
    rng = sampling.substream(seed, 0xA3)
    best = np.inf
    best_vals = None
    restarts = 0
    for _ in range(budget):
        restarts += 1
        p = _project_p(rng.standard_normal(m))
        q1 = rng.standard_normal(m)
        pivot = int(np.argmax(np.abs(q1)))
        scl = q1[pivot]
        if scl == 0.0:
            scl = 1.0
        q1 = q1 / scl
        q2 = rng.standard_normal(m) / (scl * scl)
        q1[pivot] = 1.0

        free_q1 = [l for l in range(m) if l != pivot]
        res, dp, dq1, dq2 = _residual_and_jac(inst, table, p, q1, q2)
        cost = float(np.linalg.norm(res))
        mu = 1e-3
        for _step in range(150):
            if cost < 1e-14:
                break
            proj = np.eye(m) - np.outer(p, p)
            ju = dp @ proj
            J = np.hstack([ju, dq1[:, free_q1], dq2])
            A = J.T @ J
            g = J.T @ res
            improved = False
            for _try in range(30):
                try:
                    delta = np.linalg.solve(A + mu * np.eye(A.shape[0]), -g)
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    continue
                p_c = _project_p(p + delta[:m])
                q1_c = q1.copy()
                q1_c[free_q1] = q1[free_q1] + delta[m : m + len(free_q1)]
                q2_c = q2 + delta[m + len(free_q1) :]
                res_c, dp_c, dq1_c, dq2_c = _residual_and_jac(inst, table, p_c, q1_c, q2_c)
                cost_c = float(np.linalg.norm(res_c))
                if cost_c < cost:
                    p, q1, q2 = p_c, q1_c, q2_c
                    res, dp, dq1, dq2 = res_c, dp_c, dq1_c, dq2_c
                    cost = cost_c
                    mu = max(mu / 3.0, 1e-12)
                    improved = True
                    break
                mu *= 10.0
                if mu > 1e10:
                    break
            if not improved:
                break
        if cost < best:
            best = cost
            best_vals = (p.copy(), q1.copy(), q2.copy())
        if best < FOUND_TOL:
            break
    found = best < FOUND_TOL
    if found and best_vals is not None:
        p, q1, q2 = best_vals
        return PolySearchResult(True, best, p, q1, q2, restarts)
    return PolySearchResult(False, best, None, None, None, restarts)


# ---------------------------------------------------------------------------
# linear-independence probes for activation feature families


@dataclass(frozen=True)
class IndependenceReport:
    independent: bool
    min_sv_ratio: float
    n_features: int
    n_probe: int
    order: int

    def to_obj(self) -> dict:
        return {
            "schema": 1,
            "independent": self.independent,
            "min_sv_ratio": self.min_sv_ratio,
            "n_features": self.n_features,
            "n_probe": self.n_probe,
            "order": self.order,
        }


def independence_check(activation, order: int, w, n_probe: int | None = None, seed: int = 0) -> IndependenceReport:
    """Numerical rank test for the activation feature family at w.

    Order 1 probes {1, act(w.x), d act(w.x)/dw_u}; order 2 adds the value
    squared, value times gradient, gradient pair products, and second
    partials.  Columns are evaluated at standard normal probe points and
    scaled to unit RMS; the family counts as independent when the smallest
    to largest singular value ratio exceeds 1e-6.  An identically zero
    feature or a pair of bitwise-identical columns is already a linear
    dependence and short-circuits the ratio to 0.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("w must be a nonempty vector")
    d = w.size
    rng = sampling.substream(seed, 0x1D)
    n_features = 2 + d if order == 1 else 3 + 2 * d + d * (d + 1)
    if n_probe is None:
        n_probe = 64 * n_features
    n_probe = max(int(n_probe), 4 * n_features)
    X = rng.standard_normal((n_probe, d))
    z = X @ w
    s0 = activation.value(z)
    s1 = activation.d1(z)
    s2 = activation.d2(z)
    grads = [s1 * X[:, u] for u in range(d)]
    cols = [np.ones(n_probe), s0] + grads
    if order == 2:
        cols.append(s0 * s0)
        cols.extend(s0 * g for g in grads)
        for u in range(d):
            for v in range(u, d):
                cols.append(grads[u] * grads[v])
        for u in range(d):
            for v in range(u, d):
                cols.append(s2 * X[:, u] * X[:, v])
    M = np.column_stack(cols)
    seen = set()
    ratio = None
    for c in range(M.shape[1]):
        rms = math.sqrt(float(np.mean(M[:, c] ** 2)))
        if rms < 1e-300:
            ratio = 0.0  # the zero function makes any family dependent
            break
        M[:, c] /= rms
        key = M[:, c].tobytes()
        if key in seen:
            ratio = 0.0  # duplicated feature: dependent outright
            break
        seen.add(key)
    if ratio is None:
        sv = np.linalg.svd(M, compute_uv=False)
        ratio = float(sv[-1] / sv[0])
    return IndependenceReport(ratio > SV_RATIO_TOL, ratio, n_features, n_probe, order)


# ---------------------------------------------------------------------------
# log-log slope fits


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    n_points: int

    def to_obj(self) -> dict:
        return {
            "schema": 1,
            "slope": self.slope,
            "intercept": self.intercept,
            "stderr": self.stderr,
            "n_points": self.n_points,
        }


def loglog_fit(points) -> SlopeFit:
    """OLS slope of log(loss) on log(n) with its standard error.

    Requires at least two points with positive coordinates; the two-point
    fit is exact and reports stderr 0.
    """
    pts = [(float(n), float(v)) for n, v in points]
    if len(pts) < 2:
        raise ValueError("need at least two points")
    if any(n <= 0 or v <= 0 for n, v in pts):
        raise ValueError("points must be positive to take logs")
    lx = np.log([n for n, _ in pts])
    ly = np.log([v for _, v in pts])
    mx = lx.mean()
    sxx = float(np.sum((lx - mx) ** 2))
    if sxx == 0.0:
        raise ValueError("points need at least two distinct n values")
    slope = float(np.sum((lx - mx) * (ly - ly.mean())) / sxx)
    intercept = float(ly.mean() - slope * mx)
    if len(pts) == 2:
        stderr = 0.0
    else:
        rss = float(np.sum((ly - (intercept + slope * lx)) ** 2))
        stderr = math.sqrt(rss / (len(pts) - 2) / sxx)
    return SlopeFit(slope, intercept, stderr, len(pts))
