"""Voronoi parameter-distance losses and conditional-density distances.

Loss evaluation assigns every fitted atom to its nearest reference atom in
the concatenated parameter metric (beta1, tau, a, b, nu), then combines a
per-cell weight discrepancy with a per-atom parameter term whose exponents
depend on the loss kind:

    D1(r), D3(r): all five deltas to the power r
    D2:           ||da|| + |db| + |dnu| (regression parameters only)
    D5:           all five deltas to the power 1
    D4:           |db|^rbar + |dnu|^(rbar/2) on multi-atom cells,
                  |db| + |dnu| on singletons
    D6:           (dbeta1, dtau, da) squared with |db|^rbar, |dnu|^(rbar/2)
                  on multi-atom cells, plain sums on singletons

where rbar depends on the cell size (2 -> 4, 3 -> 6; larger cells are
unsupported).  Atom weights exp(beta0/tau) enter unnormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels, model, sampling
from .analysis import UnsupportedCellSize, rbar_known

QUAD_NODES = 2001
RANGE_SIGMA = 10.0

_LOSS_FAMILIES = ("D1", "D2", "D3", "D4", "D5", "D6")
_NEEDS_R = {"D1", "D3"}


@dataclass(frozen=True)
class LossKind:
    family: str
    r: float | None = None

    def __post_init__(self):
        if self.family not in _LOSS_FAMILIES:
            raise ValueError("unknown loss family %r" % self.family)
        if self.family in _NEEDS_R:
            if self.r is None or not (float(self.r) >= 1.0):
                raise ValueError("%s needs an exponent r >= 1" % self.family)
            object.__setattr__(self, "r", float(self.r))
        elif self.r is not None:
            raise ValueError("%s takes no exponent" % self.family)

    def __str__(self) -> str:
        if self.r is None:
            return self.family
        r = self.r
        return "%s(%s)" % (self.family, "%d" % int(r) if r == int(r) else repr(r))

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        text = text.strip()
        if "(" in text:
            fam, _, rest = text.partition("(")
            if not rest.endswith(")"):
                raise ValueError("malformed loss kind %r" % text)
            return cls(fam.strip(), float(rest[:-1]))
        return cls(text)


@dataclass(frozen=True)
class VoronoiAssignment:
    """cells[j] lists fitted atom indices nearest to reference atom j."""

    cells: tuple
    distances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(tuple(c) for c in self.cells))
        dist = np.asarray(self.distances, dtype=float)
        dist.setflags(write=False)
        object.__setattr__(self, "distances", dist)


def _atom_vector(at: model.Atom, tau: float) -> np.ndarray:
    return np.concatenate([at.beta1, [tau], at.a, [at.b], [at.nu]])


def voronoi_assign(G: model.MixingMeasure, G_star: model.MixingMeasure) -> VoronoiAssignment:
    """Nearest-reference-atom assignment; ties go to the lowest index."""
    if G.d != G_star.d:
        raise ValueError("measures must share the input dimension")
    fitted = np.array([_atom_vector(at, G.tau) for at in G.atoms])
    ref = np.array([_atom_vector(at, G_star.tau) for at in G_star.atoms])
    diff = fitted[:, None, :] - ref[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    owners = np.argmin(dist, axis=1)  # argmin takes the lowest index on ties
    cells = [[] for _ in range(G_star.k)]
    for i, j in enumerate(owners):
        cells[j].append(i)
    return VoronoiAssignment(tuple(tuple(c) for c in cells), dist)


def atom_deltas(at: model.Atom, tau: float, ref: model.Atom, tau_star: float) -> np.ndarray:
    """Five nonnegative deltas: ||dbeta1||, |dtau|, ||da||, |db|, |dnu|."""
    return np.array(
        [
            float(np.linalg.norm(at.beta1 - ref.beta1)),
            abs(tau - tau_star),
            float(np.linalg.norm(at.a - ref.a)),
            abs(at.b - ref.b),
            abs(at.nu - ref.nu),
        ]
    )


def kij(delta, kappas) -> float:
    """Sum of the five deltas raised to the matching exponents."""
    delta = np.asarray(delta, dtype=float)
    kappas = np.asarray(kappas, dtype=float)
    if delta.shape != (5,) or kappas.shape != (5,):
        raise ValueError("kij expects five deltas and five exponents")
    if np.any(delta < 0):
        raise ValueError("deltas must be nonnegative")
    return float(np.sum(delta**kappas))


@dataclass(frozen=True)
class LossReport:
    kind: LossKind
    value: float
    assignment: VoronoiAssignment
    per_cell: tuple  # (weight_discrepancy, parameter_term) per reference atom
    empty_cells: tuple

    def to_obj(self) -> dict:
        return {
            "schema": 1,
            "loss_kind": str(self.kind),
            "value": self.value,
            "per_cell": [
                {"weight_discrepancy": wd, "parameter_term": pt} for wd, pt in self.per_cell
            ],
            "cells": [list(c) for c in self.assignment.cells],
            "empty_cells": list(self.empty_cells),
        }


def _param_term(kind: LossKind, deltas_in_cell) -> float:
    """Weighted parameter summand for one cell; deltas_in_cell holds
    (weight, delta-vector) pairs for the fitted atoms assigned there."""
    m = len(deltas_in_cell)
    fam = kind.family
    if fam in ("D1", "D3"):
        kap = np.full(5, kind.r)
        return sum(w * kij(dl, kap) for w, dl in deltas_in_cell)
    if fam == "D2":
        return sum(w * (dl[2] + dl[3] + dl[4]) for w, dl in deltas_in_cell)
    if fam == "D5":
        return sum(w * kij(dl, np.ones(5)) for w, dl in deltas_in_cell)
    if fam == "D4":
        if m <= 1:
            return sum(w * (dl[3] + dl[4]) for w, dl in deltas_in_cell)
        rb = rbar_known(m)
        return sum(w * (dl[3] ** rb + dl[4] ** (rb / 2.0)) for w, dl in deltas_in_cell)
    if fam == "D6":
        if m <= 1:
            return sum(w * kij(dl, np.ones(5)) for w, dl in deltas_in_cell)
        rb = rbar_known(m)
        kap = np.array([2.0, 2.0, 2.0, float(rb), rb / 2.0])
        return sum(w * kij(dl, kap) for w, dl in deltas_in_cell)
    raise AssertionError(fam)


def eval_loss(kind: LossKind, G: model.MixingMeasure, G_star: model.MixingMeasure) -> LossReport:
    """Voronoi loss of a fitted measure against a reference measure.

    Each reference cell contributes |sum of fitted atom weights - reference
    weight| plus the kind-specific parameter term; empty cells contribute
    the bare reference weight and are reported in empty_cells.
    """
    assignment = voronoi_assign(G, G_star)
    w_fit = np.exp(G.beta0_vec / G.tau)
    w_ref = np.exp(G_star.beta0_vec / G_star.tau)
    per_cell = []
    empty = []
    total = 0.0
    for j, cell in enumerate(assignment.cells):
        ref = G_star.atoms[j]
        pairs = [
            (w_fit[i], atom_deltas(G.atoms[i], G.tau, ref, G_star.tau)) for i in cell
        ]
        wd = abs(sum(p[0] for p in pairs) - w_ref[j])
        if not cell:
            empty.append(j)
        pt = _param_term(kind, pairs)
        per_cell.append((float(wd), float(pt)))
        total += wd + pt
    return LossReport(kind, float(total), assignment, tuple(per_cell), tuple(empty))


# ---------------------------------------------------------------------------
# conditional-density distances


@dataclass(frozen=True)
class MCEstimate:
    value: float
    se: float
    n_mc: int


def _simpson_weights(nodes: int, h: float) -> np.ndarray:
    w = np.ones(nodes)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


def _conditional_pdf_grids(G1, G2, xs):
    """Densities of both measures on shared per-x Simpson grids."""
    means1 = model.expert_means(G1, xs)
    means2 = model.expert_means(G2, xs)
    w1 = model.gate_weights_batch(G1, xs)
    w2 = model.gate_weights_batch(G2, xs)
    spread = RANGE_SIGMA * math.sqrt(max(G1.nu_vec.max(), G2.nu_vec.max()))
    lo = np.minimum(means1.min(axis=1), means2.min(axis=1)) - spread
    hi = np.maximum(means1.max(axis=1), means2.max(axis=1)) + spread
    t = np.linspace(0.0, 1.0, QUAD_NODES)
    grids = lo[:, None] + (hi - lo)[:, None] * t[None, :]
    h = (hi - lo) / (QUAD_NODES - 1)
    p1 = kernels.mixture_pdf_grids(grids, w1, means1, G1.nu_vec)
    p2 = kernels.mixture_pdf_grids(grids, w2, means2, G2.nu_vec)
    return p1, p2, h


def _distance_mc(G1, G2, n_mc, seed, integrand):
    if G1.d != G2.d:
        raise ValueError("measures must share the input dimension")
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    rng = sampling.substream(seed, 0xD1)
    xs = rng.standard_normal((n_mc, G1.d))
    p1, p2, h = _conditional_pdf_grids(G1, G2, xs)
    base = _simpson_weights(QUAD_NODES, 1.0)  # unit step; each row scales by its h
    return (integrand(p1, p2) @ base) * h


def tv_distance(G1, G2, n_mc: int = 500, seed: int = 0) -> MCEstimate:
    """Expected total variation between conditional densities, x ~ N(0, I).

    Per draw the y-integral uses composite Simpson on a range covering all
    expert means plus RANGE_SIGMA standard deviations each side.
    """
    vals = 0.5 * _distance_mc(G1, G2, n_mc, seed, lambda p, q: np.abs(p - q))
    return MCEstimate(
        float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))), n_mc
    )


def hellinger_distance(G1, G2, n_mc: int = 500, seed: int = 0) -> MCEstimate:
    """Hellinger distance: sqrt of the mean per-x squared Hellinger integral.

    The reported se is the Monte Carlo standard error of the squared
    distance pushed through the square root (delta method).
    """
    sq = 0.5 * _distance_mc(
        G1, G2, n_mc, seed, lambda p, q: (np.sqrt(p) - np.sqrt(q)) ** 2
    )
    mean_sq = float(sq.mean())
    se_sq = float(sq.std(ddof=1) / math.sqrt(len(sq)))
    hval = math.sqrt(max(mean_sq, 0.0))
    se = se_sq / (2.0 * hval) if hval > 1e-12 else se_sq
    return MCEstimate(hval, se, n_mc)


def hellinger_tv_bounds_per_x(G1, G2, n_mc: int = 100, seed: int = 0):
    """Per-draw (h^2, tv) pairs, for checking h^2 <= tv <= sqrt(2) h."""
    tv_vals = 0.5 * _distance_mc(G1, G2, n_mc, seed, lambda p, q: np.abs(p - q))
    sq_vals = 0.5 * _distance_mc(
        G1, G2, n_mc, seed, lambda p, q: (np.sqrt(p) - np.sqrt(q)) ** 2
    )
    return sq_vals, tv_vals
