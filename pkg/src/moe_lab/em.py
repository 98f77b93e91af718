"""EM fitting for softmax-gated mixtures of experts.

Each iteration runs an exact E-step in log space, a weighted-least-squares
M-step for every expert (noise variance from the weighted mean squared
residual at the new regression parameters), and a damped Newton-style
ascent pass on the gating parameters with a shared temperature coordinate.
The gating pass never accepts a step that lowers the EM surrogate, so the
mean log-likelihood trace is non-decreasing apart from flagged
empty-cluster rescues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import jsonutil, kernels, model, sampling

NU_FLOOR = 1e-8
TAU_FLOOR = 1e-3


class DegenerateFit(RuntimeError):
    """Raised when the optimizer leaves the configured parameter region.

    The gating likelihood is unbounded in the weight logits beta0/tau, and
    at small sample sizes the ascent can run away to an arbitrarily sharp
    gate.  Three channels are checked after every gating step: a weight
    logit past +beta0_tau_cap (exponentially exploded atom weight; the
    check is one-sided because an arbitrarily negative logit merely
    empties the atom), a logit falling below the model overflow guard
    (the emptying atom drifting out of the representable range), and gate
    sharpness |beta1|/tau past beta1_tau_cap when that cap is set (the
    gate hardening into a change point).
    """


@dataclass(frozen=True)
class NearTruth:
    """Start near a reference measure with N(0, sd^2) jitter per parameter.

    Location fields (beta0, beta1, a, b) are jittered additively; the
    positive scale fields (nu, tau) multiplicatively by exp(sd * Z), the
    same convention RandomInit uses, so no draw can cross zero.  cell_plan
    maps each fitted atom index to a reference atom; it must be surjective
    and is required when the fitted size exceeds the reference size
    (identity when the sizes match).  When several atoms copy one
    reference atom they split its weight (beta0 is shifted by tau*log(1/m)
    for multiplicity m before jittering), so the start matches the
    reference cell masses instead of multiplying them.  Draw order is
    fixed: per atom in index order the fields beta0, beta1, a, b, nu;
    then tau once.
    """

    truth: model.MixingMeasure
    jitter_sd: float = 0.1
    cell_plan: tuple | None = None

    def __post_init__(self):
        if self.jitter_sd < 0:
            raise ValueError("jitter_sd must be >= 0")
        if self.cell_plan is not None:
            object.__setattr__(self, "cell_plan", tuple(int(c) for c in self.cell_plan))


@dataclass(frozen=True)
class RandomInit:
    """Diffuse start: gate and regression parameters N(0, scale^2);
    nu = exp(scale*N - 1) and tau = exp(scale*N - 0.7) keep both positive."""

    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class FitConfig:
    k: int
    init: object = None
    max_em_iters: int = 1000
    em_tol: float = 1e-6
    irls_iters: int = 100
    irls_step: float = 0.01
    tau_min: float = 1e-3
    nu_min: float = 1e-8
    beta0_tau_cap: float = model.BETA0_TAU_CAP
    beta1_tau_cap: float | None = None
    pin_last_atom: bool = True
    paper_gradient: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for name in ("max_em_iters", "irls_iters"):
            if getattr(self, name) < 1:
                raise ValueError("%s must be >= 1" % name)
        for name in ("em_tol", "irls_step", "tau_min", "nu_min", "beta0_tau_cap"):
            if not getattr(self, name) > 0:
                raise ValueError("%s must be positive" % name)
        if self.beta0_tau_cap > model.BETA0_TAU_CAP:
            raise ValueError(
                "beta0_tau_cap may not exceed the measure cap %g" % model.BETA0_TAU_CAP
            )
        if self.beta1_tau_cap is not None and not self.beta1_tau_cap > 0:
            raise ValueError("beta1_tau_cap must be positive when set")


@dataclass(frozen=True)
class FitResult:
    measure: model.MixingMeasure
    loglik_trace: tuple
    converged: bool
    iters: int
    flags: dict = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "schema": 1,
            "measure": model.measure_to_obj(self.measure),
            "loglik_trace": list(self.loglik_trace),
            "converged": self.converged,
            "iters": self.iters,
            "flags": dict(self.flags),
        }

    def to_json(self) -> str:
        return jsonutil.dumps(self.to_obj())


def _validate_plan(plan, k: int, k_star: int) -> tuple:
    if plan is None:
        if k != k_star:
            raise ValueError("cell_plan is required when k != reference size")
        return tuple(range(k))
    plan = tuple(int(c) for c in plan)
    if len(plan) != k:
        raise ValueError("cell_plan must have one entry per fitted atom")
    if any(c < 0 or c >= k_star for c in plan):
        raise ValueError("cell_plan entries must index reference atoms")
    if set(plan) != set(range(k_star)):
        raise ValueError("cell_plan must cover every reference atom")
    return plan


def init_measure(spec, k: int, d: int, rng, pin: bool = True) -> model.MixingMeasure:
    """Build a starting measure from an init spec using the given rng."""
    if isinstance(spec, NearTruth):
        truth = spec.truth
        if truth.d != d:
            raise ValueError("truth dimension %d != data dimension %d" % (truth.d, d))
        plan = _validate_plan(spec.cell_plan, k, truth.k)
        sd = spec.jitter_sd
        mult = [plan.count(j) for j in range(truth.k)]
        atoms = []
        for i in range(k):
            ref = truth.atoms[plan[i]]
            # copies share the reference atom's weight: exp(beta0/tau) sums
            # to the reference cell mass before jitter
            beta0 = ref.beta0 - truth.tau * math.log(mult[plan[i]]) + sd * rng.standard_normal()
            beta1 = ref.beta1 + sd * rng.standard_normal(d)
            a = ref.a + sd * rng.standard_normal(d)
            b = ref.b + sd * rng.standard_normal()
            nu = max(ref.nu * math.exp(sd * rng.standard_normal()), NU_FLOOR)
            atoms.append(model.Atom(beta0, beta1, a, b, nu))
        tau = max(truth.tau * math.exp(sd * rng.standard_normal()), TAU_FLOOR)
        gate = truth.gate
    elif isinstance(spec, RandomInit):
        s = spec.scale
        atoms = []
        for _ in range(k):
            beta0 = s * rng.standard_normal()
            beta1 = s * rng.standard_normal(d)
            a = s * rng.standard_normal(d)
            b = s * rng.standard_normal()
            nu = float(np.exp(s * rng.standard_normal() - 1.0))
            atoms.append(model.Atom(beta0, beta1, a, b, max(nu, NU_FLOOR)))
        tau = max(float(np.exp(s * rng.standard_normal() - 0.7)), TAU_FLOOR)
        gate = model.GateSpec.linear()
    else:
        raise TypeError("init spec must be NearTruth or RandomInit")
    if pin:
        last = atoms[-1]
        atoms[-1] = model.Atom(0.0, np.zeros(d), last.a, last.b, last.nu)
    # keep the atom-weight cap satisfiable for arbitrary draws
    cap = 0.9 * model.BETA0_TAU_CAP * tau
    atoms = [
        model.Atom(min(max(at.beta0, -cap), cap), at.beta1, at.a, at.b, at.nu)
        for at in atoms
    ]
    return model.MixingMeasure(tuple(atoms), tau, gate, pinned=pin)


def _posterior(G: model.MixingMeasure, xs: np.ndarray, ys: np.ndarray):
    logits = model.gate_logits_batch(G, xs)
    means = model.expert_means(G, xs)
    return kernels.posterior_from_logits(logits, means, G.nu_vec, ys)


def e_step(G: model.MixingMeasure, data) -> np.ndarray:
    """Posterior responsibilities; rows sum to one."""
    xs, ys = np.asarray(data.xs, dtype=float), np.asarray(data.ys, dtype=float)
    resp, _, _ = _posterior(G, xs, ys)
    return resp


def m_step_experts(data, resp: np.ndarray, nu_min: float = 1e-8):
    """Per-expert weighted least squares plus weighted residual variance.

    Returns (a, b, nu, n_ridge).  A singular normal matrix falls back to a
    1e-8 ridge and is counted in n_ridge.  Every responsibility column must
    have positive mass.
    """
    xs, ys = np.asarray(data.xs, dtype=float), np.asarray(data.ys, dtype=float)
    n, d = xs.shape
    k = resp.shape[1]
    design = np.hstack([xs, np.ones((n, 1))])
    a = np.empty((k, d))
    b = np.empty(k)
    nu = np.empty(k)
    n_ridge = 0
    for j in range(k):
        wj = resp[:, j]
        sw = float(wj.sum())
        if sw <= 0.0:
            raise ValueError("responsibility column %d has no mass" % j)
        mat = design.T @ (wj[:, None] * design)
        rhs = design.T @ (wj * ys)
        try:
            theta = np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError:
            theta = np.linalg.solve(mat + 1e-8 * np.eye(d + 1), rhs)
            n_ridge += 1
        resid = ys - design @ theta
        a[j] = theta[:d]
        b[j] = theta[d]
        nu[j] = max(float(wj @ (resid * resid)) / sw, nu_min)
    return a, b, nu, n_ridge


def irls_gating_step(G: model.MixingMeasure, data, resp: np.ndarray, cfg: FitConfig):
    """Run the damped gating ascent; returns (updated measure, diagnostics).

    The temperature is optimized as one shared coordinate whose gradient
    and curvature accumulate across experts; with pin_last_atom the last
    atom's gate parameters stay fixed at zero throughout.
    """
    xs = np.asarray(data.xs, dtype=float)
    nfree = G.k - 1 if cfg.pin_last_atom else G.k
    beta1, beta0, tau, it_done, gnorm, rejected = kernels.irls_loop(
        xs,
        np.ascontiguousarray(resp),
        np.ascontiguousarray(G.beta1_mat),
        np.ascontiguousarray(G.beta0_vec),
        G.tau,
        G.gate.act_code,
        max(G.gate.act_p, 1),
        cfg.irls_iters,
        cfg.irls_step,
        cfg.tau_min,
        cfg.paper_gradient,
        nfree,
    )
    if nfree > 0:
        logits = beta0[:nfree] / tau
        worst = float(np.max(logits))
        if worst > cfg.beta0_tau_cap:
            raise DegenerateFit(
                "gating runaway: max beta0/tau = %.4f exceeds the cap %g"
                % (worst, cfg.beta0_tau_cap)
            )
        sink = float(np.min(logits))
        if sink < -model.BETA0_TAU_CAP:
            raise DegenerateFit(
                "atom emptied: beta0/tau = %.4f fell below the overflow guard -%g"
                % (sink, model.BETA0_TAU_CAP)
            )
        if cfg.beta1_tau_cap is not None:
            # sharpness |beta1|/tau is invariant under the joint rescaling of
            # (beta1, beta0, tau); a runaway here is the gate hardening into a
            # change point, which raw beta0/tau does not detect
            sharp = float(np.max(np.sqrt(np.sum(beta1[:nfree] ** 2, axis=1))) / tau)
            if sharp > cfg.beta1_tau_cap:
                raise DegenerateFit(
                    "gate sharpness runaway: max |beta1|/tau = %.4f exceeds the cap %g"
                    % (sharp, cfg.beta1_tau_cap)
                )
    atoms = tuple(
        model.Atom(beta0[j], beta1[j], at.a, at.b, at.nu)
        for j, at in enumerate(G.atoms)
    )
    updated = model.MixingMeasure(atoms, tau, G.gate, G.pinned)
    diag = {"irls_iters": int(it_done), "grad_norm": float(gnorm), "rejected": int(rejected)}
    return updated, diag


def _rescue_empty(G: model.MixingMeasure, xs, ys, pointll, empty_cols):
    """Re-seat empty experts at the lowest-density data point."""
    i_star = int(np.argmin(pointll))  # ties resolve to the lowest index
    spread = max(float(np.var(ys)), NU_FLOOR)
    atoms = list(G.atoms)
    for j in empty_cols:
        at = atoms[j]
        new_b = float(ys[i_star] - at.a @ xs[i_star])
        atoms[j] = model.Atom(at.beta0, at.beta1, at.a, new_b, spread)
    return G.replace_atoms(atoms)


def em_fit(data, cfg: FitConfig) -> FitResult:
    """Fit a k-expert measure to the dataset.

    Stops when the mean log-likelihood changes by less than em_tol over a
    full iteration, or after max_em_iters.  loglik_trace starts with the
    value at the initialization and appends one entry per iteration.
    """
    if cfg.init is None:
        raise ValueError("FitConfig.init is required for em_fit")
    xs = np.asarray(data.xs, dtype=float)
    ys = np.asarray(data.ys, dtype=float)
    rng = sampling.substream(cfg.seed, 0xE0)
    G = init_measure(cfg.init, cfg.k, xs.shape[1], rng, cfg.pin_last_atom)

    flags = {"underflow_points": 0, "rescues": 0, "ridge": 0, "irls_rejected": 0}
    resp, pointll, under = _posterior(G, xs, ys)
    flags["underflow_points"] += under
    ll = float(np.mean(pointll))
    trace = [ll]
    converged = False
    iters = 0
    for _ in range(cfg.max_em_iters):
        iters += 1
        empty = [j for j in range(cfg.k) if resp[:, j].sum() < 1e-10]
        if empty:
            flags["rescues"] += len(empty)
            G = _rescue_empty(G, xs, ys, pointll, empty)
            resp, pointll, under = _posterior(G, xs, ys)
            flags["underflow_points"] += under
            ll = float(np.mean(pointll))
        a, b, nu, n_ridge = m_step_experts(data, resp, cfg.nu_min)
        flags["ridge"] += n_ridge
        atoms = tuple(
            model.Atom(at.beta0, at.beta1, a[j], b[j], nu[j])
            for j, at in enumerate(G.atoms)
        )
        G = G.replace_atoms(atoms)
        G, diag = irls_gating_step(G, data, resp, cfg)
        flags["irls_rejected"] += diag["rejected"]
        resp, pointll, under = _posterior(G, xs, ys)
        flags["underflow_points"] += under
        ll_new = float(np.mean(pointll))
        trace.append(ll_new)
        if abs(ll_new - ll) < cfg.em_tol:
            converged = True
            ll = ll_new
            break
        ll = ll_new
    return FitResult(G, tuple(trace), converged, iters, flags)
