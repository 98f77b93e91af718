"""Convergence-rate experiment harness.

run_experiment samples datasets of increasing size from a reference
measure, fits each with EM from a fresh near-reference initialization, and
records the requested Voronoi losses against the reference.  Work is
distributed over a process pool, but every (grid index, replication) task
derives its randomness from counter-based substreams of the experiment
seed, so raw CSV output is byte-identical for any worker count.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context

import numpy as np

from . import jsonutil, kernels, model, sampling
from .analysis import SlopeFit, loglog_fit
from .em import DegenerateFit, FitConfig, NearTruth, em_fit
from .jsonutil import fmt_float
from .metrics import LossKind, eval_loss

DEFAULT_SEED = 20260815


def table3_measure(gate: model.GateSpec | None = None) -> model.MixingMeasure:
    """Two-expert reference measure used by the stock experiments.

    Expert 1: beta0 = 0, beta1 = -10, a = -1, b = 2, nu = 0.3.
    Expert 2 (pinned): beta0 = 0, beta1 = 0, a = 1, b = 2, nu = 0.4.
    Shared temperature tau = 0.5, input dimension 1.
    """
    gate = gate or model.GateSpec.linear()
    atoms = (
        model.Atom(0.0, [-10.0], [-1.0], 2.0, 0.3),
        model.Atom(0.0, [0.0], [1.0], 2.0, 0.4),
    )
    return model.MixingMeasure(atoms, 0.5, gate, pinned=True)


def _log_grid(lo: float, hi: float, count: int) -> tuple:
    return tuple(int(round(v)) for v in np.geomspace(lo, hi, count))


def default_n_grid() -> tuple:
    return _log_grid(1e4, 1e5, 20)


def desk_n_grid() -> tuple:
    return _log_grid(1e3, 2e4, 10)


@dataclass(frozen=True)
class FitSettings:
    """Scalar EM settings for the harness; k defaults by setting
    (reference size when exact, one extra expert when over)."""

    k: int | None = None
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


@dataclass(frozen=True)
class ExperimentConfig:
    gate: model.GateSpec = field(default_factory=model.GateSpec.linear)
    setting: str = "exact"
    truth: model.MixingMeasure | None = None
    n_grid: tuple = field(default_factory=default_n_grid)
    replications: int = 40
    losses: tuple = (LossKind("D1", 2.0), LossKind("D2"))
    jitter_sd: float = 0.1
    seed: int = DEFAULT_SEED
    workers: int = 0
    fit: FitSettings = field(default_factory=FitSettings)

    def __post_init__(self):
        if self.setting not in ("exact", "over"):
            raise ValueError("setting must be 'exact' or 'over'")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.n_grid or any(int(n) < 1 for n in self.n_grid):
            raise ValueError("n_grid must hold positive sizes")
        if not self.losses:
            raise ValueError("losses must not be empty")
        if self.jitter_sd < 0:
            raise ValueError("jitter_sd must be >= 0")
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "losses", tuple(self.losses))
        if self.truth is None:
            object.__setattr__(self, "truth", table3_measure(self.gate))
        elif self.truth.gate != self.gate:
            raise ValueError("truth gate must match the configured gate")

    @property
    def fit_k(self) -> int:
        if self.fit.k is not None:
            return self.fit.k
        return self.truth.k if self.setting == "exact" else self.truth.k + 1


def desk_profile(cfg: ExperimentConfig) -> ExperimentConfig:
    """Desk-scale override: 10 sizes in [1e3, 2e4], 10 reps, 300 EM iters."""
    return replace(
        cfg,
        n_grid=desk_n_grid(),
        replications=10,
        fit=replace(cfg.fit, max_em_iters=300),
    )


# --- config JSON ----------------------------------------------------------

_GATE_DEFAULT = {"kind": "linear"}


def _gate_from_obj(obj: dict) -> model.GateSpec:
    unknown = set(obj) - {"kind", "p"}
    if unknown:
        raise ValueError("unknown gate fields: %s" % sorted(unknown))
    kind = obj.get("kind", "linear")
    if kind == "linear":
        return model.GateSpec.linear()
    if kind == "power":
        return model.GateSpec.activated(model.Activation.power(int(obj["p"])))
    return model.GateSpec.activated(model.Activation(kind))


def config_from_obj(obj: dict) -> ExperimentConfig:
    allowed = {
        "schema",
        "gate",
        "setting",
        "truth",
        "n_grid",
        "replications",
        "losses",
        "jitter_sd",
        "seed",
        "workers",
        "fit",
    }
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError("unknown config fields: %s" % sorted(unknown))
    gate = _gate_from_obj(obj.get("gate", dict(_GATE_DEFAULT)))
    fit_obj = dict(obj.get("fit", {}))
    fit_fields = {f for f in FitSettings.__dataclass_fields__}
    unknown = set(fit_obj) - fit_fields
    if unknown:
        raise ValueError("unknown fit fields: %s" % sorted(unknown))
    fit = FitSettings(**fit_obj)
    truth = None
    if "truth" in obj and obj["truth"] is not None:
        truth = model.measure_from_obj(obj["truth"], pinned=fit.pin_last_atom)
    kwargs = dict(
        gate=gate,
        setting=obj.get("setting", "exact"),
        truth=truth,
        replications=int(obj.get("replications", 40)),
        losses=tuple(LossKind.parse(s) for s in obj.get("losses", ["D1(2)", "D2"])),
        jitter_sd=float(obj.get("jitter_sd", 0.1)),
        seed=int(obj.get("seed", DEFAULT_SEED)),
        workers=int(obj.get("workers", 0)),
        fit=fit,
    )
    if "n_grid" in obj:
        kwargs["n_grid"] = tuple(int(n) for n in obj["n_grid"])
    return ExperimentConfig(**kwargs)


def config_from_json(text: str) -> ExperimentConfig:
    return config_from_obj(jsonutil.loads(text))


def config_to_obj(cfg: ExperimentConfig) -> dict:
    gate_obj = model.measure_to_obj(cfg.truth)["gate"]
    fit_obj = {name: getattr(cfg.fit, name) for name in FitSettings.__dataclass_fields__}
    return {
        "schema": 1,
        "gate": gate_obj,
        "setting": cfg.setting,
        "truth": model.measure_to_obj(cfg.truth),
        "n_grid": list(cfg.n_grid),
        "replications": cfg.replications,
        "losses": [str(kind) for kind in cfg.losses],
        "jitter_sd": cfg.jitter_sd,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "fit": fit_obj,
    }


# --- experiment execution ---------------------------------------------------


@dataclass(frozen=True)
class RawRow:
    n: int
    replication: int
    loss_kind: str
    value: float
    em_iters: int
    converged: bool
    seed_hex: str


@dataclass(frozen=True)
class SummaryRow:
    loss_kind: str
    n: int
    mean: float
    sd: float
    count: int


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    rows: tuple
    summary: tuple
    slopes: dict
    n_failures: int
    n_degenerate: int
    degraded: bool


def _random_cell_plan(k: int, k_star: int, rng) -> tuple:
    """Surjective atom-to-cell plan; the pinned last atom maps to the pinned
    reference cell so zero gate parameters start in the matching cell.

    Spare atoms double only non-pinned cells.  A cell's fitted mass is the
    unnormalized sum of exp(beta0/tau) over its atoms, and the pinned atom
    contributes a fixed 1; a spare atom sharing its cell could only restore
    the cell mass by sending its own logit to -inf, a direction the
    likelihood is flat in, so the weight discrepancy would never shrink.
    Keeping that cell a singleton leaves every doubled cell's mass tied to
    the density, which the fit can actually match."""
    needed = set(range(k_star - 1))
    while True:
        plan = [int(c) for c in rng.integers(0, max(k_star - 1, 1), size=k - 1)]
        plan.append(k_star - 1)
        if set(plan[:-1]) >= needed:
            return tuple(plan)


def _run_task(cfg: ExperimentConfig, n_idx: int, rep: int):
    n = cfg.n_grid[n_idx]
    key = sampling.stream_key(cfg.seed, n_idx, rep)
    try:
        data_rng = sampling.substream(cfg.seed, n_idx, rep, 0)
        data = sampling.sample_dataset(
            cfg.truth, sampling.SampleConfig(n, cfg.seed), rng=data_rng
        )
        k = cfg.fit_k
        if k == cfg.truth.k:
            plan = None
        else:
            plan_rng = sampling.substream(cfg.seed, n_idx, rep, 1)
            plan = _random_cell_plan(k, cfg.truth.k, plan_rng)
        init = NearTruth(cfg.truth, cfg.jitter_sd, plan)
        fitcfg = FitConfig(
            k=k,
            init=init,
            max_em_iters=cfg.fit.max_em_iters,
            em_tol=cfg.fit.em_tol,
            irls_iters=cfg.fit.irls_iters,
            irls_step=cfg.fit.irls_step,
            tau_min=cfg.fit.tau_min,
            nu_min=cfg.fit.nu_min,
            beta0_tau_cap=cfg.fit.beta0_tau_cap,
            beta1_tau_cap=cfg.fit.beta1_tau_cap,
            pin_last_atom=cfg.fit.pin_last_atom,
            paper_gradient=cfg.fit.paper_gradient,
            seed=key,
        )
        res = em_fit(data, fitcfg)
        rows = tuple(
            RawRow(
                n,
                rep,
                str(kind),
                eval_loss(kind, res.measure, cfg.truth).value,
                res.iters,
                res.converged,
                "%016x" % key,
            )
            for kind in cfg.losses
        )
        return n_idx, rep, rows, None
    except DegenerateFit as exc:
        # a fit that left the admissible parameter region is excluded from
        # the aggregates with its count reported, but is not a failure
        return n_idx, rep, None, ("degenerate", str(exc))
    except Exception as exc:  # failed replication: rows go missing, run degrades
        return n_idx, rep, None, ("failure", "%s: %s" % (type(exc).__name__, exc))


def resolve_workers(requested: int) -> int:
    env = os.environ.get("MOE_LAB_WORKERS", "").strip()
    if env:
        return max(1, int(env))
    if requested and requested > 0:
        return requested
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run the full grid; deterministic for a fixed seed and backend."""
    kernels.warmup()
    workers = resolve_workers(cfg.workers)
    tasks = [
        (n_idx, rep)
        for n_idx in range(len(cfg.n_grid))
        for rep in range(cfg.replications)
    ]
    outputs = {}
    if workers <= 1:
        for n_idx, rep in tasks:
            out = _run_task(cfg, n_idx, rep)
            outputs[(out[0], out[1])] = out
    else:
        ctx = get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for out in pool.map(
                _run_task,
                [cfg] * len(tasks),
                [t[0] for t in tasks],
                [t[1] for t in tasks],
                chunksize=1,
            ):
                outputs[(out[0], out[1])] = out

    rows = []
    n_fail = 0
    n_degen = 0
    for n_idx, rep in tasks:
        _, _, task_rows, err = outputs[(n_idx, rep)]
        if err is None:
            rows.extend(task_rows)
        elif err[0] == "degenerate":
            n_degen += 1
        else:
            n_fail += 1
    degraded = n_fail > 0.1 * len(tasks)

    summary = []
    slopes = {}
    for kind in cfg.losses:
        kind_s = str(kind)
        points = []
        for n in cfg.n_grid:
            vals = [r.value for r in rows if r.loss_kind == kind_s and r.n == n]
            if not vals:
                continue
            arr = np.asarray(vals)
            sd = float(arr.std(ddof=1)) if len(vals) > 1 else 0.0
            summary.append(SummaryRow(kind_s, n, float(arr.mean()), sd, len(vals)))
            points.append((n, float(arr.mean())))
        if len(points) >= 2 and all(v > 0 for _, v in points):
            slopes[kind_s] = loglog_fit(points)
    return ExperimentResult(
        cfg, tuple(rows), tuple(summary), slopes, n_fail, n_degen, degraded
    )


# --- artifact emission ------------------------------------------------------

RAW_HEADER = ["n", "replication", "loss_kind", "value", "em_iters", "converged", "seed_hex"]
SUMMARY_HEADER = ["loss_kind", "n", "mean", "sd", "count"]
SLOPES_HEADER = ["loss_kind", "slope", "stderr", "n_points"]


def emit_csv(result: ExperimentResult, path) -> None:
    """Raw per-replication rows, ordered by grid position then replication."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RAW_HEADER)
        for row in result.rows:
            writer.writerow(
                [
                    row.n,
                    row.replication,
                    row.loss_kind,
                    fmt_float(row.value),
                    row.em_iters,
                    "true" if row.converged else "false",
                    row.seed_hex,
                ]
            )


def _sibling(path, new_tail: str) -> str:
    base = str(path)
    if base.endswith(".csv"):
        base = base[: -len(".csv")]
    return base + new_tail


def emit_summary(result: ExperimentResult, path) -> None:
    """Aggregate table plus slope fits (sibling .slopes.csv / .slopes.json)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for row in result.summary:
            writer.writerow(
                [row.loss_kind, row.n, fmt_float(row.mean), fmt_float(row.sd), row.count]
            )
    with open(_sibling(path, ".slopes.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SLOPES_HEADER)
        for kind in result.config.losses:
            kind_s = str(kind)
            if kind_s in result.slopes:
                fit = result.slopes[kind_s]
                writer.writerow(
                    [kind_s, fmt_float(fit.slope), fmt_float(fit.stderr), fit.n_points]
                )
    slope_obj = {
        "schema": 1,
        "slopes": {
            kind_s: {
                "slope": fit.slope,
                "stderr": fit.stderr,
                "n_points": fit.n_points,
                "intercept": fit.intercept,
            }
            for kind_s, fit in result.slopes.items()
        },
        "n_failures": result.n_failures,
        "n_degenerate": result.n_degenerate,
        "degraded": result.degraded,
    }
    with open(_sibling(path, ".slopes.json"), "w") as fh:
        fh.write(jsonutil.dumps(slope_obj))
