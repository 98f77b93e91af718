"""Command-line interface.

Exit codes: 0 on success, 2 on argument or input errors (bad paths, malformed
JSON, unknown config keys, invalid values), 3 when an experiment run is
degraded (more than 10% of replications failed) or a single fit ends
degenerate (gating runaway past the configured cap).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, em, harness, jsonutil, metrics, model, sampling


def _read_text(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise ValueError("cannot read %s: %s" % (path, exc.strerror or exc)) from exc


def _read_measure(path: str) -> model.MixingMeasure:
    return model.measure_from_json(_read_text(path))


def _emit(obj, out: str | None) -> None:
    text = jsonutil.dumps(obj)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _cmd_sample(args) -> int:
    G = _read_measure(args.measure)
    cfg = sampling.SampleConfig(args.n, args.seed)
    data = sampling.sample_dataset(G, cfg)
    data.to_csv(args.out)
    return 0


def _fit_config_from_obj(obj: dict) -> em.FitConfig:
    allowed = {
        "schema",
        "k",
        "seed",
        "init",
        "max_em_iters",
        "em_tol",
        "irls_iters",
        "irls_step",
        "tau_min",
        "nu_min",
        "beta0_tau_cap",
        "beta1_tau_cap",
        "pin_last_atom",
        "paper_gradient",
    }
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError("unknown fit config fields: %s" % sorted(unknown))
    init_obj = obj.get("init")
    if init_obj is None:
        raise ValueError("fit config needs an 'init' block")
    kind = init_obj.get("kind")
    if kind == "near_truth":
        bad = set(init_obj) - {"kind", "truth", "jitter_sd", "cell_plan"}
        if bad:
            raise ValueError("unknown init fields: %s" % sorted(bad))
        init = em.NearTruth(
            model.measure_from_obj(init_obj["truth"]),
            float(init_obj.get("jitter_sd", 0.1)),
            init_obj.get("cell_plan"),
        )
    elif kind == "random":
        bad = set(init_obj) - {"kind", "scale"}
        if bad:
            raise ValueError("unknown init fields: %s" % sorted(bad))
        init = em.RandomInit(float(init_obj.get("scale", 1.0)))
    else:
        raise ValueError("init kind must be 'near_truth' or 'random'")
    kwargs = {
        name: obj[name]
        for name in allowed - {"schema", "init"}
        if name in obj
    }
    return em.FitConfig(init=init, **kwargs)


def _cmd_fit(args) -> int:
    data = sampling.Dataset.from_csv(args.data)
    cfg = _fit_config_from_obj(jsonutil.loads(_read_text(args.config)))
    result = em.em_fit(data, cfg)
    _emit(result.to_obj(), args.out)
    return 0


def _cmd_losses(args) -> int:
    fitted = _read_measure(args.fitted)
    truth = _read_measure(args.truth)
    kinds = [metrics.LossKind.parse(s) for s in args.kinds.split(",") if s.strip()]
    if not kinds:
        raise ValueError("no loss kinds given")
    reports = [metrics.eval_loss(kind, fitted, truth) for kind in kinds]
    _emit({"schema": 1, "losses": [r.to_obj() for r in reports]}, args.out)
    return 0


def _cmd_tv(args) -> int:
    ga = _read_measure(args.measure_a)
    gb = _read_measure(args.measure_b)
    fn = metrics.hellinger_distance if args.metric == "hellinger" else metrics.tv_distance
    est = fn(ga, gb, n_mc=args.n_mc, seed=args.seed)
    _emit(
        {"schema": 1, "metric": args.metric, "value": est.value, "se": est.se, "n_mc": est.n_mc},
        args.out,
    )
    return 0


def _cmd_pde_check(args) -> int:
    G = _read_measure(args.measure)
    rng = sampling.substream(args.seed, 0x9DE)
    act = None if G.gate.is_linear else G.gate.activation
    max1 = 0.0
    max2 = 0.0
    for at in G.atoms:
        for _ in range(args.points):
            x = rng.standard_normal(G.d)
            y = float(at.a @ x + at.b + rng.standard_normal())
            max1 = max(max1, abs(model.pde1_residual(at, G.tau, x, y, act)))
            max2 = max(max2, abs(model.pde2_residual(at, G.tau, x, y, act)))
    _emit(
        {
            "schema": 1,
            "gate": "linear" if G.gate.is_linear else G.gate.activation.kind,
            "max_abs_pde1": max1,
            "max_abs_pde2": max2,
            "points_per_atom": args.points,
        },
        args.out,
    )
    return 0


def _cmd_rbar_search(args) -> int:
    res = analysis.search_nontrivial(args.m, args.r, budget=args.budget, seed=args.seed)
    obj = res.to_obj()
    obj["m"] = args.m
    obj["r"] = args.r
    _emit(obj, args.out)
    return 0


def _cmd_indep_check(args) -> int:
    if args.activation == "power":
        act = model.Activation.power(args.p)
    else:
        act = model.Activation(args.activation)
    w = np.array([float(v) for v in args.w.split(",")])
    rep = analysis.independence_check(act, args.order, w, n_probe=args.n_probe, seed=args.seed)
    obj = rep.to_obj()
    obj["activation"] = args.activation
    _emit(obj, args.out)
    return 0


def _cmd_experiment(args) -> int:
    cfg = harness.config_from_json(_read_text(args.config))
    if args.profile == "desk":
        cfg = harness.desk_profile(cfg)
    if args.workers is not None:
        from dataclasses import replace

        cfg = replace(cfg, workers=args.workers)
    os.makedirs(args.out_dir, exist_ok=True)
    result = harness.run_experiment(cfg)
    harness.emit_csv(result, os.path.join(args.out_dir, "raw.csv"))
    harness.emit_summary(result, os.path.join(args.out_dir, "summary.csv"))
    with open(os.path.join(args.out_dir, "config.json"), "w") as fh:
        fh.write(jsonutil.dumps(harness.config_to_obj(cfg)) + "\n")
    if result.degraded:
        sys.stderr.write(
            "experiment degraded: %d of %d replications failed\n"
            % (result.n_failures, len(cfg.n_grid) * cfg.replications)
        )
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw a dataset CSV from a measure")
    p.add_argument("--measure", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("fit", help="fit a measure to a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("losses", help="Voronoi losses of a fitted measure")
    p.add_argument("--fitted", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--kinds", required=True, help="comma list, e.g. D1(2),D2")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_losses)

    p = sub.add_parser("tv", help="distance between conditional densities")
    p.add_argument("--measure-a", required=True)
    p.add_argument("--measure-b", required=True)
    p.add_argument("--metric", choices=("tv", "hellinger"), default="tv")
    p.add_argument("--n-mc", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_tv)

    p = sub.add_parser("pde-check", help="interaction residuals of a measure")
    p.add_argument("--measure", required=True)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_pde_check)

    p = sub.add_parser("rbar-search", help="search the algebraic system")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_rbar_search)

    p = sub.add_parser("indep-check", help="feature independence of an activation")
    p.add_argument("--activation", choices=("sigmoid", "gelu", "power", "identity"), required=True)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--order", type=int, choices=(1, 2), required=True)
    p.add_argument("--w", required=True, help="comma list of gate coefficients")
    p.add_argument("--n-probe", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_indep_check)

    p = sub.add_parser("experiment", help="run a convergence-rate experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--profile", choices=("desk",), default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=_cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except em.DegenerateFit as exc:
        sys.stderr.write("degenerate fit: %s\n" % exc)
        return 3
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        sys.stderr.write("error: %s\n" % exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
