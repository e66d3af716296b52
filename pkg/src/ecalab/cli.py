"""Command-line entry point: ``ecalab <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 bound violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dgp as dgp_mod
from .config import RunConfig, load_run_config
from .errors import DivergenceDetected, EcaError
from .gradients import three_way_check
from .model import EcaConfig, ModelParams
from .numerics import Rng, homogeneity
from .theory import TOL, gain_sweep, random_batch, sweep
from .train import save_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VIOLATION = 0, 2, 3, 4

log = logging.getLogger("ecalab")


def _parse_levels(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON run config (sections dgp, train, eca, output)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def _run_config(args) -> RunConfig:
    return load_run_config(args.config, args.overrides)


def _dataset(args, config: RunConfig):
    if getattr(args, "data", None):
        train_b, val_b = dgp_mod.load_dataset(args.data)
        return train_b.config, train_b, val_b
    cfg = config.dgp
    if getattr(args, "calibrate_sigma", None) is not None:
        cfg = replace(cfg, eta=dgp_mod.calibrate_eta(args.calibrate_sigma, cfg))
    train_b, val_b = dgp_mod.generate(cfg)
    return cfg, train_b, val_b


# --- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _run_config(args)
    cfg, train_b, val_b = _dataset(args, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dgp_mod.save_dataset(out, train_b, val_b)
    hs = homogeneity(train_b)
    print(f"wrote {out}: {train_b.S} train / {val_b.S} val samples, eta={cfg.eta:.6g}, "
          f"sigma_tilde={hs.sigma_tilde:.6g}, R_tilde={hs.R_tilde:.6g}")
    return EXIT_OK


def _trace_violations(trace, eca: EcaConfig) -> int:
    """Convex-regime bound failures recorded in a trace."""
    bad = 0
    for r in trace.rows:
        if r["slack_cor1"] < -TOL or r["slack_cor2"] < -TOL:
            bad += 1
        elif not eca.use_sra and r["gain_precondition"] and r["pcc_gain"] > r["pcc_gain_bound"] + TOL:
            bad += 1
    return bad


def cmd_train(args) -> int:
    config = _run_config(args)
    tc = config.train
    if args.eca is not None:
        eca = EcaConfig.full(**_eca_options(tc.eca)) if args.eca == "on" else EcaConfig.baseline(**_eca_options(tc.eca))
        tc = replace(tc, eca=eca)
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    if args.checkpoint_every is not None:
        tc = replace(tc, checkpoint_every=args.checkpoint_every)
    cfg, train_b, val_b = _dataset(args, config)
    out = Path(args.out_dir or config.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps({"dgp": cfg.to_dict(), "train": tc.to_dict()}, indent=1))
    try:
        trace, params = train(tc, train_b, val_b, checkpoint_dir=out)
    except DivergenceDetected as exc:
        if exc.trace is not None:
            exc.trace.to_csv(out / config.output.trace_name)
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    trace.to_csv(out / config.output.trace_name)
    save_checkpoint(out / config.output.checkpoint_name, params, tc, tc.epochs)
    if args.plot:
        from .plotting import trace_figure

        trace_figure(trace, out / "trace.png", title="ECA" if tc.eca.use_sra else "baseline")
    val_mse = trace.final("mse", "val") if val_b is not None else float("nan")
    val_pcc = trace.final("pcc", "val") if val_b is not None else float("nan")
    print(f"final val MSE={val_mse:.6g} PCC={val_pcc:.6g} plateau_epoch={trace.plateau_epoch}")
    violations = _trace_violations(trace, tc.eca)
    if violations:
        print(f"{violations} epoch rows violate a convex-regime bound", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def _eca_options(eca: EcaConfig) -> dict:
    d = eca.to_dict()
    for k in ("use_sra", "use_dats", "use_dnpl"):
        d.pop(k)
    return d


def cmd_gradcheck(args) -> int:
    rng = Rng(args.seed)
    results = []
    for k in range(args.trials):
        r = rng.child(k)
        batch = random_batch(r)
        params = ModelParams(r.normal(batch.d), r.normal(batch.d), float(r.normal()), None)
        res = three_way_check(batch, params)
        res.update(trial=k, S=batch.S, d=batch.d)
        results.append(res)
    failed = [r for r in results if not r["passed"]]
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=1))
    worst = {k: max(r[k] for r in results) for k in results[0] if k.endswith(("_autodiff", "_fd"))} if results else {}
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} trials agree; worst scores "
          + ", ".join(f"{k}={v:.3g}" for k, v in worst.items()))
    return EXIT_VIOLATION if failed else EXIT_OK


def cmd_validate(args) -> int:
    reports = sweep(args.seed, args.sweeps) + gain_sweep(args.seed + 1, args.sweeps)
    if args.out:
        Path(args.out).write_text(json.dumps([r.to_dict() for r in reports], indent=1, default=_json_default))
    by_name: dict[str, list] = {}
    for r in reports:
        by_name.setdefault(r.bound_name, []).append(r)
    violated = 0
    for name, reps in by_name.items():
        met = sum(r.precondition_met for r in reps)
        bad = sum(r.violated for r in reps)
        lemma_bad = sum(not r.context.get("perturbation_lemma_ok", True) for r in reps)
        violated += bad + lemma_bad
        worst = min((r.slack for r in reps if r.precondition_met), default=float("nan"))
        print(f"{name:20s} draws={len(reps):5d} precondition={met:5d} violations={bad} "
              f"lemma_failures={lemma_bad} min_slack={worst:.3g}")
    print("PASS" if not violated else f"FAIL ({violated} violations)")
    return EXIT_VIOLATION if violated else EXIT_OK


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def cmd_study(args) -> int:
    from .study import VARIANTS, plateau_spread, run_batch_size_study, run_homogeneity_study

    config = _run_config(args)
    tc = config.train if args.epochs is None else replace(config.train, epochs=args.epochs)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    out = Path(args.out_dir or config.output.out_dir)
    traces = out / "traces" if args.traces else None
    try:
        seeds = range(tc.seed, tc.seed + args.seeds)
        report = run_homogeneity_study(_parse_levels(args.levels), seeds, tc, config.dgp,
                                       variants, jobs=args.jobs, trace_dir=traces)
    except DivergenceDetected as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    report.write(out)
    for row in report.summary_rows():
        print(f"level={row['level']:.2f} {row['variant']:12s} val_pcc={row['median_val_pcc']:.4f} "
              f"val_mse={row['median_val_mse']:.4g} rho0={row['rho0']:.4f}")
    if args.batch_sizes:
        sizes = [int(x) for x in args.batch_sizes.split(",")]
        bs = run_batch_size_study(min(_parse_levels(args.levels)), seeds, sizes, tc, config.dgp,
                                  jobs=args.jobs, trace_dir=traces)
        bs.write(out / "batch_size")
        spread = plateau_spread(bs)
        print(f"plateau spread across batch sizes {sizes}: per seed {spread}, median {np.median(spread):.0f} "
              f"of {tc.epochs} epochs")
    if args.plot:
        from .plotting import study_figure

        study_figure(report.summary_rows(), out / "study.png")
    baseline_bad = [r for r in report.runs if r.variant == "baseline"
                    and (r.worst_slack_cor1 < -TOL or r.worst_slack_cor2 < -TOL)]
    if baseline_bad:
        print(f"{len(baseline_bad)} baseline runs violate a convex-regime bound", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="ecalab", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file", formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset JSON path")
    p.add_argument("--calibrate-sigma", type=float, default=None,
                   help="choose eta so the measured sigma_tilde hits this value")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write its trace", formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--data", default=None, help="dataset JSON; None generates data from the config")
    p.add_argument("--calibrate-sigma", type=float, default=None, help="calibrate eta before generating data")
    p.add_argument("--eca", choices=["on", "off"], default=None,
                   help="all three mechanisms on or off; None keeps the config flags")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--checkpoint-every", type=int, default=None, help="checkpoint interval in epochs")
    p.add_argument("--out-dir", default=None, help="output directory; None uses output.out_dir")
    p.add_argument("--plot", action="store_true", help="also render trace.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="closed form vs autodiff vs finite differences", formatter_class=fmt)
    p.add_argument("--trials", type=int, default=50, help="random instances")
    p.add_argument("--seed", type=int, default=0, help="sweep seed")
    p.add_argument("--out", default=None, help="JSON results path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("validate-theory", help="Monte-Carlo sweep of every bound", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="sweep seed")
    p.add_argument("--sweeps", type=int, default=1000, help="random draws per check")
    p.add_argument("--out", default=None, help="JSON array of bound reports")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("study", help="homogeneity-level comparison of all variants", formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--levels", default="0.10,0.24,0.42,0.73", help="comma-separated sigma_tilde targets")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per level, counting up from train.seed")
    p.add_argument("--variants", default=None,
                   help="comma-separated subset of baseline,eca,eca_no_sra,eca_no_dats,eca_no_dnpl; None runs all")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--batch-sizes", default=None,
                   help="also run the mini-batch ablation at the lowest level, e.g. 32,64,128")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    p.add_argument("--out-dir", default=None, help="output directory; None uses output.out_dir")
    p.add_argument("--traces", action="store_true", help="keep every per-run trace CSV")
    p.add_argument("--plot", action="store_true", help="also render study.png")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceDetected as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (EcaError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
