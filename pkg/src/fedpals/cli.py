"""Command-line entry point (``fedpals``)."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from fedpals import checks
from fedpals.aggregation import (
    FedPalsProblem,
    SolveReport,
    effective_sample_size,
    fedpals_limit_weights,
    lambda_for_ess,
    residual,
    solve_fedpals,
)
from fedpals.harness import (
    ConfigError,
    ExperimentConfig,
    compare_strategies,
    load_config,
    preset_names,
    read_summary,
    run_experiment,
    with_seed_offset,
)
from fedpals.labelspace import MarginalFileError, load_marginal_file


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed_offset:
        cfg = with_seed_offset(cfg, args.seed_offset)
    return cfg


def _print_summary(path: Path) -> None:
    rows = [r for r in read_summary(path) if r.metric == "final_target_acc"]
    for r in rows:
        setting = r.setting or "-"
        print(f"{r.strategy:<28} setting={setting:<8} acc={r.mean:.4f} +/- {r.std:.4f}  (seeds={r.seeds}, d={r.proj_dist:.4g})")


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.setting is None:
        setting = cfg.settings[0]
    else:
        if cfg.sweep_param is None:
            return _fail(f"--setting: config {cfg.name!r} has no sweep")
        if args.setting not in cfg.sweep_values:
            return _fail(f"--setting: {args.setting!r} is not in sweep.values {list(cfg.sweep_values)}")
        setting = args.setting
    rec, summ = run_experiment(cfg, args.out, settings=[setting])
    _print_summary(summ)
    print(f"wrote {rec} and {summ}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rec, summ = run_experiment(cfg, args.out)
    _print_summary(summ)
    print(f"wrote {rec} and {summ}")
    return 0


def cmd_solve_weights(args) -> int:
    try:
        S, T = load_marginal_file(args.file)
    except OSError as exc:
        return _fail(f"{args.file}: {exc.strerror}")
    if T is None:
        return _fail(f"{args.file}: target: missing field 'probs' (a target record is required)")
    search = None
    if args.ess_target is not None:
        search = lambda_for_ess(S, T, args.ess_target)
        lam = search.lam
    else:
        lam = args.lam
    if math.isinf(lam):
        alpha = fedpals_limit_weights(S, T, "lambda_to_infinity")
        report = SolveReport(alpha, residual(S, T, alpha.alpha), effective_sample_size(alpha, S.sizes),
                             math.inf, 0, True)
    else:
        report = solve_fedpals(FedPalsProblem(S, T, lam))
    out = {
        "ids": list(S.ids),
        "lambda": lam,
        "alpha": report.alpha.tolist(),
        "residual": report.residual,
        "ess": report.ess,
        "ess_fraction": report.ess / S.total,
        "objective": report.objective,
        "iterations": report.iterations,
        "converged": report.converged,
    }
    if search is not None:
        out["ess_target"] = args.ess_target
        out["at_lower_bound"] = search.at_lower_bound
    # Strict JSON has no infinity; the lam -> inf limit is written as the string "inf".
    out = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in out.items()}
    print(json.dumps(out, indent=2, allow_nan=False))
    return 0


def _report(results: list[checks.CheckResult]) -> int:
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_gradcheck(args) -> int:
    return _report(checks.run_gradcheck(cases=args.cases, seed=args.seed))


def cmd_verify_props(args) -> int:
    return _report(checks.run_prop_checks(instances=args.instances, seed=args.seed))


def cmd_compare(args) -> int:
    report = compare_strategies(args.summaries, metric=args.metric)
    sys.stdout.write(report.to_csv() if args.csv else report.to_text())
    return 0


def cmd_presets(args) -> int:
    for name in preset_names():
        print(name)
    return 0


def _non_negative_lambda(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v >= 0 or v == float("inf"):
        raise argparse.ArgumentTypeError(f"must be finite and >= 0, got {text!r}")
    return v


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpals", description="Label-shift-aware federated aggregation simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_args(sp):
        sp.add_argument("config", help="YAML config file or preset name")
        sp.add_argument("--out", default=None, help="output directory (default: the config's output field)")
        sp.add_argument("--seed-offset", type=int, default=0, help="add this to every configured seed")

    sp = sub.add_parser("simulate", help="run one setting of an experiment")
    experiment_args(sp)
    sp.add_argument("--setting", type=float, default=None, help="sweep value to run (default: first)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="run every setting of an experiment")
    experiment_args(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("solve-weights", help="aggregation weights for a marginal file")
    sp.add_argument("file", help="JSON marginal file with clients and target")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lam", type=_non_negative_lambda, default=0.0, help="regularization strength")
    g.add_argument("--ess-target", type=_fraction, default=None, help="desired ESS as a fraction of total samples")
    sp.set_defaults(func=cmd_solve_weights)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--cases", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("verify-props", help="unbiasedness and large-lambda checks")
    sp.add_argument("--instances", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify_props)

    sp = sub.add_parser("compare", help="side-by-side table of summary files")
    sp.add_argument("summaries", nargs="+")
    sp.add_argument("--metric", default="final_target_acc", choices=["final_target_acc", "final_macro_f1"])
    sp.add_argument("--csv", action="store_true", help="delimited output instead of a text table")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("presets", help="list shipped experiment presets")
    sp.set_defaults(func=cmd_presets)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MarginalFileError) as exc:
        return _fail(str(exc))
    except (ValueError, OSError) as exc:
        return _fail(f"{args.command}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
