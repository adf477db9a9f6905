"""Command-line interface.

Subcommands:
    run           simulate one config and write timeline/summary/events CSVs
    compare       replay the same trace under several policies
    pressure-test sweep the ratio grid and report the preferred operating point
    curate        rank candidate policies on a grounded replay
    gen-trace     synthesize a diurnal workload trace file

Exit codes: 0 success, 1 usage error, 2 invalid config, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .driver import (
    RunConfig,
    compare_policies,
    emit_report,
    load_config,
    run_simulation,
    static_baseline_config,
)
from .errors import ConfigError, HetscaleError
from .policy import (
    DEFAULT_RATIO_GRID,
    curate_policy,
    format_ratio,
    sweep_pd_ratios,
)
from .workload import gen_diurnal_trace, save_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message: str):  # noqa: D102 - argparse contract
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetscale", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="simulate one config")
    p_run.add_argument("config", help="YAML run config")
    p_run.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p_run.add_argument(
        "--static-baseline",
        action="store_true",
        help="replace the primary policy with a peak-provisioned static fleet",
    )
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="replay one trace under several policies")
    p_cmp.add_argument("config", help="YAML run config with candidate_policies")
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument(
        "--with-static",
        action="store_true",
        help="also run a peak-provisioned static fleet for reference",
    )
    p_cmp.set_defaults(func=cmd_compare)

    p_pt = sub.add_parser("pressure-test", help="sweep P:D ratios under synthetic pressure")
    p_pt.add_argument("config")
    p_pt.add_argument("--budget", type=int, default=None, help="GPU budget (default: cluster size)")
    p_pt.add_argument("--out", default=None, help="optional directory for pressure.csv")
    p_pt.set_defaults(func=cmd_pressure)

    p_cur = sub.add_parser("curate", help="rank candidate policies on a grounded replay")
    p_cur.add_argument("config")
    p_cur.add_argument("--out", default=None, help="optional directory for curation.csv")
    p_cur.set_defaults(func=cmd_curate)

    p_gen = sub.add_parser("gen-trace", help="synthesize a diurnal workload trace")
    p_gen.add_argument("--out", required=True, help="destination trace CSV")
    p_gen.add_argument("--ticks", type=int, required=True)
    p_gen.add_argument("--base-rate", type=float, required=True)
    p_gen.add_argument("--peak-rate", type=float, required=True)
    p_gen.add_argument(
        "--peak-times", required=True, help="comma-separated peak tick centers, e.g. 480,1140"
    )
    p_gen.add_argument("--peak-width", type=float, default=90.0)
    p_gen.add_argument("--noise", type=float, default=0.0, help="multiplicative noise amplitude")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--input-len", type=float, default=3000.0)
    p_gen.add_argument("--output-len", type=float, default=350.0)
    p_gen.add_argument("--hit-rate", type=float, default=0.0)
    p_gen.add_argument("--hit-jitter", type=float, default=0.0)
    p_gen.add_argument("--tick-seconds", type=float, default=60.0)
    p_gen.set_defaults(func=cmd_gen_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HetscaleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.static_baseline:
        config = static_baseline_config(config)
    report = run_simulation(config)
    out_dir = args.out or config.output_dir
    written = emit_report(report, out_dir)
    for name, timeline in sorted(report.services.items()):
        s = timeline.summary
        print(
            f"{name}: {s.ticks} ticks, {s.gpu_hours:.1f} GPU-hours, "
            f"viol={s.slo_violation_fraction:.4f}, actions={s.scaling_actions}, "
            f"reversals={s.direction_reversals}"
        )
    print(f"wrote {len(written)} files to {out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    config = load_config(args.config)
    svc = config.primary_service()
    policies = [svc.policy, *config.candidate_policies]
    if args.with_static:
        static = static_baseline_config(config)
        policies.append(static.primary_service().policy)
    if len(policies) < 2:
        raise ConfigError("compare needs candidate_policies (or --with-static)")
    reports = compare_policies(config, policies)
    out_dir = Path(args.out or config.output_dir)
    rows = []
    for name in [p.name for p in policies]:
        report = reports[name]
        emit_report(report, out_dir / name)
        s = report.services[svc.name].summary
        rows.append((name, s))
        print(
            f"{name}: {s.gpu_hours:.1f} GPU-hours, viol={s.slo_violation_fraction:.4f}, "
            f"actions={s.scaling_actions}, reversals={s.direction_reversals}"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "comparison.csv", "w") as fh:
        fh.write("policy,gpu_hours,slo_violation_fraction,scaling_actions,direction_reversals,served_decode_tokens\n")
        for name, s in rows:
            fh.write(
                f"{name},{s.gpu_hours!r},{s.slo_violation_fraction!r},"
                f"{s.scaling_actions},{s.direction_reversals},{s.served_decode_tokens!r}\n"
            )
    return EXIT_OK


def cmd_pressure(args) -> int:
    config = load_config(args.config)
    svc = config.primary_service()
    budget = args.budget or config.pressure_gpu_budget()
    grid = config.ratio_grid or DEFAULT_RATIO_GRID
    points = sweep_pd_ratios(svc.profile, config.resolve_trace(), budget, grid)
    header = "ratio    P    D  max_scale  served_tps  per_inst  feasible  breach"
    print(header)
    lines = []
    for pt in points:
        line = (
            f"{pt.ratio_label:>5} {pt.prefill:>4} {pt.decode:>4}  "
            f"{pt.max_scale:>9.3f}  {pt.served_tps:>10.1f}  {pt.decode_tps_per_instance:>8.1f}  "
            f"{str(pt.feasible):>8}  {pt.breach}"
        )
        print(line)
        lines.append(pt)
    feasible = [pt for pt in points if pt.feasible]
    if feasible:
        best = max(feasible, key=lambda pt: (pt.served_tps, -pt.ratio))
        print(f"preferred ratio: {best.ratio_label} ({best.served_tps:.1f} tok/s at budget {budget})")
    else:
        print("no feasible ratio at this budget")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "pressure.csv", "w") as fh:
            fh.write("ratio,prefill,decode,max_scale,served_tps,decode_tps_per_instance,feasible,breach\n")
            for pt in lines:
                fh.write(
                    f"{pt.ratio_label},{pt.prefill},{pt.decode},{pt.max_scale!r},"
                    f"{pt.served_tps!r},{pt.decode_tps_per_instance!r},{pt.feasible},{pt.breach}\n"
                )
    return EXIT_OK


def cmd_curate(args) -> int:
    config = load_config(args.config)
    if not config.candidate_policies:
        raise ConfigError("curate needs a candidate_policies section")
    result = curate_policy(config, slo_violation_budget=config.slo_violation_budget)
    print(f"operating point: ratio {format_ratio(result.r_opt)}, {result.m_hat:.1f} tok/s per decode instance")
    ranked = sorted(result.scores, key=lambda s: s.rank_key(), reverse=True)
    for i, score in enumerate(ranked, 1):
        marker = "*" if score.policy_name == result.p_opt else " "
        print(
            f"{marker}{i}. {score.policy_name}: score={score.score:.1f} tok/GPU-h, "
            f"viol={score.slo_violation_fraction:.4f}, feasible={score.feasible}"
        )
    print(f"selected policy: {result.p_opt}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "curation.csv", "w") as fh:
            fh.write("rank,policy,score,violation_fraction,feasible,selected\n")
            for i, score in enumerate(ranked, 1):
                fh.write(
                    f"{i},{score.policy_name},{score.score!r},{score.slo_violation_fraction!r},"
                    f"{score.feasible},{score.policy_name == result.p_opt}\n"
                )
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    try:
        peaks = [float(x) for x in args.peak_times.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--peak-times must be comma-separated numbers, got {args.peak_times!r}") from None
    if not peaks:
        raise ConfigError("--peak-times must list at least one tick")
    trace = gen_diurnal_trace(
        duration_ticks=args.ticks,
        base_rate=args.base_rate,
        peak_rate=args.peak_rate,
        peak_times=peaks,
        noise_seed=args.seed,
        peak_width=args.peak_width,
        noise_amplitude=args.noise,
        mean_input_len=args.input_len,
        mean_output_len=args.output_len,
        kv_cache_hit_rate=args.hit_rate,
        hit_rate_jitter=args.hit_jitter,
        tick_seconds=args.tick_seconds,
    )
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} ticks to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
