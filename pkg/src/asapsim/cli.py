"""Command-line entry point: ``asapsim run|compare|sweep|crashtest|gen``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .crashcheck import OracleTooLarge, verdicts_csv
from .machine import InvalidTraceError, SimulationError
from .trace import TraceSyntaxError, WorkloadSpec, generate, render_trace


def _add_common(p: argparse.ArgumentParser, *, single_scheme: bool = False) -> None:
    src = p.add_argument_group("trace source (pick one)")
    src.add_argument("--trace", help="trace file")
    src.add_argument("--workload", help="workload spec, e.g. kind=swap,regions=4,seed=1")
    src.add_argument("--suite", help="bundled suite: default | crash")
    if single_scheme:
        p.add_argument("--scheme", required=True, help="np | sw | hwundo | hwredo | asap")
    else:
        p.add_argument("--schemes", default="np,sw,hwundo,hwredo,asap",
                       help="comma-separated scheme list")
    p.add_argument("--config", help=f"key=value config file (default: ${harness.CONFIG_ENV})")
    p.add_argument("--out", help="output file (default: stdout)")
    m = p.add_argument_group("machine overrides")
    for key in harness.MACHINE_KEYS:
        m.add_argument("--" + key.replace("_", "-"), dest=key, type=int, metavar="N")
    for key in harness.OPT_KEYS:
        m.add_argument("--" + key.replace("_", "-"), dest=key, choices=("on", "off"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asapsim",
                                 description="Persistent-memory logging simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="simulate one scheme and print a CSV row per benchmark")
    _add_common(p, single_scheme=True)
    p.add_argument("--events", help="also write the event log CSV here (single trace only)")

    p = sub.add_parser("compare", help="compare schemes; adds speedup and traffic columns")
    _add_common(p)

    p = sub.add_parser("sweep", help="vary pm_write_latency; long-form CSV plus plot data")
    _add_common(p)
    p.add_argument("--latencies", default="150,300,600,1200")
    p.add_argument("--plot-dir", help="directory for two-column .dat files and manifest")

    p = sub.add_parser("crashtest", help="crash at every (or sampled) cycle and check recovery")
    _add_common(p)
    p.add_argument("--mode", choices=("exhaustive", "sampled"), default="exhaustive")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verdicts", help="write every per-cycle verdict to this CSV")

    p = sub.add_parser("gen", help="write a generated trace")
    p.add_argument("--workload", required=True)
    p.add_argument("--out", help="output file (default: stdout)")
    return ap


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _cfg(args) -> harness.RunConfig:
    overrides = {k: getattr(args, k) for k in harness.MACHINE_KEYS + harness.OPT_KEYS}
    return harness.resolve_config(args.config, overrides)


def _benchmarks(args):
    return harness.load_benchmarks(args.trace, args.workload, args.suite)


def cmd_run(args) -> int:
    cfg = _cfg(args)
    scheme = harness.parse_schemes(args.scheme)
    if len(scheme) != 1:
        raise harness.ConfigError("--scheme takes one name; use compare for several")
    benches = _benchmarks(args)
    rows = harness.compare(benches, scheme, cfg, with_geomean=False)
    _emit(harness.rows_csv(rows), args.out)
    if args.events:
        if len(benches) != 1:
            raise harness.ConfigError("--events needs a single trace")
        from .machine import run
        from .schemes import make_scheme
        res = run(benches[0].trace, make_scheme(scheme[0], **cfg.scheme_opts(scheme[0])), cfg.machine)
        Path(args.events).write_text(res.events.to_csv())
    return 0


def cmd_compare(args) -> int:
    schemes = harness.parse_schemes(args.schemes)
    if len(schemes) < 2:
        raise harness.ConfigError("compare needs at least two schemes")
    rows = harness.compare(_benchmarks(args), schemes, _cfg(args))
    _emit(harness.rows_csv(rows), args.out)
    return 0


def cmd_sweep(args) -> int:
    try:
        lats = [int(x, 0) for x in args.latencies.split(",") if x.strip()]
    except ValueError:
        raise harness.ConfigError(f"bad latency list {args.latencies!r}") from None
    rows = harness.sweep(_benchmarks(args), harness.parse_schemes(args.schemes), lats, _cfg(args))
    _emit(harness.sweep_csv(rows), args.out)
    if args.plot_dir:
        harness.write_plot_data(rows, args.plot_dir)
    return 0


def cmd_crashtest(args) -> int:
    summaries = harness.crashtest(_benchmarks(args), harness.parse_schemes(args.schemes), _cfg(args),
                                  args.mode, args.samples, args.seed)
    _emit(harness.summary_csv(summaries), args.out)
    if args.verdicts:
        Path(args.verdicts).write_text(
            "".join(verdicts_csv(s.result.verdicts, header=(i == 0)) for i, s in enumerate(summaries)))
    bad = [s for s in summaries if s.verdict == "FAIL"]
    for s in bad:
        if s.result.counterexample:
            print(f"{s.scheme} on {s.benchmark}: {s.result.counterexample}", file=sys.stderr)
    return 1 if bad else 0


def cmd_gen(args) -> int:
    _emit(render_trace(generate(WorkloadSpec.parse(args.workload))), args.out)
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep,
            "crashtest": cmd_crashtest, "gen": cmd_gen}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.cmd](args)
    except InvalidTraceError as exc:
        print(f"asapsim: invalid trace:\n{exc}", file=sys.stderr)
        return 2
    except (harness.ConfigError, TraceSyntaxError, OracleTooLarge, ValueError, OSError) as exc:
        print(f"asapsim: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"asapsim: simulation failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
