"""Experiment plumbing: configuration, benchmark suites, comparison tables,
latency sweeps and crash testing.  Every output is a deterministic function
of its inputs; floats are printed with a fixed number of decimals.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

from .crashcheck import SweepResult, crash_sweep
from .machine import MachineConfig, Metrics, run
from .schemes import SCHEME_NAMES, make_scheme
from .trace import KINDS, Trace, WorkloadSpec, generate, parse_trace

CONFIG_ENV = "ASAPSIM_CONFIG"
OPT_KEYS = ("opt_lpo_drop", "opt_dpo_coalesce", "opt_dpo_drop")
MACHINE_KEYS = tuple(f.name for f in fields(MachineConfig))

COLUMNS = ["scheme", "benchmark", "cycles", "stall_persist", "stall_lock", "stall_logfull",
           "pm_log", "pm_data", "pm_commit", "pm_evict", "regions", "speedup_vs_sw",
           "traffic_vs_hwundo", "traffic_vs_hwundo_incl"]
SWEEP_COLUMNS = ["scheme", "benchmark", "pm_write_latency"] + COLUMNS[2:]
SUMMARY_COLUMNS = ["scheme", "benchmark", "crash_points", "passed", "failed", "verdict"]


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    machine: MachineConfig = field(default_factory=MachineConfig)
    opts: dict = field(default_factory=lambda: {k: True for k in OPT_KEYS})

    def scheme_opts(self, scheme: str) -> dict:
        return dict(self.opts) if scheme == "asap" else {}


def _parse_bool(text: str, key: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "on", "yes"):
        return True
    if v in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {text!r}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _coerce(raw: dict) -> dict:
    out = {}
    for k, v in raw.items():
        if k in MACHINE_KEYS:
            try:
                out[k] = int(v, 0) if isinstance(v, str) else int(v)
            except ValueError:
                raise ConfigError(f"{k}: expected an integer, got {v!r}") from None
        elif k in OPT_KEYS:
            out[k] = v if isinstance(v, bool) else _parse_bool(str(v), k)
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return out


def resolve_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                   env: dict | None = None) -> RunConfig:
    """Defaults, then the config file (``path`` or ``$ASAPSIM_CONFIG``), then overrides."""
    env = os.environ if env is None else env
    merged: dict = {}
    path = path or env.get(CONFIG_ENV) or None
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        merged.update(_coerce(parse_config_text(text, str(path))))
    merged.update(_coerce({k: v for k, v in (overrides or {}).items() if v is not None}))
    try:
        machine = MachineConfig(**{k: v for k, v in merged.items() if k in MACHINE_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    opts = {k: merged.get(k, True) for k in OPT_KEYS}
    return RunConfig(machine, opts)


# --------------------------------------------------------------------------
# benchmarks


@dataclass(frozen=True)
class Benchmark:
    name: str
    trace: Trace


def _suite_default() -> list[WorkloadSpec]:
    # write-heavy: back-to-back regions, no compute in between
    return [WorkloadSpec(kind, regions=20, stores_per_region=s, threads=t, line_pool=8, seed=1)
            for kind in KINDS for t in (2, 4) for s in (2, 4)]


def _suite_crash() -> list[WorkloadSpec]:
    # oracle-sized: <= 3 threads, <= 8 regions, <= 8 lines
    specs = [WorkloadSpec("swap", regions=2, stores_per_region=2, threads=1, line_pool=2, seed=1)]
    for kind in KINDS:
        specs.append(WorkloadSpec(kind, regions=3, stores_per_region=2, threads=2, line_pool=4, seed=2))
    specs.append(WorkloadSpec("counter", regions=2, stores_per_region=3, threads=3, line_pool=3, seed=3))
    specs.append(WorkloadSpec("producer_consumer", regions=2, stores_per_region=2, threads=3,
                              line_pool=2, seed=4))
    return specs


SUITES = {"default": _suite_default, "crash": _suite_crash}


def suite(name: str) -> list[Benchmark]:
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    return [Benchmark(s.name, generate(s)) for s in SUITES[name]()]


def load_benchmarks(trace_path: str | None = None, workload: str | None = None,
                    suite_name: str | None = None) -> list[Benchmark]:
    given = [x is not None for x in (trace_path, workload, suite_name)]
    if sum(given) != 1:
        raise ConfigError("give exactly one of --trace, --workload, --suite")
    if trace_path is not None:
        try:
            text = Path(trace_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read trace {trace_path}: {exc}") from exc
        return [Benchmark(Path(trace_path).stem, parse_trace(text))]
    if workload is not None:
        spec = WorkloadSpec.parse(workload)
        return [Benchmark(spec.name, generate(spec))]
    return suite(suite_name)


def parse_schemes(text: str) -> list[str]:
    names = [s.strip().lower() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in SCHEME_NAMES]
    if bad or not names:
        raise ConfigError(f"unknown scheme(s) {bad}; expected names from {SCHEME_NAMES}")
    return list(dict.fromkeys(names))


# --------------------------------------------------------------------------
# runs and tables


def run_one(trace: Trace, scheme: str, cfg: RunConfig | None = None) -> Metrics:
    cfg = cfg or RunConfig()
    return run(trace, make_scheme(scheme, **cfg.scheme_opts(scheme)), cfg.machine).metrics


def _fmt(x: float | None) -> str:
    if x is None or math.isnan(x):
        return "nan"
    return f"{x:.4f}"


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def geomean(xs: Iterable[float]) -> float:
    xs = list(xs)
    if not xs:
        return math.nan
    if any(x <= 0 for x in xs):
        return 0.0 if all(math.isfinite(x) for x in xs) else math.nan
    return math.exp(sum(math.log(x) for x in xs) / len(xs))


@dataclass
class Row:
    scheme: str
    benchmark: str
    metrics: Metrics | None
    speedup_vs_sw: float
    traffic_vs_hwundo: float
    traffic_vs_hwundo_incl: float
    latency: int | None = None

    def cells(self) -> list:
        m = self.metrics
        if m is None:  # aggregate row
            base = [""] * 9
        else:
            base = [m.total_cycles, m.stall_cycles["persist"], m.stall_cycles["lock"],
                    m.stall_cycles["logfull"], m.pm_writes["log"], m.pm_writes["data"],
                    m.pm_writes["commit"], m.pm_writes["evict"], m.regions]
        return [self.scheme, self.benchmark, *base, _fmt(self.speedup_vs_sw),
                _fmt(self.traffic_vs_hwundo), _fmt(self.traffic_vs_hwundo_incl)]


def compare(benchmarks: Sequence[Benchmark], schemes: Sequence[str],
            cfg: RunConfig | None = None, with_geomean: bool = True) -> list[Row]:
    """One row per (benchmark, scheme), plus a geomean row per scheme.

    SW and HWUndo are always simulated as the reference points for the
    derived columns, even when they are not among ``schemes``.
    """
    cfg = cfg or RunConfig()
    rows: list[Row] = []
    for b in benchmarks:
        cache: dict[str, Metrics] = {}

        def get(s: str) -> Metrics:
            if s not in cache:
                cache[s] = run_one(b.trace, s, cfg)
            return cache[s]

        sw, undo = get("sw"), get("hwundo")
        for s in schemes:
            m = get(s)
            rows.append(Row(s, b.name, m, _ratio(sw.total_cycles, m.total_cycles),
                            _ratio(m.logging_pm_writes, undo.logging_pm_writes),
                            _ratio(m.total_pm_writes, undo.total_pm_writes)))
    if with_geomean and len(benchmarks) > 1:
        for s in schemes:
            mine = [r for r in rows if r.scheme == s]
            rows.append(Row(s, "geomean", None,
                            geomean(r.speedup_vs_sw for r in mine),
                            geomean(r.traffic_vs_hwundo for r in mine),
                            geomean(r.traffic_vs_hwundo_incl for r in mine)))
    return rows


def rows_csv(rows: Iterable[Row], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def sweep(benchmarks: Sequence[Benchmark], schemes: Sequence[str], latencies: Sequence[int],
          cfg: RunConfig | None = None) -> list[Row]:
    """Rows ordered by (benchmark, scheme, latency)."""
    if len(latencies) < 2:
        raise ConfigError("a sweep needs at least two latency points")
    cfg = cfg or RunConfig()
    by_lat = {lat: compare(benchmarks, schemes,
                           replace(cfg, machine=replace(cfg.machine, pm_write_latency=lat)),
                           with_geomean=False)
              for lat in latencies}
    out = []
    for b in benchmarks:
        for s in schemes:
            for lat in latencies:
                row = next(r for r in by_lat[lat] if r.benchmark == b.name and r.scheme == s)
                row.latency = lat
                out.append(row)
    return out


def sweep_csv(rows: Iterable[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        c = r.cells()
        w.writerow(c[:2] + [r.latency] + c[2:])
    return buf.getvalue()


def write_plot_data(rows: Sequence[Row], outdir: str | os.PathLike) -> list[Path]:
    """Two-column ``latency cycles`` files, one per (benchmark, scheme), plus a manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    series: dict[tuple[str, str], list[Row]] = {}
    for r in rows:
        series.setdefault((r.benchmark, r.scheme), []).append(r)
    written = []
    manifest = ["file\tbenchmark\tscheme\tx\ty"]
    for (bench, scheme), rs in series.items():
        path = outdir / f"{bench}__{scheme}.dat"
        path.write_text("".join(f"{r.latency} {r.metrics.total_cycles}\n" for r in rs))
        manifest.append(f"{path.name}\t{bench}\t{scheme}\tpm_write_latency\tcycles")
        written.append(path)
    man = outdir / "manifest.tsv"
    man.write_text("\n".join(manifest) + "\n")
    return written + [man]


# --------------------------------------------------------------------------
# crash testing


@dataclass
class CrashSummary:
    scheme: str
    benchmark: str
    result: SweepResult

    @property
    def verdict(self) -> str:
        if self.result.skipped:
            return "skipped: no guarantee"
        return "pass" if self.result.ok else "FAIL"

    def cells(self) -> list:
        r = self.result
        return [self.scheme, self.benchmark, len(r.verdicts), r.passed, r.failed, self.verdict]


def crashtest(benchmarks: Sequence[Benchmark], schemes: Sequence[str], cfg: RunConfig | None = None,
              mode: str = "exhaustive", samples: int = 1000, seed: int = 0) -> list[CrashSummary]:
    cfg = cfg or RunConfig()
    if mode == "exhaustive":
        cycles: str | tuple = "all"
    elif mode == "sampled":
        cycles = ("sample", seed, samples)
    else:
        raise ConfigError(f"unknown crash mode {mode!r}")
    return [CrashSummary(s, b.name, crash_sweep(b.trace, s, cfg.machine, cycles=cycles,
                                                scheme_opts=cfg.scheme_opts(s)))
            for b in benchmarks for s in schemes]


def summary_csv(summaries: Iterable[CrashSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        w.writerow(s.cells())
    return buf.getvalue()
