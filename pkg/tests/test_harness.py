import csv
import io

import pytest

from asapsim import cli, harness
from asapsim.harness import (COLUMNS, Benchmark, ConfigError, RunConfig, compare, geomean, resolve_config,
                             rows_csv, suite, sweep)
from asapsim.machine import MachineConfig
from asapsim.trace import Trace, WorkloadSpec, generate


def bench(spec="kind=swap,regions=3,threads=2"):
    s = WorkloadSpec.parse(spec)
    return Benchmark(s.name, generate(s))


def parse(text):
    return list(csv.DictReader(io.StringIO(text)))


# ---- config


def test_defaults():
    cfg = resolve_config(env={})
    assert cfg.machine == MachineConfig() and all(cfg.opts.values())


def test_precedence_flags_over_file_over_defaults(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\npm_write_latency = 300\npm_banks=2\nopt_dpo_drop = off\n")
    cfg = resolve_config(f, {"pm_banks": 8}, env={})
    assert cfg.machine.pm_write_latency == 300 and cfg.machine.pm_banks == 8
    assert cfg.opts["opt_dpo_drop"] is False and cfg.opts["opt_lpo_drop"] is True


def test_env_names_config(tmp_path):
    f = tmp_path / "env.cfg"
    f.write_text("pm_read_latency=99\n")
    assert resolve_config(env={harness.CONFIG_ENV: str(f)}).machine.pm_read_latency == 99


@pytest.mark.parametrize("text", ["bogus=1", "pm_banks=0", "pm_banks=many", "opt_lpo_drop=maybe", "novalue"])
def test_bad_config(tmp_path, text):
    f = tmp_path / "bad.cfg"
    f.write_text(text + "\n")
    with pytest.raises(ConfigError):
        resolve_config(f, env={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "nope.cfg", env={})


# ---- suites


def test_suites_shape():
    default = suite("default")
    assert len(default) == 20 and len({b.name for b in default}) == 20
    for b in suite("crash"):
        lines = {ev.line for s in b.trace.streams for ev in s if ev.line is not None}
        assert b.trace.thread_count <= 3 and b.trace.region_count() <= 8 and len(lines) <= 8
    with pytest.raises(ConfigError):
        suite("huge")


def test_load_benchmarks_needs_one_source():
    with pytest.raises(ConfigError):
        harness.load_benchmarks()
    with pytest.raises(ConfigError):
        harness.load_benchmarks(workload="kind=swap", suite_name="crash")


# ---- tables


def test_compare_sw_speedup_is_one():
    rows = compare([bench()], ["sw", "asap"])
    sw = next(r for r in rows if r.scheme == "sw")
    assert sw.speedup_vs_sw == 1.0


def test_compare_csv_columns_and_geomean():
    text = rows_csv(compare([bench(), bench("kind=queue,regions=3,threads=2")], ["sw", "hwundo", "asap"]))
    rows = parse(text)
    assert list(rows[0]) == COLUMNS
    assert COLUMNS[:13] == ["scheme", "benchmark", "cycles", "stall_persist", "stall_lock", "stall_logfull",
                            "pm_log", "pm_data", "pm_commit", "pm_evict", "regions", "speedup_vs_sw",
                            "traffic_vs_hwundo"]
    geo = [r for r in rows if r["benchmark"] == "geomean"]
    assert [r["scheme"] for r in geo] == ["sw", "hwundo", "asap"]
    assert geo[1]["traffic_vs_hwundo"] == "1.0000"


def test_np_empty_trace_row_is_zero():
    (row,) = compare([Benchmark("empty", Trace(()))], ["np"])
    cells = row.cells()
    assert cells[2:11] == [0] * 9


def test_asap_not_slower_than_hwundo():
    rows = compare([bench("kind=counter,regions=4,threads=3")], ["hwundo", "asap"])
    c = {r.scheme: r.metrics.total_cycles for r in rows}
    assert c["asap"] <= c["hwundo"]


def test_asap_log_writes_bounded_by_hwundo():
    for b in suite("default")[:6]:
        rows = compare([b], ["hwundo", "asap"])
        w = {r.scheme: r.metrics.pm_writes["log"] for r in rows}
        assert w["asap"] <= w["hwundo"]


def test_geomean():
    assert geomean([2.0, 8.0]) == pytest.approx(4.0)
    assert geomean([]) != geomean([])  # nan


def test_opts_reach_asap_only():
    cfg = RunConfig(opts={"opt_lpo_drop": True, "opt_dpo_coalesce": False, "opt_dpo_drop": False})
    on = compare([bench("kind=counter,regions=6,line_pool=1")], ["asap"]).pop().metrics
    off = compare([bench("kind=counter,regions=6,line_pool=1")], ["asap"], cfg).pop().metrics
    assert off.pm_writes["data"] > on.pm_writes["data"]
    assert cfg.scheme_opts("hwundo") == {}


# ---- sweep


def test_sweep_rows_and_plot_files(tmp_path):
    rows = sweep([bench()], ["np", "asap"], [150, 300])
    assert [(r.scheme, r.latency) for r in rows] == [("np", 150), ("np", 300), ("asap", 150), ("asap", 300)]
    files = harness.write_plot_data(rows, tmp_path)
    dat = sorted(p for p in files if p.suffix == ".dat")
    assert len(dat) == 2
    lines = dat[0].read_text().splitlines()
    assert [ln.split()[0] for ln in lines] == ["150", "300"]
    assert (tmp_path / "manifest.tsv").read_text().startswith("file\tbenchmark\tscheme")


def test_sweep_point_matches_run():
    b = bench()
    rows = sweep([b], ["asap"], [150, 600])
    single = compare([b], ["asap"]).pop()
    assert rows[0].cells()[2:] == single.cells()[2:]


def test_sweep_needs_two_points():
    with pytest.raises(ConfigError):
        sweep([bench()], ["np"], [150])


def test_np_latency_insensitive_without_evictions():
    rows = sweep([bench()], ["np"], [150, 300])
    assert rows[0].metrics.total_cycles == rows[1].metrics.total_cycles


# ---- CLI


def run_cli(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_run_row(capsys):
    code, out, _ = run_cli(["run", "--scheme", "hwundo", "--workload", "kind=swap,regions=2"], capsys)
    rows = parse(out)
    assert code == 0 and len(rows) == 1 and rows[0]["scheme"] == "hwundo"


def test_cli_run_trace_file_and_events(tmp_path, capsys):
    t = tmp_path / "t.txt"
    t.write_text("T0 BEGIN\nT0 ST 0x1000 0 7\nT0 END\n")
    ev = tmp_path / "ev.csv"
    code, out, _ = run_cli(["run", "--scheme", "sw", "--trace", str(t), "--pm-write-latency", "100",
                            "--events", str(ev)], capsys)
    assert code == 0 and parse(out)[0]["cycles"] == "303"
    assert "LPO_COMPLETE" in ev.read_text()


def test_cli_run_invalid_trace(tmp_path, capsys):
    t = tmp_path / "bad.txt"
    t.write_text("T0 BEGIN\nT0 BEGIN\n")
    code, _, err = run_cli(["run", "--scheme", "np", "--trace", str(t)], capsys)
    assert code == 2 and "nested" in err


def test_cli_compare_needs_two(capsys):
    code, _, err = run_cli(["compare", "--schemes", "sw", "--workload", "kind=swap"], capsys)
    assert code == 2 and "at least two" in err


def test_cli_opt_toggle(capsys):
    args = ["run", "--scheme", "asap", "--workload", "kind=counter,regions=6,line_pool=1"]
    _, on, _ = run_cli(args, capsys)
    _, off, _ = run_cli(args + ["--opt-dpo-drop", "off", "--opt-dpo-coalesce", "off"], capsys)
    assert int(parse(off)[0]["pm_data"]) > int(parse(on)[0]["pm_data"])


def test_cli_sweep(tmp_path, capsys):
    code, out, _ = run_cli(["sweep", "--workload", "kind=swap", "--schemes", "hwundo,asap",
                            "--latencies", "100,200", "--plot-dir", str(tmp_path)], capsys)
    rows = parse(out)
    assert code == 0 and [r["pm_write_latency"] for r in rows] == ["100", "200", "100", "200"]
    assert (tmp_path / "manifest.tsv").exists()


def test_cli_crashtest_summary(tmp_path, capsys):
    v = tmp_path / "v.csv"
    code, out, _ = run_cli(["crashtest", "--workload", "kind=swap,regions=2", "--verdicts", str(v)], capsys)
    rows = parse(out)
    assert code == 0
    assert {r["scheme"]: r["verdict"] for r in rows} == {
        "np": "skipped: no guarantee", "sw": "pass", "hwundo": "pass", "hwredo": "pass", "asap": "pass"}
    assert v.read_text().splitlines()[0].startswith("crash_cycle,")


def test_cli_crashtest_fails_on_broken_run(capsys, monkeypatch):
    from asapsim import crashcheck
    from asapsim.crashcheck import SweepResult, Verdict

    monkeypatch.setattr(harness, "crash_sweep", lambda tr, s, *a, **k: SweepResult(
        s, [Verdict(5, s, "", "fail", "boom")], None, "crash at cycle 5: boom"))
    code, _, err = run_cli(["crashtest", "--workload", "kind=swap", "--schemes", "asap"], capsys)
    assert code == 1 and "boom" in err
    assert crashcheck.crash_sweep is not harness.crash_sweep


def test_cli_crashtest_oracle_guard(capsys):
    code, _, err = run_cli(["crashtest", "--workload", "kind=counter,regions=30,threads=2",
                            "--schemes", "asap"], capsys)
    assert code == 2 and "oracle" in err


def test_cli_gen_roundtrip(tmp_path, capsys):
    out = tmp_path / "t.txt"
    assert cli.main(["gen", "--workload", "kind=queue,regions=2,threads=2", "--out", str(out)]) == 0
    code, text, _ = run_cli(["run", "--scheme", "np", "--trace", str(out)], capsys)
    assert code == 0 and parse(text)[0]["regions"] == "4"


def test_cli_bad_workload(capsys):
    code, _, err = run_cli(["gen", "--workload", "kind=nope"], capsys)
    assert code == 2 and "unknown workload kind" in err
