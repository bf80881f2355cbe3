"""Crash injection, recovery, and a brute-force oracle of recoverable states.

The oracle knows nothing about logs or timing.  From the trace and the order
in which regions ran, it enumerates every set of regions that is a per-thread
prefix and closed under dependences, replays each set's stores, and collects
the resulting data states.  A crash is correct when recovery lands in that
set and the regions recovery treats as committed form such a closed prefix.
"""

from __future__ import annotations

import csv
import io
import itertools
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .machine import (ZERO_LINE, DataState, MachineConfig, PMImage, RegionId, RunResult,
                      SimulationError, Simulator, data_state, wal_violations)
from .schemes import make_scheme
from .trace import Op, RegionInfo, Trace, regions_of

MAX_ORACLE_REGIONS = 12


class RecoveryAuditError(RuntimeError):
    """The persisted image breaks an invariant recovery relies on."""


class OracleTooLarge(ValueError):
    pass


@dataclass
class RecoveryReport:
    committed_set: frozenset[RegionId]
    rolled_back: frozenset[RegionId]
    recovered: PMImage

    @property
    def state(self) -> DataState:
        return self.recovered.data_state()


def _committed(image: PMImage) -> frozenset[RegionId]:
    return frozenset(RegionId(t, s) for t, m in image.commit_marks.items() for s in range(m + 1))


def _is_committed(image: PMImage, rid: RegionId) -> bool:
    return rid.seq <= image.mark(rid.thread)


def _audit_marks(image: PMImage, kind: str) -> None:
    # Marks are only written for regions that logged something, and entries
    # are never reclaimed from the image, so the marked region must be visible.
    logged = {e.region for e in image.all_log_entries() if e.kind == kind}
    for t, m in image.commit_marks.items():
        if m >= 0 and RegionId(t, m) not in logged:
            raise RecoveryAuditError(f"commit mark T{t}={m} has no persisted {kind} log entry")


def recover_undo(image: PMImage) -> RecoveryReport:
    """Roll back uncommitted regions, newest log entry first across all threads."""
    out = image.copy()
    losers = [e for e in image.all_log_entries() if not _is_committed(image, e.region)]
    if any(e.kind != "undo" for e in losers):
        raise RecoveryAuditError("redo entries in an undo log")
    for e in reversed(losers):
        out.data[e.line] = e.payload
    for t in out.logs:
        out.logs[t] = [e for e in out.logs[t] if _is_committed(image, e.region)]
    _audit_marks(image, "undo")
    return RecoveryReport(_committed(image), frozenset(e.region for e in losers), out)


def recover_redo(image: PMImage) -> RecoveryReport:
    """Replay committed regions' post-images; drop the rest.

    Regions replay in the persist order of their first entry, and each
    region's entries in log order, so the last store to a line wins even when
    its log writes completed out of order.
    """
    out = image.copy()
    entries = image.all_log_entries()
    if any(e.kind != "redo" for e in entries):
        raise RecoveryAuditError("undo entries in a redo log")
    _audit_marks(image, "redo")
    first: dict[RegionId, int] = {}
    for e in entries:
        first.setdefault(e.region, e.stamp)
    for e in sorted(entries, key=lambda e: (first[e.region], e.index)):
        if _is_committed(image, e.region):
            out.data[e.line] = e.payload
    losers = frozenset(e.region for e in entries if not _is_committed(image, e.region))
    for t in out.logs:
        out.logs[t] = [e for e in out.logs[t] if _is_committed(image, e.region)]
    return RecoveryReport(_committed(image), losers, out)


def recover(image: PMImage, redo: bool) -> RecoveryReport:
    return recover_redo(image) if redo else recover_undo(image)


# --------------------------------------------------------------------------
# oracle


def canonical_order(trace: Trace) -> list[RegionId]:
    """Region order from an untimed run: lowest runnable thread goes first."""
    pcs = [0] * trace.thread_count
    owner: dict[int, int] = {}
    seqs = [0] * trace.thread_count
    order: list[RegionId] = []
    while True:
        progressed = False
        for t, stream in enumerate(trace.streams):
            while pcs[t] < len(stream):
                ev = stream[pcs[t]]
                if ev.op == Op.LOCK:
                    if owner.get(ev.lock, t) != t:
                        break
                    owner[ev.lock] = t
                elif ev.op == Op.UNLOCK:
                    owner.pop(ev.lock, None)
                elif ev.op == Op.BEGIN:
                    order.append(RegionId(t, seqs[t]))
                    seqs[t] += 1
                pcs[t] += 1
                progressed = True
            if progressed:
                break
        if not progressed:
            break
    return order


def dependences(trace: Trace, order: Sequence[RegionId]) -> dict[RegionId, set[RegionId]]:
    """Direct dependences: program order, plus any earlier region that wrote a line this one touches."""
    info = {RegionId(r.thread, r.seq): r for regs in regions_of(trace) for r in regs}
    if set(order) != set(info):
        raise ValueError("region order does not cover exactly the trace's regions")
    deps: dict[RegionId, set[RegionId]] = {rid: set() for rid in order}
    seen: list[RegionId] = []
    for rid in order:
        if rid.seq > 0:
            deps[rid].add(RegionId(rid.thread, rid.seq - 1))
        me = info[rid]
        for prev in seen:
            if info[prev].writes & me.lines:
                deps[rid].add(prev)
        seen.append(rid)
    return deps


def replay(trace: Trace, order: Sequence[RegionId], subset: Iterable[RegionId]) -> DataState:
    info = {RegionId(r.thread, r.seq): r for regs in regions_of(trace) for r in regs}
    chosen = set(subset)
    data: dict[int, tuple] = {}
    for rid in order:
        if rid in chosen:
            for st in info[rid].stores:
                words = list(data.get(st.line, ZERO_LINE))
                words[st.word] = st.value
                data[st.line] = tuple(words)
    return data_state(data)


def is_closed_prefix(subset: Iterable[RegionId], deps: dict[RegionId, set[RegionId]]) -> bool:
    s = set(subset)
    if not s <= set(deps):
        return False
    return all(deps[r] <= s for r in s)


@dataclass
class ValidStateSet:
    order: list[RegionId]
    deps: dict[RegionId, set[RegionId]]
    subsets: list[frozenset[RegionId]]
    states: set[DataState] = field(default_factory=set)

    def __contains__(self, state: DataState) -> bool:
        return state in self.states

    def __len__(self) -> int:
        return len(self.states)


def oracle(trace: Trace, order: Sequence[RegionId] | None = None,
           max_regions: int = MAX_ORACLE_REGIONS) -> ValidStateSet:
    n = trace.region_count()
    if n > max_regions:
        raise OracleTooLarge(f"{n} regions exceeds the oracle bound of {max_regions}")
    order = list(order) if order is not None else canonical_order(trace)
    deps = dependences(trace, order)
    per_thread = [len(regs) for regs in regions_of(trace)]
    subsets = []
    states = set()
    for cut in itertools.product(*(range(k + 1) for k in per_thread)):
        s = frozenset(RegionId(t, q) for t, k in enumerate(cut) for q in range(k))
        if is_closed_prefix(s, deps):
            subsets.append(s)
            states.add(replay(trace, order, s))
    return ValidStateSet(order, deps, subsets, states)


# --------------------------------------------------------------------------
# crash sweep


@dataclass
class Verdict:
    crash_cycle: int
    scheme: str
    committed_regions: str
    verdict: str  # pass | fail | skipped | abort
    detail: str = ""


@dataclass
class SweepResult:
    scheme: str
    verdicts: list[Verdict]
    run: RunResult | None = None
    counterexample: str | None = None

    @property
    def passed(self) -> int:
        return sum(v.verdict == "pass" for v in self.verdicts)

    @property
    def failed(self) -> int:
        return sum(v.verdict in ("fail", "abort") for v in self.verdicts)

    @property
    def skipped(self) -> bool:
        return bool(self.verdicts) and all(v.verdict == "skipped" for v in self.verdicts)

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def to_csv(self, header: bool = True) -> str:
        return verdicts_csv(self.verdicts, header)


VERDICT_COLUMNS = ["crash_cycle", "scheme", "committed_regions", "verdict", "detail"]


def verdicts_csv(verdicts: Iterable[Verdict], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(VERDICT_COLUMNS)
    for v in verdicts:
        w.writerow([v.crash_cycle, v.scheme, v.committed_regions, v.verdict, v.detail])
    return buf.getvalue()


def _fmt_set(s: Iterable[RegionId]) -> str:
    return ";".join(str(r) for r in sorted(s))


def crash_sweep(trace: Trace, scheme: str, config: MachineConfig | None = None, *,
                cycles: str | tuple = "all", scheme_opts: dict | None = None,
                check: bool = True, max_oracle_regions: int = MAX_ORACLE_REGIONS) -> SweepResult:
    """Crash at every cycle (``"all"``) or a seeded sample (``("sample", seed, n)``)."""
    sch = make_scheme(scheme, **(scheme_opts or {}))
    if not sch.crash_consistent:
        return SweepResult(scheme, [Verdict(-1, scheme, "", "skipped", "no guarantee")])
    try:
        res = Simulator(trace, sch, config, check=check).run()
    except SimulationError as exc:
        return SweepResult(scheme, [Verdict(-1, scheme, "", "abort", str(exc))])

    order = res.region_order
    deps = dependences(trace, order)
    try:
        valid = oracle(trace, order, max_oracle_regions)
    except OracleTooLarge:
        if cycles == "all":
            raise
        valid = None  # fall back to replaying the committed set directly

    horizon = res.metrics.drain_cycles
    if cycles == "all":
        points = range(horizon + 1)
    else:
        _, seed, n = cycles
        rng = random.Random(seed)
        points = sorted(rng.sample(range(horizon + 1), min(n, horizon + 1)))

    done = sorted(res.completed, key=lambda o: o.stamp)
    image = PMImage()
    applied = 0
    cache: dict[int, tuple[str, str, str]] = {}
    verdicts: list[Verdict] = []
    counterexample = None
    wal = wal_violations(res.events, redo=sch.redo)
    for t in points:
        while applied < len(done) and done[applied].complete_time <= t:
            image.apply(done[applied])
            applied += 1
        if applied not in cache:
            cache[applied] = _judge(trace, order, deps, valid, image, sch.redo)
        committed, verdict, detail = cache[applied]
        if verdict == "pass" and wal:
            verdict, detail = "fail", "WAL violated: " + wal[0]
        verdicts.append(Verdict(t, scheme, committed, verdict, detail))
        if verdict != "pass" and counterexample is None:
            ctx = [e for e in res.events if e.cycle <= t][-40:]
            counterexample = (f"crash at cycle {t}: {detail}\n"
                              + "\n".join(f"  {e.cycle:>6} {e.kind:<14} T{e.thread} {e.region} "
                                          f"{'' if e.line is None else hex(e.line)} bank={e.bank}"
                                          for e in ctx))
    return SweepResult(scheme, verdicts, res, counterexample)


def _judge(trace, order, deps, valid, image: PMImage, redo: bool) -> tuple[str, str, str]:
    try:
        rep = recover(image, redo)
    except RecoveryAuditError as exc:
        return "", "fail", f"audit: {exc}"
    committed = _fmt_set(rep.committed_set)
    if not is_closed_prefix(rep.committed_set, deps):
        missing = {d for r in rep.committed_set if r in deps for d in deps[r]} - set(rep.committed_set)
        return committed, "fail", f"committed set not dependence-closed (missing {_fmt_set(missing)})"
    state = rep.state
    if valid is not None and state not in valid:
        return committed, "fail", "recovered state not in oracle set"
    # stronger than membership: the state must be exactly what the regions
    # recovery calls committed produce (catches a mark that beat its data)
    if state != replay(trace, order, rep.committed_set):
        return committed, "fail", "recovered state differs from replay of committed regions"
    return committed, "pass", ""
