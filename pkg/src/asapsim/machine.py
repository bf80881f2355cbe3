"""Timing and state substrate.

A global cycle clock drives simulated threads (coroutines that yield delays
or blocking conditions) and a banked persistent-memory controller.  The
controller owns the persisted image: it changes only when a persist op
completes, so a crash at cycle ``t`` sees exactly the ops with
``complete_time <= t``.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING, Callable, Iterable, Iterator, NamedTuple

from .trace import WORDS_PER_LINE, Op, Trace, validate

if TYPE_CHECKING:
    from .schemes import Scheme

ZERO_LINE = (0,) * WORDS_PER_LINE
# Per-thread commit registers and log rings live far above any trace line.
COMMIT_REG_BASE = 1 << 48
LOG_BASE = 1 << 44


def commit_register_line(thread: int) -> int:
    return COMMIT_REG_BASE + thread


def log_line(thread: int, index: int, capacity: int) -> int:
    """PM line holding log slot ``index`` (absolute position) of ``thread``'s ring."""
    return LOG_BASE + thread * capacity + index % capacity


class SimulationError(RuntimeError):
    """The run cannot make progress (deadlock, dependence cycle, ...)."""


class InvalidTraceError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("trace failed validation:\n  " + "\n  ".join(map(str, self.violations)))


@dataclass(frozen=True)
class MachineConfig:
    pm_write_latency: int = 150
    pm_read_latency: int = 150
    pm_banks: int = 4
    cache_capacity_lines: int = 1024
    store_cost: int = 1
    load_hit_cost: int = 1
    nop_cost: int = 1
    log_capacity_entries_per_thread: int = 4096

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")


class RegionId(NamedTuple):
    thread: int
    seq: int

    def __str__(self) -> str:
        return f"T{self.thread}:{self.seq}"


class OpKind(str, enum.Enum):
    LPO = "LPO"
    DPO = "DPO"
    MARK = "MARK"
    EVICT = "EVICT"


CATEGORY = {OpKind.LPO: "log", OpKind.DPO: "data", OpKind.MARK: "commit", OpKind.EVICT: "evict"}


class OpState(str, enum.Enum):
    QUEUED = "Queued"
    HELD = "Held"
    IN_SERVICE = "InService"
    COMPLETE = "Complete"
    DROPPED = "Dropped"


@dataclass(eq=False)
class PersistOp:
    kind: OpKind
    line: int
    thread: int
    region: RegionId | None
    payload: tuple
    # DPOs may serve several regions (coalescing, dropped obligations)
    serves: set[RegionId] = field(default_factory=set)
    waits_on: list["PersistOp"] = field(default_factory=list)
    log_kind: str = "undo"
    # PM line actually written (log slot, commit register); None = ``line``
    addr: int | None = None
    log_index: int = -1
    op_id: int = -1
    bank: int = -1
    state: OpState = OpState.QUEUED
    issue_time: int = -1
    start_time: int | None = None
    complete_time: int | None = None
    stamp: int | None = None  # global persist order, assigned at completion

    @property
    def pending(self) -> bool:
        return self.state in (OpState.QUEUED, OpState.HELD)

    @property
    def done(self) -> bool:
        return self.state == OpState.COMPLETE

    def eligible(self) -> bool:
        return all(w.state == OpState.COMPLETE for w in self.waits_on)

    def __repr__(self) -> str:
        return (f"<{self.kind.value}#{self.op_id} line={self.line:#x} {self.region} "
                f"{self.state.value} t={self.issue_time}/{self.start_time}/{self.complete_time}>")


@dataclass(frozen=True)
class LogEntry:
    region: RegionId
    line: int
    payload: tuple
    stamp: int
    kind: str = "undo"
    index: int = -1  # absolute position in the thread's log ring


@dataclass
class PMImage:
    """Durable state: data lines, per-thread persisted log, per-thread commit mark."""

    data: dict[int, tuple] = field(default_factory=dict)
    logs: dict[int, list[LogEntry]] = field(default_factory=lambda: defaultdict(list))
    commit_marks: dict[int, int] = field(default_factory=dict)

    def words(self, line: int) -> tuple:
        return self.data.get(line, ZERO_LINE)

    def mark(self, thread: int) -> int:
        return self.commit_marks.get(thread, -1)

    def apply(self, op: PersistOp) -> None:
        if op.kind == OpKind.LPO:
            self.logs[op.thread].append(LogEntry(op.region, op.line, op.payload, op.stamp, op.log_kind,
                                                op.log_index))
        elif op.kind in (OpKind.DPO, OpKind.EVICT):
            self.data[op.line] = op.payload
        elif op.kind == OpKind.MARK:
            self.commit_marks[op.thread] = max(self.mark(op.thread), op.payload[0])

    def copy(self) -> "PMImage":
        logs = defaultdict(list, {t: list(v) for t, v in self.logs.items()})
        return PMImage(dict(self.data), logs, dict(self.commit_marks))

    def all_log_entries(self) -> list[LogEntry]:
        return sorted((e for v in self.logs.values() for e in v), key=lambda e: e.stamp)

    def data_state(self) -> "DataState":
        return data_state(self.data)


DataState = tuple  # sorted tuple of (line, words) with all-zero lines omitted


def data_state(data: dict[int, tuple]) -> DataState:
    return tuple(sorted((ln, w) for ln, w in data.items() if w != ZERO_LINE))


class EventRecord(NamedTuple):
    cycle: int
    kind: str
    thread: int | None
    region: RegionId | None
    line: int | None
    bank: int | None


class EventLog(list):
    """Append-only list of :class:`EventRecord`; list index is the global order."""

    def add(self, cycle, kind, thread=None, region=None, line=None, bank=None) -> None:
        self.append(EventRecord(cycle, kind, thread, region, line, bank))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "cycle", "kind", "thread", "region", "line", "bank"])
        for i, r in enumerate(self):
            w.writerow([i, r.cycle, r.kind, "" if r.thread is None else r.thread,
                        "" if r.region is None else str(r.region),
                        "" if r.line is None else hex(r.line),
                        "" if r.bank is None else r.bank])
        return buf.getvalue()


# --------------------------------------------------------------------------
# cache


class AccessResult(NamedTuple):
    hit: bool
    evicted: int | None  # a dirty line pushed out by this access


class WriteBackCache:
    """Fully associative LRU write-back cache tracking residency and dirtiness.

    Line contents are not stored here; the simulator keeps the newest value of
    every line in its architectural memory map.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._lines: OrderedDict[int, bool] = OrderedDict()  # line -> dirty

    def access(self, line: int, is_store: bool = False) -> AccessResult:
        hit = line in self._lines
        evicted = None
        if hit:
            self._lines.move_to_end(line)
        else:
            if len(self._lines) >= self.capacity:
                victim, dirty = self._lines.popitem(last=False)
                if dirty:
                    evicted = victim
            self._lines[line] = False
        if is_store:
            self._lines[line] = True
        return AccessResult(hit, evicted)

    def is_dirty(self, line: int) -> bool:
        return self._lines.get(line, False)

    def clean(self, line: int) -> None:
        if line in self._lines:
            self._lines[line] = False

    def __contains__(self, line: int) -> bool:
        return line in self._lines

    def __len__(self) -> int:
        return len(self._lines)

    def resident(self) -> list[int]:
        """Resident lines, least recently used first."""
        return list(self._lines)


# --------------------------------------------------------------------------
# persistent-memory controller


class PMController:
    """Banked PM write service.

    Each bank serves one op at a time for ``pm_write_latency`` cycles, in
    FIFO order except that an op whose ``waits_on`` are not all Complete is
    Held and may be overtaken.
    """

    def __init__(self, config: MachineConfig, events: EventLog | None = None):
        self.config = config
        self.events = events if events is not None else EventLog()
        self.image = PMImage()
        self.queues: list[list[PersistOp]] = [[] for _ in range(config.pm_banks)]
        self.busy: list[PersistOp | None] = [None] * config.pm_banks
        self.completed: list[PersistOp] = []
        self.all_ops: list[PersistOp] = []
        self._heap: list[tuple[int, int, int, PersistOp]] = []
        self._next_id = 0
        self._next_stamp = 0
        self.writes = {"log": 0, "data": 0, "commit": 0, "evict": 0}
        self.dropped = 0

    def bank_of(self, line: int) -> int:
        return line % self.config.pm_banks

    def issue(self, op: PersistOp, now: int) -> PersistOp:
        if op.state != OpState.QUEUED:
            raise ValueError(f"can only issue a Queued op, got {op.state}")
        op.op_id = self._next_id
        self._next_id += 1
        op.issue_time = now
        op.bank = self.bank_of(op.line if op.addr is None else op.addr)
        if not op.eligible():
            op.state = OpState.HELD
        self.queues[op.bank].append(op)
        self.all_ops.append(op)
        self.events.add(now, f"{op.kind.value}_ISSUE", op.thread, op.region, op.line, op.bank)
        self._kick(op.bank, now)
        return op

    def drop(self, op: PersistOp, now: int) -> None:
        if not op.pending:
            raise ValueError(f"cannot drop {op!r}: only Queued/Held ops may be dropped")
        self.queues[op.bank].remove(op)
        op.state = OpState.DROPPED
        self.dropped += 1
        self.events.add(now, f"{op.kind.value}_DROP", op.thread, op.region, op.line, op.bank)

    def _kick(self, bank: int, now: int) -> None:
        if self.busy[bank] is not None:
            return
        q = self.queues[bank]
        for i, op in enumerate(q):
            if op.eligible():
                del q[i]
                op.state = OpState.IN_SERVICE
                op.start_time = now
                op.complete_time = now + self.config.pm_write_latency
                self.busy[bank] = op
                heapq.heappush(self._heap, (op.complete_time, bank, op.op_id, op))
                for r in sorted(op.serves) or [op.region]:
                    self.events.add(now, f"{op.kind.value}_START", op.thread, r, op.line, bank)
                return
            op.state = OpState.HELD

    def next_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def complete_next(self) -> PersistOp:
        """Retire the earliest in-service op; start whatever becomes eligible."""
        now, bank, _, op = heapq.heappop(self._heap)
        op.state = OpState.COMPLETE
        op.stamp = self._next_stamp
        self._next_stamp += 1
        self.busy[bank] = None
        self.image.apply(op)
        self.completed.append(op)
        self.writes[CATEGORY[op.kind]] += 1
        for r in sorted(op.serves) or [op.region]:
            self.events.add(now, f"{op.kind.value}_COMPLETE", op.thread, r, op.line, bank)
        for b in range(len(self.queues)):
            self._kick(b, now)
        return op

    def drain(self) -> int:
        """Complete everything in flight (used by unit tests); returns last time."""
        t = 0
        while self._heap:
            t = self.complete_next().complete_time
        return t

    @property
    def in_flight(self) -> int:
        return len(self._heap) + sum(len(q) for q in self.queues)

    def snapshot(self, now: int) -> PMImage:
        return snapshot_from(self.completed, now)


def snapshot_from(completed: Iterable[PersistOp], now: int) -> PMImage:
    """Image holding exactly the ops complete at cycle ``now``."""
    img = PMImage()
    for op in sorted((o for o in completed if o.complete_time <= now), key=lambda o: o.stamp):
        img.apply(op)
    return img


# --------------------------------------------------------------------------
# simulator


class Delay(NamedTuple):
    cycles: int


class Block(NamedTuple):
    """Park the thread until ``ready()`` holds; time spent counts as ``reason``."""

    reason: str  # "persist" | "lock" | "logfull"
    ready: Callable[[], bool]


def wait_ops(ops: Iterable[PersistOp], reason: str = "persist") -> Iterator[Block]:
    pending = [op for op in ops if op.state != OpState.COMPLETE]
    if pending:
        yield Block(reason, lambda: all(op.state == OpState.COMPLETE for op in pending))


@dataclass
class Metrics:
    total_cycles: int = 0
    drain_cycles: int = 0
    pm_writes: dict[str, int] = field(default_factory=lambda: {"log": 0, "data": 0, "commit": 0, "evict": 0})
    stall_cycles: dict[str, int] = field(default_factory=lambda: {"persist": 0, "lock": 0, "logfull": 0})
    regions: int = 0
    regions_committed: int = 0
    dropped_ops: int = 0
    commit_latency_hist: dict[int, int] = field(default_factory=dict)

    @property
    def total_pm_writes(self) -> int:
        return sum(self.pm_writes.values())

    @property
    def logging_pm_writes(self) -> int:
        return self.pm_writes["log"] + self.pm_writes["data"] + self.pm_writes["commit"]


@dataclass
class RunResult:
    metrics: Metrics
    image: PMImage
    events: EventLog
    ops: list[PersistOp]
    completed: list[PersistOp]
    region_order: list[RegionId]
    end_stall: dict[RegionId, int]
    end_time: dict[RegionId, int]
    commit_time: dict[RegionId, int]
    scheme: "Scheme"

    def snapshot(self, now: int) -> PMImage:
        return snapshot_from(self.completed, now)


@dataclass
class _Thread:
    tid: int
    proc: Iterator
    region: RegionId | None = None
    next_seq: int = 0
    blocked: Block | None = None
    blocked_since: int = 0
    finished: int | None = None


class Simulator:
    """Deterministic discrete-event execution of a trace under a scheme.

    Threads run as coroutines.  At equal cycles, PM completions are handled
    before thread steps and threads step in thread-id order.
    """

    def __init__(self, trace: Trace, scheme: "Scheme", config: MachineConfig | None = None,
                 *, check: bool = True, debug: bool = False):
        if check:
            bad = validate(trace)
            if bad:
                raise InvalidTraceError(bad)
        self.trace = trace
        self.config = config or MachineConfig()
        self.scheme = scheme
        self.debug = debug
        self.now = 0
        self.events = EventLog()
        self.pm = PMController(self.config, self.events)
        self.cache = WriteBackCache(self.config.cache_capacity_lines)
        self.memory: dict[int, tuple] = {}
        self.metrics = Metrics()
        self.locks: dict[int, int] = {}
        self.lock_waiters: dict[int, list[int]] = defaultdict(list)
        self.region_order: list[RegionId] = []
        self.end_stall: dict[RegionId, int] = {}
        self.end_time: dict[RegionId, int] = {}
        self.commit_time: dict[RegionId, int] = {}
        self._ready: list[tuple[int, int]] = []  # (time, tid)
        self.threads = [_Thread(t, self._proc(t, s)) for t, s in enumerate(trace.streams)]
        scheme.attach(self)

    # ---- services for schemes -------------------------------------------

    def words(self, line: int) -> tuple:
        return self.memory.get(line, ZERO_LINE)

    def issue(self, kind: OpKind, line: int, thread: int, region: RegionId | None, payload: tuple,
              *, waits_on: Iterable[PersistOp] = (), serves: Iterable[RegionId] = (),
              log_kind: str = "undo", addr: int | None = None, log_index: int = -1) -> PersistOp:
        if kind == OpKind.MARK and addr is None:
            addr = commit_register_line(thread)
        op = PersistOp(kind, line, thread, region, tuple(payload), set(serves),
                       [w for w in waits_on if w.state != OpState.COMPLETE], log_kind,
                       addr, log_index)
        return self.pm.issue(op, self.now)

    def drop(self, op: PersistOp) -> None:
        self.pm.drop(op, self.now)

    def log(self, kind: str, thread=None, region=None, line=None, bank=None) -> None:
        self.events.add(self.now, kind, thread, region, line, bank)

    def region_committed(self, rid: RegionId) -> None:
        self.commit_time[rid] = self.now
        self.metrics.regions_committed += 1
        self.log("COMMIT", rid.thread, rid)
        if rid in self.end_time:
            lat = self.now - self.end_time[rid]
            bucket = 0 if lat <= 0 else 1 << (lat - 1).bit_length()
            self.metrics.commit_latency_hist[bucket] = self.metrics.commit_latency_hist.get(bucket, 0) + 1

    # ---- thread coroutines ----------------------------------------------

    def _proc(self, tid: int, stream) -> Iterator:
        cfg, sch, th = self.config, self.scheme, None
        for ev in stream:
            th = self.threads[tid]
            op = ev.op
            if op == Op.BEGIN:
                rid = RegionId(tid, th.next_seq)
                th.next_seq += 1
                th.region = rid
                self.region_order.append(rid)
                self.metrics.regions += 1
                self.log("BEGIN", tid, rid)
                yield from sch.on_begin(rid)
                yield Delay(1)
            elif op == Op.END:
                rid = th.region
                start = self.now
                self.end_time[rid] = start
                self.log("END", tid, rid)
                yield from sch.on_end(rid)
                self.end_stall[rid] = self.now - start
                self.log("END_RETIRE", tid, rid)
                th.region = None
                yield Delay(1)
            elif op == Op.ST:
                res = self.cache.access(ev.line, is_store=False)
                if res.evicted is not None:
                    yield from sch.on_evict(res.evicted, self.words(res.evicted))
                yield from sch.on_store(th.region, ev.line, ev.word, ev.value)
                words = list(self.words(ev.line))
                words[ev.word] = ev.value
                self.memory[ev.line] = tuple(words)
                self.cache.access(ev.line, is_store=True)
                yield Delay(cfg.store_cost)
            elif op == Op.LD:
                res = self.cache.access(ev.line)
                if res.evicted is not None:
                    yield from sch.on_evict(res.evicted, self.words(res.evicted))
                yield from sch.on_load(th.region, ev.line, ev.word)
                yield Delay(cfg.load_hit_cost + (0 if res.hit else cfg.pm_read_latency))
            elif op == Op.LOCK:
                if ev.lock in self.locks:
                    self.lock_waiters[ev.lock].append(tid)
                    yield Block("lock", lambda lk=ev.lock: self.locks.get(lk) == tid)
                else:
                    self.locks[ev.lock] = tid
                yield Delay(1)
            elif op == Op.UNLOCK:
                del self.locks[ev.lock]
                if self.lock_waiters[ev.lock]:
                    self.locks[ev.lock] = self.lock_waiters[ev.lock].pop(0)
                yield Delay(1)
            elif op == Op.NOP:
                yield Delay(ev.count * cfg.nop_cost)

    def _advance(self, th: _Thread) -> None:
        """Run ``th`` until it delays, blocks or finishes."""
        while True:
            try:
                item = next(th.proc)
            except StopIteration:
                th.finished = self.now
                return
            if isinstance(item, Delay):
                heapq.heappush(self._ready, (self.now + item.cycles, th.tid))
                return
            if not item.ready():
                th.blocked = item
                th.blocked_since = self.now
                return

    def _wake(self) -> None:
        for th in self.threads:
            if th.blocked is not None and th.blocked.ready():
                self.metrics.stall_cycles[th.blocked.reason] += self.now - th.blocked_since
                th.blocked = None
                heapq.heappush(self._ready, (self.now, th.tid))

    def run(self) -> RunResult:
        for th in self.threads:
            heapq.heappush(self._ready, (0, th.tid))
        while True:
            t_pm = self.pm.next_time()
            t_th = self._ready[0][0] if self._ready else None
            if t_pm is None and t_th is None:
                break
            if t_pm is not None and (t_th is None or t_pm <= t_th):
                self.now = t_pm
                op = self.pm.complete_next()
                self.scheme.on_persist_complete(op)
            else:
                self.now, tid = heapq.heappop(self._ready)
                self._advance(self.threads[tid])
            self._wake()
            if self.debug:
                self.scheme.check_invariants()
        stuck = [th.tid for th in self.threads if th.finished is None]
        if stuck:
            reasons = {th.tid: th.blocked.reason if th.blocked else "?" for th in self.threads if th.finished is None}
            raise SimulationError(f"deadlock at cycle {self.now}: threads {reasons} cannot proceed; "
                                  + self.scheme.diagnose())
        self.scheme.finish()
        m = self.metrics
        m.total_cycles = max((th.finished for th in self.threads), default=0)
        m.drain_cycles = max([m.total_cycles] + [op.complete_time for op in self.pm.completed])
        m.pm_writes = dict(self.pm.writes)
        m.dropped_ops = self.pm.dropped
        return RunResult(m, self.pm.image, self.events, self.pm.all_ops, self.pm.completed,
                         self.region_order, self.end_stall, self.end_time, self.commit_time,
                         self.scheme)

    def issue_log(self, line: int, rid: RegionId, payload: tuple, *, waits_on: Iterable[PersistOp] = (),
                  log_kind: str = "undo") -> PersistOp:
        """Append a log entry for ``line`` to ``rid``'s thread ring (slot must be free)."""
        idx = self.scheme.log_ring(rid.thread).alloc(rid)
        addr = log_line(rid.thread, idx, self.config.log_capacity_entries_per_thread)
        return self.issue(OpKind.LPO, line, rid.thread, rid, payload, waits_on=waits_on,
                          log_kind=log_kind, addr=addr, log_index=idx)

    def snapshot(self, now: int | None = None) -> PMImage:
        return self.pm.snapshot(self.now if now is None else now)


def run(trace: Trace, scheme, config: MachineConfig | None = None, **kw) -> RunResult:
    """Simulate ``trace``; ``scheme`` is a :class:`Scheme` or a scheme name."""
    from .schemes import make_scheme

    if isinstance(scheme, str):
        scheme = make_scheme(scheme)
    return Simulator(trace, scheme, config, **kw).run()


# --------------------------------------------------------------------------
# event-log checkers


def wal_violations(events: Iterable[EventRecord], redo: bool = False) -> list[str]:
    """DPO service must start after the covering LPO (undo) or CommitMark (redo) completes.

    For undo the covering LPO of (region, line) is the region's first one.
    """
    events = list(events)
    lpo_done: dict[tuple, int] = {}
    mark_done: dict[RegionId, int] = {}
    bad = []
    for i, e in enumerate(events):
        if e.kind == "LPO_COMPLETE":
            lpo_done.setdefault((e.region, e.line), i)
        elif e.kind == "MARK_COMPLETE":
            mark_done[e.region] = i
        elif e.kind == "DPO_START":
            if redo:
                if e.region not in mark_done:
                    bad.append(f"cycle {e.cycle}: DPO {e.region} line {e.line:#x} started before its CommitMark")
            elif (e.region, e.line) not in lpo_done:
                bad.append(f"cycle {e.cycle}: DPO {e.region} line {e.line:#x} started before its LPO completed")
    return bad


def bank_fifo_violations(ops: Iterable[PersistOp]) -> list[str]:
    """No two ops of a bank overlap in service; completion order = start order."""
    bad = []
    per: dict[int, list[PersistOp]] = defaultdict(list)
    for op in ops:
        if op.start_time is not None:
            per[op.bank].append(op)
    for b, lst in per.items():
        lst.sort(key=lambda o: (o.start_time, o.op_id))
        for x, y in zip(lst, lst[1:]):
            if y.start_time < x.complete_time:
                bad.append(f"bank {b}: {y!r} starts before {x!r} completes")
    return bad


def commit_order_violations(events: Iterable[EventRecord],
                            edges: Iterable[tuple[RegionId, RegionId]]) -> list[str]:
    """For every edge b -> a, a must be committed before b's commit mark is issued.

    Regions without a mark (no stores) are checked at their COMMIT event.
    """
    issued: dict[RegionId, int] = {}
    committed: dict[RegionId, int] = {}
    marked: dict[RegionId, int] = {}
    for i, e in enumerate(events):
        if e.kind == "MARK_ISSUE":
            issued.setdefault(e.region, i)
        elif e.kind == "MARK_COMPLETE":
            marked.setdefault(e.region, i)
        elif e.kind == "COMMIT":
            committed.setdefault(e.region, i)
    bad = []
    for b, a in edges:
        # a region without a mark is durable as soon as it commits
        a_done = marked.get(a, committed.get(a))
        b_go = issued.get(b, committed.get(b))
        if b_go is None:
            continue
        if a_done is None or a_done > b_go:
            bad.append(f"{b} committed ahead of its dependence {a}")
    return bad
