"""Workload representation: per-thread instruction streams over persistent lines.

A trace is a list of per-thread event streams.  The global interleaving is not
part of the trace; the simulator derives it from timing.  Text format, one
event per line (``#`` starts a comment)::

    T<tid> BEGIN
    T<tid> END
    T<tid> ST <hex-byte-addr> <word 0-7> <value>
    T<tid> LD <hex-byte-addr> <word 0-7>
    T<tid> LOCK <lock-id>
    T<tid> UNLOCK <lock-id>
    T<tid> NOP <cycles>

Byte addresses are canonicalized to line numbers (``addr >> 6``).
"""

from __future__ import annotations

import enum
import random
import re
from dataclasses import dataclass, field
from typing import Iterable

LINE_SHIFT = 6
WORDS_PER_LINE = 8
WORD_MASK = (1 << 64) - 1


class TraceSyntaxError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Op(str, enum.Enum):
    BEGIN = "BEGIN"
    END = "END"
    ST = "ST"
    LD = "LD"
    LOCK = "LOCK"
    UNLOCK = "UNLOCK"
    NOP = "NOP"


@dataclass(frozen=True)
class TraceEvent:
    thread: int
    op: Op
    line: int | None = None
    word: int | None = None
    value: int | None = None
    lock: int | None = None
    count: int | None = None

    def __post_init__(self):
        if self.word is not None and not 0 <= self.word < WORDS_PER_LINE:
            raise ValueError(f"word-index {self.word} out of range [0, {WORDS_PER_LINE})")
        if self.op == Op.NOP and (self.count is None or self.count < 1):
            raise ValueError("NOP needs a cycle count >= 1")


# Constructors keep call sites short in generators and tests.
def begin(t: int) -> TraceEvent:
    return TraceEvent(t, Op.BEGIN)


def end(t: int) -> TraceEvent:
    return TraceEvent(t, Op.END)


def store(t: int, line: int, word: int, value: int) -> TraceEvent:
    return TraceEvent(t, Op.ST, line=line, word=word, value=value & WORD_MASK)


def load(t: int, line: int, word: int) -> TraceEvent:
    return TraceEvent(t, Op.LD, line=line, word=word)


def lock(t: int, lock_id: int) -> TraceEvent:
    return TraceEvent(t, Op.LOCK, lock=lock_id)


def unlock(t: int, lock_id: int) -> TraceEvent:
    return TraceEvent(t, Op.UNLOCK, lock=lock_id)


def nop(t: int, cycles: int) -> TraceEvent:
    return TraceEvent(t, Op.NOP, count=cycles)


@dataclass(frozen=True)
class Trace:
    streams: tuple[tuple[TraceEvent, ...], ...] = ()

    @classmethod
    def from_events(cls, events: Iterable[TraceEvent]) -> "Trace":
        """Group events by thread, preserving their relative order."""
        per: dict[int, list[TraceEvent]] = {}
        for ev in events:
            per.setdefault(ev.thread, []).append(ev)
        n = max(per) + 1 if per else 0
        return cls(tuple(tuple(per.get(t, ())) for t in range(n)))

    @property
    def thread_count(self) -> int:
        return len(self.streams)

    def region_count(self) -> int:
        return sum(1 for s in self.streams for ev in s if ev.op == Op.BEGIN)

    def __len__(self) -> int:
        return sum(len(s) for s in self.streams)


_LINE_RE = re.compile(r"^T(\d+)\s+([A-Za-z]+)((?:\s+\S+)*)$")
_ARITY = {Op.BEGIN: 0, Op.END: 0, Op.ST: 3, Op.LD: 2, Op.LOCK: 1, Op.UNLOCK: 1, Op.NOP: 1}


def _int(tok: str, lineno: int, base: int = 0) -> int:
    try:
        return int(tok, base)
    except ValueError:
        raise TraceSyntaxError(lineno, f"bad integer {tok!r}") from None


def parse_trace(text: str) -> Trace:
    events: list[TraceEvent] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        m = _LINE_RE.match(body)
        if m is None:
            raise TraceSyntaxError(lineno, f"unrecognized event {body!r}")
        tid = int(m.group(1))
        try:
            op = Op(m.group(2).upper())
        except ValueError:
            raise TraceSyntaxError(lineno, f"unknown opcode {m.group(2)!r}") from None
        args = m.group(3).split()
        if len(args) != _ARITY[op]:
            raise TraceSyntaxError(lineno, f"{op.value} takes {_ARITY[op]} operand(s), got {len(args)}")
        if op in (Op.ST, Op.LD):
            addr = _int(args[0], lineno, 16)
            word = _int(args[1], lineno, 10)
            if not 0 <= word < WORDS_PER_LINE:
                raise TraceSyntaxError(lineno, f"word-index {word} out of range [0, {WORDS_PER_LINE})")
            if op == Op.ST:
                events.append(store(tid, addr >> LINE_SHIFT, word, _int(args[2], lineno)))
            else:
                events.append(load(tid, addr >> LINE_SHIFT, word))
        elif op in (Op.LOCK, Op.UNLOCK):
            events.append(TraceEvent(tid, op, lock=_int(args[0], lineno, 10)))
        elif op == Op.NOP:
            cycles = _int(args[0], lineno, 10)
            if cycles < 1:
                raise TraceSyntaxError(lineno, "NOP needs a cycle count >= 1")
            events.append(nop(tid, cycles))
        else:
            events.append(TraceEvent(tid, op))
    seen = {ev.thread for ev in events}
    if seen and seen != set(range(max(seen) + 1)):
        missing = sorted(set(range(max(seen) + 1)) - seen)
        raise TraceSyntaxError(0, f"thread ids must be dense from 0; missing {missing}")
    return Trace.from_events(events)


def render_event(ev: TraceEvent) -> str:
    head = f"T{ev.thread} {ev.op.value}"
    if ev.op == Op.ST:
        return f"{head} {ev.line << LINE_SHIFT:#x} {ev.word} {ev.value}"
    if ev.op == Op.LD:
        return f"{head} {ev.line << LINE_SHIFT:#x} {ev.word}"
    if ev.op in (Op.LOCK, Op.UNLOCK):
        return f"{head} {ev.lock}"
    if ev.op == Op.NOP:
        return f"{head} {ev.count}"
    return head


def render_trace(trace: Trace) -> str:
    """Serialize thread by thread; the inverse of :func:`parse_trace`."""
    lines = [render_event(ev) for stream in trace.streams for ev in stream]
    return "\n".join(lines) + ("\n" if lines else "")


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    thread: int
    index: int
    message: str

    def __str__(self) -> str:
        return f"T{self.thread}[{self.index}]: {self.message}"


@dataclass
class RegionInfo:
    """Static view of one atomic region as written in the trace."""

    thread: int
    seq: int
    locks: frozenset[int]
    reads: set[int] = field(default_factory=set)
    writes: set[int] = field(default_factory=set)
    stores: list[TraceEvent] = field(default_factory=list)

    @property
    def lines(self) -> set[int]:
        return self.reads | self.writes


def regions_of(trace: Trace) -> list[list[RegionInfo]]:
    """Per-thread list of regions in program order.  Assumes well-formed streams."""
    out: list[list[RegionInfo]] = []
    for t, stream in enumerate(trace.streams):
        held: list[int] = []
        regs: list[RegionInfo] = []
        cur: RegionInfo | None = None
        for ev in stream:
            if ev.op == Op.LOCK:
                held.append(ev.lock)
            elif ev.op == Op.UNLOCK and ev.lock in held:
                held.remove(ev.lock)
            elif ev.op == Op.BEGIN:
                cur = RegionInfo(t, len(regs), frozenset(held))
                regs.append(cur)
            elif ev.op == Op.END:
                cur = None
            elif cur is not None and ev.op == Op.ST:
                cur.writes.add(ev.line)
                cur.stores.append(ev)
            elif cur is not None and ev.op == Op.LD:
                cur.reads.add(ev.line)
        out.append(regs)
    return out


def validate(trace: Trace) -> list[Violation]:
    """Return every invariant violation; an empty list means the trace is valid."""
    bad: list[Violation] = []
    for t, stream in enumerate(trace.streams):
        in_region = False
        held: list[int] = []
        for i, ev in enumerate(stream):
            if ev.thread != t:
                bad.append(Violation(t, i, f"event tagged T{ev.thread} in stream of T{t}"))
            if ev.op == Op.BEGIN:
                if in_region:
                    bad.append(Violation(t, i, "nested region (BEGIN inside a region)"))
                in_region = True
            elif ev.op == Op.END:
                if not in_region:
                    bad.append(Violation(t, i, "END without matching BEGIN"))
                in_region = False
            elif ev.op in (Op.ST, Op.LD):
                if not in_region:
                    bad.append(Violation(t, i, f"{ev.op.value} outside an atomic region"))
            elif ev.op == Op.LOCK:
                if in_region:
                    bad.append(Violation(t, i, "LOCK inside a region (region straddles a lock boundary)"))
                if ev.lock in held:
                    bad.append(Violation(t, i, f"lock {ev.lock} acquired twice"))
                held.append(ev.lock)
            elif ev.op == Op.UNLOCK:
                if in_region:
                    bad.append(Violation(t, i, "UNLOCK inside a region (region straddles a lock boundary)"))
                if not held or held[-1] != ev.lock:
                    bad.append(Violation(t, i, f"UNLOCK {ev.lock} is not the innermost held lock"))
                if ev.lock in held:
                    held.remove(ev.lock)
        if in_region:
            bad.append(Violation(t, len(stream), "stream ends inside a region"))
        if held:
            bad.append(Violation(t, len(stream), f"locks still held at end of stream: {held}"))
    if bad:
        return bad

    regions = regions_of(trace)
    flat = [r for regs in regions for r in regs]
    for i, a in enumerate(flat):
        for b in flat[i + 1:]:
            if a.thread == b.thread:
                continue
            shared = (a.writes & b.lines) | (b.writes & a.lines)
            if shared and not (a.locks & b.locks):
                line = min(shared)
                bad.append(Violation(
                    b.thread, b.seq,
                    f"unsynchronized conflicting regions T{a.thread}#{a.seq} and "
                    f"T{b.thread}#{b.seq} on line {line:#x} (no common lock)"))
    return bad


def is_valid(trace: Trace) -> bool:
    return not validate(trace)


# --------------------------------------------------------------------------
# workload generators

KINDS = ("swap", "counter", "hashmap", "queue", "producer_consumer")
BASE_LINE = 0x40


@dataclass(frozen=True)
class WorkloadSpec:
    """Parameters for a synthetic benchmark.

    ``regions`` is per thread.  ``think`` inserts that many NOP cycles after
    every region to stand in for non-persistent work.
    """

    kind: str
    regions: int = 4
    stores_per_region: int = 2
    threads: int = 1
    line_pool: int = 8
    seed: int = 1
    think: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}; expected one of {KINDS}")
        for name in ("regions", "stores_per_region", "threads", "line_pool"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.think < 0:
            raise ValueError("think must be >= 0")
        if self.kind == "producer_consumer" and self.threads < 2:
            raise ValueError("producer_consumer requires threads >= 2")

    @property
    def name(self) -> str:
        return (f"{self.kind}-r{self.regions}-s{self.stores_per_region}-t{self.threads}"
                f"-p{self.line_pool}-k{self.think}-seed{self.seed}")

    def to_string(self) -> str:
        return (f"kind={self.kind},regions={self.regions},stores_per_region={self.stores_per_region},"
                f"threads={self.threads},line_pool={self.line_pool},seed={self.seed},think={self.think}")

    @classmethod
    def parse(cls, text: str) -> "WorkloadSpec":
        """Parse ``kind=swap,regions=2,...``."""
        kw: dict[str, object] = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in part:
                raise ValueError(f"workload field {part!r} is not key=value")
            k, v = (s.strip() for s in part.split("=", 1))
            if k == "kind":
                kw[k] = v
            elif k in {"regions", "stores_per_region", "threads", "line_pool", "seed", "think"}:
                kw[k] = int(v, 0)
            else:
                raise ValueError(f"unknown workload field {k!r}")
        if "kind" not in kw:
            raise ValueError("workload spec needs kind=...")
        return cls(**kw)  # type: ignore[arg-type]


def _value(rng: random.Random) -> int:
    return rng.randrange(1, 1 << 32)


def _wrap(t: int, body: list[TraceEvent], locked: bool, think: int) -> list[TraceEvent]:
    evs = [lock(t, 0)] if locked else []
    evs += [begin(t), *body, end(t)]
    if locked:
        evs.append(unlock(t, 0))
    if think:
        evs.append(nop(t, think))
    return evs


def _swap_region(t, rng, spec, shadow):
    pool = spec.line_pool
    a = BASE_LINE + rng.randrange(pool)
    b = BASE_LINE + rng.randrange(pool - 1) if pool > 1 else a
    if pool > 1 and b >= a:
        b += 1
    body: list[TraceEvent] = []
    for k in range(spec.stores_per_region):
        w = (k // 2) % WORDS_PER_LINE
        if k % 2 == 0:
            body += [load(t, a, w), load(t, b, w)]
            va, vb = shadow.get((a, w)) or _value(rng), shadow.get((b, w)) or _value(rng)
            shadow[(a, w)], shadow[(b, w)] = vb, va
            body.append(store(t, a, w, vb))
        else:
            body.append(store(t, b, w, shadow[(b, w)]))
    return body


def _counter_region(t, rng, spec, shadow):
    body: list[TraceEvent] = []
    for _ in range(spec.stores_per_region):
        c = BASE_LINE + rng.randrange(spec.line_pool)
        shadow[c] = shadow.get(c, 0) + 1
        body += [load(t, c, 0), store(t, c, 0, shadow[c])]
    return body


def _hashmap_region(t, rng, spec, shadow):
    key = rng.randrange(1 << 20)
    bucket = BASE_LINE + (key * 2654435761) % spec.line_pool
    body = [load(t, bucket, 0)]
    line = bucket
    for k in range(spec.stores_per_region):
        if k and k % WORDS_PER_LINE == 0:
            line = BASE_LINE + (line - BASE_LINE + 1) % spec.line_pool
        body.append(store(t, line, k % WORDS_PER_LINE, key if k == 0 else _value(rng)))
    return body


def _queue_region(t, rng, spec, shadow):
    # line 0 of the pool is the tail pointer; the rest are slots
    meta = BASE_LINE
    slots = max(spec.line_pool - 1, 1)
    tail = shadow.get("tail", 0)
    slot = BASE_LINE + (1 + tail % slots if spec.line_pool > 1 else 0)
    body = [load(t, meta, 0)]
    for k in range(max(spec.stores_per_region - 1, 0)):
        body.append(store(t, slot, k % WORDS_PER_LINE, _value(rng)))
    shadow["tail"] = tail + 1
    body.append(store(t, meta, 0, tail + 1))
    return body


_BODY = {"swap": _swap_region, "counter": _counter_region,
         "hashmap": _hashmap_region, "queue": _queue_region}


def generate(spec: WorkloadSpec) -> Trace:
    """Deterministic synthetic trace for ``spec``; always passes :func:`validate`."""
    rng = random.Random(spec.seed)
    locked = spec.threads > 1
    streams: list[list[TraceEvent]] = [[] for _ in range(spec.threads)]
    if spec.kind == "producer_consumer":
        _producer_consumer(spec, rng, streams)
    else:
        shadow: dict = {}
        body_fn = _BODY[spec.kind]
        # round-robin so the shadow state follows a plausible global order
        for _ in range(spec.regions):
            for t in range(spec.threads):
                streams[t] += _wrap(t, body_fn(t, rng, spec, shadow), locked, spec.think)
    return Trace(tuple(tuple(s) for s in streams))


def _producer_consumer(spec: WorkloadSpec, rng: random.Random, streams) -> None:
    # Thread 0 fills the shared pool; every other thread reads what region i of
    # the producer wrote and stores a result into its own private line.
    pool = spec.line_pool
    out_base = BASE_LINE + pool
    for i in range(spec.regions):
        lines = [BASE_LINE + (i * spec.stores_per_region + k) % pool for k in range(spec.stores_per_region)]
        body = [store(0, ln, k % WORDS_PER_LINE, _value(rng)) for k, ln in enumerate(lines)]
        streams[0] += _wrap(0, body, True, spec.think)
        for t in range(1, spec.threads):
            body = [load(t, ln, k % WORDS_PER_LINE) for k, ln in enumerate(lines)]
            body.append(store(t, out_base + t - 1, i % WORDS_PER_LINE, _value(rng)))
            streams[t] += _wrap(t, body, True, spec.think)

