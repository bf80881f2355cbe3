"""Persistence schemes: the callback contract and the NP/SW/HWUndo/HWRedo baselines.

Callbacks are invoked by :class:`~asapsim.machine.Simulator` and return an
iterable of :class:`~asapsim.machine.Block` items.  An empty iterable means
the instruction proceeds with no stall; a generator that yields blocks parks
the issuing thread until each condition holds.  Schemes never touch the PM
image; every durable effect goes through ``sim.issue``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

from .machine import (Block, OpKind, PersistOp, RegionId, SimulationError, commit_register_line,
                      wait_ops)

if TYPE_CHECKING:
    from .machine import Simulator

SCHEME_NAMES = ("np", "sw", "hwundo", "hwredo", "asap")


class RegionState(str, enum.Enum):
    ACTIVE = "Active"
    PENDING = "Pending"
    COMMITTED = "Committed"


class LogRing:
    """Per-thread circular log.  Slots are reclaimed in allocation order."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.head = 0
        self.tail = 0
        self._owner: dict[int, RegionId] = {}
        self._by_region: dict[RegionId, list[int]] = {}
        self._freed: set[int] = set()

    def full(self) -> bool:
        return self.head - self.tail >= self.capacity

    def __len__(self) -> int:
        return self.head - self.tail

    def alloc(self, rid: RegionId) -> int:
        """Claim the next slot; returns its absolute position (slot = pos % capacity)."""
        if self.full():
            raise OverflowError("log ring full")
        idx = self.head
        self.head += 1
        self._owner[idx] = rid
        self._by_region.setdefault(rid, []).append(idx)
        return idx

    def free(self, rid: RegionId) -> None:
        for idx in self._by_region.pop(rid, ()):
            self._freed.add(idx)
        while self.tail in self._freed:
            self._freed.discard(self.tail)
            self._owner.pop(self.tail, None)
            self.tail += 1

    def owners(self) -> set[RegionId]:
        return {self._owner[i] for i in range(self.tail, self.head) if i not in self._freed}


@dataclass(eq=False)
class LineLog:
    pre: tuple
    post: tuple
    first_lpo: PersistOp | None = None


@dataclass(eq=False)
class RegionRecord:
    rid: RegionId
    state: RegionState = RegionState.ACTIVE
    write_set: dict[int, LineLog] = field(default_factory=dict)
    lpos: list[PersistOp] = field(default_factory=list)
    dpos: list[PersistOp] = field(default_factory=list)

    @property
    def outstanding_lpos(self) -> int:
        return sum(not op.done for op in self.lpos)

    @property
    def outstanding_dpos(self) -> int:
        return sum(not op.done for op in self.dpos)

    def record_store(self, line: int, pre: tuple, word: int, value: int) -> LineLog:
        entry = self.write_set.get(line)
        if entry is None:
            entry = self.write_set[line] = LineLog(pre, pre)
        post = list(entry.post)
        post[word] = value
        entry.post = tuple(post)
        return entry


class Scheme:
    """Base class; every callback defaults to "no persist work, no stall"."""

    name = "base"
    redo = False
    crash_consistent = True

    def __init__(self):
        self.sim: "Simulator | None" = None

    def attach(self, sim: "Simulator") -> None:
        if self.sim is not None:
            raise RuntimeError(f"scheme {self.name} already bound to a run; create a new one")
        self.sim = sim

    def on_begin(self, rid: RegionId) -> Iterable[Block]:
        return ()

    def on_store(self, rid: RegionId, line: int, word: int, value: int) -> Iterable[Block]:
        return ()

    def on_load(self, rid: RegionId, line: int, word: int) -> Iterable[Block]:
        return ()

    def on_end(self, rid: RegionId) -> Iterable[Block]:
        return ()

    def on_evict(self, line: int, words: tuple) -> Iterable[Block]:
        return ()

    def on_persist_complete(self, op: PersistOp) -> None:
        pass

    def check_invariants(self) -> None:
        pass

    def diagnose(self) -> str:
        return ""

    def finish(self) -> None:
        pass

    def log_ring(self, thread: int) -> "LogRing":
        raise NotImplementedError(f"scheme {self.name} keeps no log")


class NoPersistence(Scheme):
    """Ideal baseline: data lives in PM but nothing orders its persistence."""

    name = "np"
    crash_consistent = False

    def on_end(self, rid):
        self.sim.region_committed(rid)
        return ()

    def on_evict(self, line, words):
        self.sim.issue(OpKind.EVICT, line, -1, None, words)
        return ()


class _LoggingScheme(Scheme):
    """Shared bookkeeping for the synchronous-commit baselines."""

    def attach(self, sim):
        super().attach(sim)
        self.regions: dict[RegionId, RegionRecord] = {}
        self.rings = {t: LogRing(sim.config.log_capacity_entries_per_thread)
                      for t in range(sim.trace.thread_count)}

    def on_begin(self, rid):
        self.regions[rid] = RegionRecord(rid)
        return ()

    def log_ring(self, thread):
        return self.rings[thread]

    def _log_space(self, thread: int):
        ring = self.rings[thread]
        if ring.full():
            yield Block("logfull", lambda: not ring.full())

    def _issue_mark(self, rec: RegionRecord) -> PersistOp:
        t = rec.rid.thread
        return self.sim.issue(OpKind.MARK, commit_register_line(t), t, rec.rid, (rec.rid.seq,))

    def _commit(self, rec: RegionRecord) -> None:
        rec.state = RegionState.COMMITTED
        self.sim.region_committed(rec.rid)

    def finish(self):
        left = [str(r.rid) for r in self.regions.values() if r.state != RegionState.COMMITTED]
        if left:
            raise SimulationError(f"{self.name}: regions never committed: {left}")

    def diagnose(self):
        return "log occupancy " + ", ".join(f"T{t}={len(r)}/{r.capacity}" for t, r in self.rings.items())


class UndoLogging(_LoggingScheme):
    """Hardware or software undo logging with synchronous commit.

    ``sync_log=True`` is the software variant: each log write is flushed and
    fenced before the store proceeds.  Otherwise log writes overlap with the
    rest of the region and the region end waits for everything.
    """

    def __init__(self, sync_log: bool):
        super().__init__()
        self.sync_log = sync_log
        self.name = "sw" if sync_log else "hwundo"

    def attach(self, sim):
        super().attach(sim)
        # line -> region whose store dirtied it and has no data write yet
        self.owner: dict[int, RegionRecord] = {}

    def on_store(self, rid, line, word, value):
        rec = self.regions[rid]
        if line not in rec.write_set:
            yield from self._log_space(rid.thread)
            pre = self.sim.words(line)
            lpo = self.sim.issue_log(line, rid, pre)
            rec.lpos.append(lpo)
            rec.record_store(line, pre, word, value).first_lpo = lpo
            if self.sync_log:
                yield from wait_ops([lpo])
        else:
            rec.record_store(line, rec.write_set[line].pre, word, value)
        self.owner[line] = rec

    def _write_back(self, rec: RegionRecord, line: int) -> None:
        sim = self.sim
        dpo = sim.issue(OpKind.DPO, line, rec.rid.thread, rec.rid, sim.words(line),
                        waits_on=[rec.write_set[line].first_lpo], serves=[rec.rid])
        rec.dpos.append(dpo)
        sim.cache.clean(line)
        del self.owner[line]

    def on_evict(self, line, words):
        rec = self.owner.get(line)
        if rec is not None:
            # still uncommitted: the writeback is this region's data write, WAL applies
            self._write_back(rec, line)
        else:
            self.sim.issue(OpKind.EVICT, line, -1, None, words)
        return ()

    def on_end(self, rid):
        rec = self.regions[rid]
        for line in sorted(rec.write_set):
            if self.owner.get(line) is rec:
                self._write_back(rec, line)
        rec.state = RegionState.PENDING
        yield from wait_ops(rec.lpos + rec.dpos)
        if rec.write_set:
            yield from wait_ops([self._issue_mark(rec)])
        self._commit(rec)
        self.rings[rid.thread].free(rid)


class RedoLogging(_LoggingScheme):
    """Hardware redo logging: log writes synchronous at region end, data writes deferred."""

    name = "hwredo"
    redo = True

    def on_store(self, rid, line, word, value):
        rec = self.regions[rid]
        yield from self._log_space(rid.thread)
        entry = rec.record_store(line, self.sim.words(line) if line not in rec.write_set
                                 else rec.write_set[line].pre, word, value)
        lpo = self.sim.issue_log(line, rid, entry.post, log_kind="redo")
        rec.lpos.append(lpo)
        if entry.first_lpo is None:
            entry.first_lpo = lpo

    def on_end(self, rid):
        rec = self.regions[rid]
        rec.state = RegionState.PENDING
        yield from wait_ops(rec.lpos)
        if not rec.write_set:
            self._commit(rec)
            self.rings[rid.thread].free(rid)
            return
        mark = self._issue_mark(rec)
        yield from wait_ops([mark])
        self._commit(rec)
        sim = self.sim
        for line in sorted(rec.write_set):
            rec.dpos.append(sim.issue(OpKind.DPO, line, rid.thread, rid, sim.words(line),
                                      waits_on=[mark], serves=[rid]))
            sim.cache.clean(line)

    def on_persist_complete(self, op):
        if op.kind == OpKind.DPO:
            rec = self.regions[op.region]
            if rec.outstanding_dpos == 0:
                self.rings[op.region.thread].free(op.region)


def make_scheme(name: str, **opts) -> Scheme:
    """Fresh scheme instance by name (``np | sw | hwundo | hwredo | asap``)."""
    name = name.lower()
    if name == "asap":
        from .asap import AsapScheme
        return AsapScheme(**opts)
    if opts:
        raise TypeError(f"scheme {name!r} takes no options, got {sorted(opts)}")
    if name == "np":
        return NoPersistence()
    if name == "sw":
        return UndoLogging(sync_log=True)
    if name == "hwundo":
        return UndoLogging(sync_log=False)
    if name == "hwredo":
        return RedoLogging()
    raise ValueError(f"unknown scheme {name!r}; expected one of {SCHEME_NAMES}")
