"""Asynchronous undo logging with hardware dependence tracking.

Both log writes (LPOs) and data writes (DPOs) run in the background; a region
end never stalls.  Crash consistency comes from committing regions only in
an order that respects their dependences:

* control: a region depends on the previous region of its thread;
* data: a region that loads or stores a line last written by a still
  uncommitted region depends on that region.

A region commits once its log writes are durable, its data is durable
(possibly through a DPO shared with other regions), and everything it
depends on has committed.  Committing means persisting the thread's commit
sequence number; recovery treats every region with a sequence at or below
the persisted one as committed.

Hardware state is split the same way as the design it models:

1. :class:`ThreadLogRegisters` - per-thread log ring and commit sequence
2. :class:`LastWriterTable` - line -> last uncommitted writer
3. :class:`RegionWriteSet` - lines a region modified and what it still owes
4. :class:`ActiveRegionTable` - uncommitted regions and their dependence edges

Traffic optimizations (each independently switchable):

``opt_lpo_drop``
    log only the first store of a region to a line; later stores reuse
    that pre-image.  When off, every store writes a log entry.
``opt_dpo_coalesce``
    at region end, a line that already has a queued DPO rides on it: the
    queued write gets the newest payload and serves both regions.
``opt_dpo_drop``
    a store to a line whose DPO is still queued cancels that DPO; the
    regions it served wait for the line's next DPO instead.  They wait on
    that write, not on the new region, so no commit edge is created.

These three definitions are this simulator's reading of the optimization
names; other readings are possible.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .machine import Block, OpKind, PersistOp, RegionId, SimulationError, commit_register_line
from .schemes import LogRing, RegionState, Scheme


@dataclass
class ThreadLogRegisters:
    ring: LogRing
    committed_seq: int = -1
    last_region: RegionId | None = None


class LastWriterTable(dict):
    """line -> most recent uncommitted region that stored to it."""

    def purge(self, rid: RegionId) -> None:
        for line in [ln for ln, r in self.items() if r == rid]:
            del self[line]


@dataclass(eq=False)
class WriteSetLine:
    logged: bool = False
    first_lpo: PersistOp | None = None


@dataclass(eq=False)
class RegionWriteSet:
    lines: dict[int, WriteSetLine] = field(default_factory=dict)
    outstanding_lpos: int = 0
    # DPOs this region's data rides on
    obligations: set[PersistOp] = field(default_factory=set)
    # lines whose newest data from this region is not yet carried by a live DPO
    uncaptured: set[int] = field(default_factory=set)

    def owes_data(self) -> bool:
        return bool(self.uncaptured) or any(not op.done for op in self.obligations)


@dataclass(eq=False)
class RegionEntry:
    state: RegionState = RegionState.ACTIVE
    depends_on: set[RegionId] = field(default_factory=set)
    dependents: set[RegionId] = field(default_factory=set)
    mark: PersistOp | None = None


class ActiveRegionTable(dict):
    """rid -> :class:`RegionEntry` for every uncommitted region."""

    def add_edge(self, frm: RegionId, to: RegionId) -> bool:
        if frm == to or to not in self or to in self[frm].depends_on:
            return False
        self[frm].depends_on.add(to)
        self[to].dependents.add(frm)
        return True

    def find_cycle(self) -> list[RegionId] | None:
        color: dict[RegionId, int] = {}
        for root in sorted(self):
            if root in color:
                continue
            path: list[RegionId] = []
            stack = [(root, iter(sorted(self[root].depends_on)))]
            color[root] = 1
            path.append(root)
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    stack.pop()
                    path.pop()
                    color[node] = 2
                elif nxt in self and color.get(nxt) == 1:
                    return path[path.index(nxt):] + [nxt]
                elif nxt in self and nxt not in color:
                    color[nxt] = 1
                    path.append(nxt)
                    stack.append((nxt, iter(sorted(self[nxt].depends_on))))
        return None


class AsapScheme(Scheme):
    name = "asap"

    def __init__(self, opt_lpo_drop: bool = True, opt_dpo_coalesce: bool = True,
                 opt_dpo_drop: bool = True):
        super().__init__()
        self.opt_lpo_drop = opt_lpo_drop
        self.opt_dpo_coalesce = opt_dpo_coalesce
        self.opt_dpo_drop = opt_dpo_drop

    def attach(self, sim):
        super().attach(sim)
        cap = sim.config.log_capacity_entries_per_thread
        self.regs = {t: ThreadLogRegisters(LogRing(cap)) for t in range(sim.trace.thread_count)}
        self.last_writer = LastWriterTable()
        self.write_sets: dict[RegionId, RegionWriteSet] = {}
        self.active = ActiveRegionTable()
        self.queued_dpo: dict[int, PersistOp] = {}
        self.pending_writers: dict[int, set[RegionId]] = defaultdict(set)
        self.line_lpos: dict[int, list[PersistOp]] = defaultdict(list)
        self.edges: list[tuple[RegionId, RegionId, str]] = []
        self.committed: set[RegionId] = set()

    def log_ring(self, thread):
        return self.regs[thread].ring

    # ---- dependence tracking --------------------------------------------

    def _edge(self, frm: RegionId, to: RegionId, why: str) -> None:
        if self.active.add_edge(frm, to):
            self.edges.append((frm, to, why))
            self.sim.log(f"EDGE_{why.upper()}", frm.thread, frm, None, None)

    def _data_dependence(self, rid: RegionId, line: int) -> None:
        writer = self.last_writer.get(line)
        if writer is not None and writer != rid and writer in self.active:
            self._edge(rid, writer, "data")

    # ---- callbacks --------------------------------------------------------

    def on_begin(self, rid):
        self.write_sets[rid] = RegionWriteSet()
        self.active[rid] = RegionEntry()
        return ()

    def on_store(self, rid, line, word, value):
        return self.track_store(rid, line, word, value)

    def on_load(self, rid, line, word):
        self.track_load(rid, line)
        return ()

    def on_end(self, rid):
        self.end_region(rid)
        return ()

    def on_evict(self, line, words):
        # a dirty line leaving the cache mid-region gets its data write early
        if self.pending_writers.get(line):
            self._capture(line)
        return ()

    def track_store(self, rid: RegionId, line: int, word: int, value: int):
        ws = self.write_sets[rid]
        self._data_dependence(rid, line)
        entry = ws.lines.get(line)
        if entry is None:
            entry = ws.lines[line] = WriteSetLine()
        if not (entry.logged and self.opt_lpo_drop):
            ring = self.regs[rid.thread].ring
            if ring.full():
                # Data writes of older regions may be parked on lines this
                # thread keeps dirtying; push them out so commits can free space.
                for ln in sorted(self.pending_writers):
                    self._capture(ln)
                yield Block("logfull", lambda: not ring.full())
            # log writes for one line persist in issue order so rollback can
            # unwind them newest-first
            lpo = self.sim.issue_log(line, rid, self.sim.words(line), waits_on=self.line_lpos[line])
            self.line_lpos[line].append(lpo)
            ws.outstanding_lpos += 1
            if not entry.logged:
                entry.logged = True
                entry.first_lpo = lpo
        self.last_writer[line] = rid
        if self.opt_dpo_drop:
            self.supersede_dpo(line)
        self.pending_writers[line].add(rid)
        ws.uncaptured.add(line)

    def track_load(self, rid: RegionId, line: int) -> None:
        self._data_dependence(rid, line)

    def supersede_dpo(self, line: int) -> bool:
        """Drop the line's queued DPO; its regions wait for the next one."""
        op = self.queued_dpo.get(line)
        if op is None or not op.pending:
            return False
        self.sim.drop(op)
        del self.queued_dpo[line]
        for r in op.serves:
            ws = self.write_sets[r]
            ws.obligations.discard(op)
            ws.uncaptured.add(line)
            self.pending_writers[line].add(r)
        return True

    def end_region(self, rid: RegionId) -> None:
        regs = self.regs[rid.thread]
        prev = regs.last_region
        if prev is not None and prev in self.active:
            self._edge(rid, prev, "control")
        regs.last_region = rid
        for line in sorted(self.write_sets[rid].uncaptured):
            self._capture(line)
        self.active[rid].state = RegionState.PENDING
        self.try_commit(rid)

    def _capture(self, line: int) -> PersistOp | None:
        """Give every pending writer of ``line`` a DPO carrying the current data."""
        writers = self.pending_writers.pop(line, None)
        if not writers:
            return None
        sim = self.sim
        words = sim.words(line)
        # WAL: no data leaves before every outstanding log write for the line
        holds = [op for op in self.line_lpos.get(line, ()) if not op.done]
        op = self.queued_dpo.get(line)
        owner = self.last_writer.get(line, max(writers))
        if self.opt_dpo_coalesce and op is not None and op.pending:
            op.payload = words
            op.waits_on.extend(h for h in holds if h not in op.waits_on)
            op.serves |= writers
            sim.log("DPO_COALESCE", owner.thread, owner, line, op.bank)
        else:
            op = sim.issue(OpKind.DPO, line, owner.thread, owner, words, waits_on=holds, serves=writers)
            if op.pending:
                self.queued_dpo[line] = op
        for r in writers:
            ws = self.write_sets[r]
            ws.obligations.add(op)
            ws.uncaptured.discard(line)
        sim.cache.clean(line)
        return op

    # ---- commit -----------------------------------------------------------

    def on_persist_complete(self, op):
        if op.kind == OpKind.LPO:
            self.line_lpos[op.line].remove(op)
            self.write_sets[op.region].outstanding_lpos -= 1
            self._try_all([op.region])
        elif op.kind == OpKind.DPO:
            if self.queued_dpo.get(op.line) is op:
                del self.queued_dpo[op.line]
            self._try_all(sorted(op.serves))
        elif op.kind == OpKind.MARK:
            self._committed(op.region)

    def try_commit(self, rid: RegionId) -> bool:
        """Start committing ``rid`` if eligible; returns True if it moved forward."""
        return self._try_all([rid])

    def _ready(self, rid: RegionId) -> bool:
        entry = self.active.get(rid)
        if entry is None or entry.state != RegionState.PENDING or entry.mark is not None:
            return False
        ws = self.write_sets[rid]
        return ws.outstanding_lpos == 0 and not ws.owes_data() and not entry.depends_on

    def _try_all(self, work: list[RegionId]) -> bool:
        moved = False
        work = list(work)
        while work:
            rid = work.pop(0)
            if not self._ready(rid):
                continue
            moved = True
            if self.write_sets[rid].lines:
                t = rid.thread
                self.active[rid].mark = self.sim.issue(
                    OpKind.MARK, commit_register_line(t), t, rid, (rid.seq,))
            else:
                # nothing to persist: commit without a PM write
                work.extend(self._retire(rid))
        return moved

    def _committed(self, rid: RegionId) -> None:
        self._try_all(self._retire(rid))

    def _retire(self, rid: RegionId) -> list[RegionId]:
        regs = self.regs[rid.thread]
        if rid.seq != regs.committed_seq + 1:
            raise SimulationError(f"out-of-order commit of {rid}; committed_seq={regs.committed_seq}")
        regs.committed_seq = rid.seq
        regs.ring.free(rid)
        self.last_writer.purge(rid)
        entry = self.active.pop(rid)
        del self.write_sets[rid]
        self.committed.add(rid)
        for d in entry.dependents:
            if d in self.active:
                self.active[d].depends_on.discard(rid)
        self.sim.region_committed(rid)
        return sorted(entry.dependents)

    # ---- diagnostics ------------------------------------------------------

    def check_invariants(self) -> None:
        for line, r in self.last_writer.items():
            if r in self.committed or r not in self.active:
                raise AssertionError(f"LastWriterTable[{line:#x}] references committed {r}")
        for t, regs in self.regs.items():
            if len(regs.ring) > regs.ring.capacity:
                raise AssertionError(f"T{t} log ring over capacity")
        for rid, ws in self.write_sets.items():
            if ws.outstanding_lpos < 0:
                raise AssertionError(f"{rid}: negative outstanding LPO count")
        for rid, e in self.active.items():
            stale = e.depends_on - set(self.active)
            if stale:
                raise AssertionError(f"{rid} depends on committed regions {stale}")

    def diagnose(self) -> str:
        cycle = self.active.find_cycle()
        if cycle:
            return "dependence cycle: " + " -> ".join(map(str, cycle))
        occ = ", ".join(f"T{t}={len(r.ring)}/{r.ring.capacity}" for t, r in self.regs.items())
        return f"uncommitted={sorted(map(str, self.active))}; log occupancy {occ}"

    def finish(self) -> None:
        if self.active:
            raise SimulationError("asap: regions never committed; " + self.diagnose())
