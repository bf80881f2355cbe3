import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asapsim.trace import (KINDS, Op, Trace, TraceSyntaxError, WorkloadSpec, begin, end, generate, load,
                           lock, parse_trace, regions_of, render_trace, store, unlock, validate)


def test_parse_empty():
    tr = parse_trace("")
    assert tr.streams == () and tr.thread_count == 0


def test_parse_canonicalizes_byte_address():
    tr = parse_trace("T0 BEGIN\nT0 ST 0x1000 0 7\nT0 END")
    assert tr.thread_count == 1 and len(tr.streams[0]) == 3
    ev = tr.streams[0][1]
    assert (ev.op, ev.line, ev.word, ev.value) == (Op.ST, 0x40, 0, 7)


def test_parse_word_out_of_range():
    with pytest.raises(TraceSyntaxError, match="word-index"):
        parse_trace("T0 ST 0x1000 9 7")


def test_parse_reports_line_number():
    with pytest.raises(TraceSyntaxError) as exc:
        parse_trace("T0 BEGIN\n\n# note\nT0 FROB\n")
    assert exc.value.lineno == 4


def test_parse_rejects_thread_gap():
    with pytest.raises(TraceSyntaxError, match="dense"):
        parse_trace("T0 BEGIN\nT0 END\nT2 BEGIN\nT2 END")


def test_comments_and_blank_lines():
    tr = parse_trace("# header\n\nT0 BEGIN  # open\nT0 LD 0x40 3\nT0 END\n")
    assert [e.op for e in tr.streams[0]] == [Op.BEGIN, Op.LD, Op.END]
    assert tr.streams[0][1].line == 1


def test_validate_single_thread_ok():
    assert validate(Trace.from_events([begin(0), store(0, 1, 0, 5), end(0)])) == []


def test_validate_nested_region():
    bad = validate(parse_trace("T0 BEGIN\nT0 BEGIN"))
    assert any("nested" in v.message for v in bad)


def test_validate_unsynchronized_conflict():
    tr = Trace.from_events([begin(0), store(0, 0x40, 0, 1), end(0),
                            begin(1), store(1, 0x40, 0, 2), end(1)])
    bad = validate(tr)
    assert len(bad) == 1 and "unsynchronized" in bad[0].message


def test_validate_common_lock_is_race_free():
    tr = Trace.from_events([lock(0, 3), begin(0), store(0, 0x40, 0, 1), end(0), unlock(0, 3),
                            lock(1, 3), begin(1), load(1, 0x40, 0), end(1), unlock(1, 3)])
    assert validate(tr) == []


def test_validate_read_read_sharing_needs_no_lock():
    tr = Trace.from_events([begin(0), load(0, 5, 0), end(0), begin(1), load(1, 5, 0), end(1)])
    assert validate(tr) == []


@pytest.mark.parametrize("text,needle", [
    ("T0 ST 0x40 0 1", "outside"),
    ("T0 END", "without"),
    ("T0 BEGIN\nT0 LOCK 1\nT0 END\nT0 UNLOCK 1", "straddles"),
    ("T0 LOCK 1\nT0 LOCK 2\nT0 UNLOCK 1\nT0 UNLOCK 2", "innermost"),
    ("T0 LOCK 1", "still held"),
    ("T0 BEGIN", "ends inside"),
])
def test_validate_structural(text, needle):
    assert any(needle in v.message for v in validate(parse_trace(text)))


def test_generate_swap_shape():
    tr = generate(WorkloadSpec("swap", regions=1, stores_per_region=2, threads=1, seed=1))
    (regs,) = regions_of(tr)
    assert len(regs) == 1
    assert len(regs[0].stores) == 2 and len({s.line for s in regs[0].stores}) == 2


def test_generate_producer_consumer_shares_lines():
    tr = generate(WorkloadSpec("producer_consumer", regions=2, threads=2))
    assert validate(tr) == []
    regs = regions_of(tr)
    produced = set().union(*(r.writes for r in regs[0]))
    consumed = set().union(*(r.reads for r in regs[1]))
    assert produced & consumed


def test_generate_deterministic():
    spec = WorkloadSpec("hashmap", regions=5, threads=3, seed=42)
    assert generate(spec) == generate(spec)
    assert generate(spec) != generate(WorkloadSpec("hashmap", regions=5, threads=3, seed=43))


def test_think_appends_nop():
    tr = generate(WorkloadSpec("counter", regions=2, think=30))
    nops = [e for e in tr.streams[0] if e.op == Op.NOP]
    assert [e.count for e in nops] == [30, 30]


def test_workload_spec_parse_roundtrip():
    spec = WorkloadSpec("queue", regions=3, stores_per_region=4, threads=2, line_pool=5, seed=9, think=7)
    assert WorkloadSpec.parse(spec.to_string()) == spec
    assert WorkloadSpec.parse("kind=swap") == WorkloadSpec("swap")


@pytest.mark.parametrize("text", ["regions=2", "kind=swap,bogus=1", "kind=nope", "kind=swap,regions=0",
                                  "kind=producer_consumer,threads=1", "kind=swap,regions"])
def test_workload_spec_parse_errors(text):
    with pytest.raises(ValueError):
        WorkloadSpec.parse(text)


specs = st.builds(
    WorkloadSpec,
    kind=st.sampled_from(KINDS),
    regions=st.integers(1, 5),
    stores_per_region=st.integers(1, 10),
    threads=st.integers(2, 4),
    line_pool=st.integers(1, 10),
    seed=st.integers(0, 2**63),
    think=st.integers(0, 50),
)


@settings(max_examples=150, deadline=None)
@given(specs)
def test_generated_traces_validate_and_roundtrip(spec):
    tr = generate(spec)
    assert validate(tr) == []
    assert parse_trace(render_trace(tr)) == tr
    assert tr.region_count() == sum(len(r) for r in regions_of(tr))
