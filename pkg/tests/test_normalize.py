import pytest

from conftest import COND_READ, TWO_WRITES, LOOP_SUM
from flashvm.air import compute_memory_tags, parse_program
from flashvm.cli import corpus_program, run_pipeline
from flashvm.emulator import run_continuous
from flashvm.normalize import (KINDS, REMEDIES, normalize_all, normalize_calls, normalize_conditionals,
                               normalize_loops)
from flashvm.placement import normalize_interval_boundaries, place_checkpoints


def prep(src):
    return compute_memory_tags(normalize_interval_boundaries(parse_program(src)))


def dummies(p):
    return [(i.op, i.addr.base) for i in p.mem_instrs() if i.prov == "dummy-write"]


def test_loop_dummy_write(m16):
    q, found = normalize_loops(prep(LOOP_SUM))
    assert {f.kind for f in found} == {"loop-last-write", "loop-first-read"}
    f = q.func("main")
    done = [i for i in f.block("done").instrs if i.prov == "dummy-write"]
    assert [i.op for i in done][-1] == "store" and done[-1].addr.base == "sum"
    before = [i for b in f.blocks if b.label not in ("loop", "done") for i in b.instrs
              if i.prov == "dummy-write"]
    assert before and before[0].op == "load"
    r = run_pipeline(LOOP_SUM, None, m16).program
    loop = [i for i in r.func("main").block("loop").instrs if i.is_mem and i.addr.base == "sum"]
    assert [i.target for i in loop] == ["volatile", "volatile"]


def test_loop_without_memory_writes():
    src = "func main() {\nentry:\n  checkpoint\n  const r1, 0\n  jmp l\nl:\n  add r1, r1, 1\n  cmp r2, r1, 4\n  br r2, l, d\nd:\n  out r1\n  checkpoint\n  halt\n}\n"
    _, found = normalize_loops(prep(src))
    assert found == []


NESTED = """
global t : word[1]

func main() {
entry:
  checkpoint
  const r1, 0
  jmp outer
outer:
  const r2, 0
  jmp inner
inner:
  load r3, t
  add r3, r3, r2
  store t, r3
  add r2, r2, 1
  cmp r4, r2, 3
  br r4, inner, onext
onext:
  add r1, r1, 1
  cmp r4, r1, 2
  br r4, outer, done
done:
  checkpoint
  halt
}
"""


def test_nested_loops(m16):
    p = prep(NESTED)
    q, found = normalize_loops(p)
    after = [f for f in found if f.kind == "loop-last-write"]
    assert [f.region for f in after] == ["main:inner", "main:outer"]
    f = q.func("main")
    for lab in ("onext", "done"):
        assert [i.op for i in f.block(lab).instrs if i.prov == "dummy-write"][-1:] == ["store"]
    assert normalize_loops(q)[1] == []
    a, b = run_continuous(p, None, m16), run_continuous(q, None, m16)
    assert a.globals == b.globals


def test_conditional_conservative():
    p = prep(COND_READ)
    q, found = normalize_conditionals(p)
    assert dummies(q) == []
    assert found and all(f.remedy == "conservative" for f in found)
    flagged = {u for f in found for u in f.instrs}
    loads = [i.uid for i in p.mem_instrs() if i.op == "load"]
    assert set(loads) <= flagged


def test_conditional_non_conservative(m16):
    p = prep(COND_READ)
    q, found = normalize_conditionals(p, mode="non-conservative")
    added = [(b.label, i.op) for b in q.func("main").blocks for i in b.instrs if i.prov == "dummy-write"]
    assert added and all(lab not in ("entry", "then", "join") for lab, _ in added)
    assert ("store" in {op for _, op in added})
    assert any(f.remedy == "non-conservative" for f in found)
    a, b = run_continuous(p, None, m16), run_continuous(q, None, m16)
    assert a.globals == b.globals


def test_branch_free_no_findings():
    assert normalize_conditionals(prep(TWO_WRITES))[1] == []


F_CALL = """
global a : word[1]

func f() {
entry:
  const r1, 1
  store a, r1
  ret
}

func main() {
entry:
  checkpoint
  call f
  checkpoint
  call f
  const r2, 7
  store a, r2
  checkpoint
  halt
}
"""


def test_call_dummy_write():
    q, found = normalize_calls(prep(F_CALL))
    main = q.func("main").blocks[0].instrs
    ops = [(i.op, i.prov) for i in main]
    first_call = next(k for k, i in enumerate(main) if i.op == "call")
    assert ops[first_call + 1:first_call + 3] == [("load", "dummy-write"), ("store", "dummy-write")]
    assert sum(1 for i in main if i.prov == "dummy-write") == 2
    assert [f.kind for f in found] == ["call-outside-frame"]


def test_frame_only_helper():
    src = """
global g : word[1]
func h() {
  local x : word[1]
entry:
  store x, r1
  load r2, x
  ret
}
func main() {
entry:
  checkpoint
  call h
  call h
  store g, r2
  checkpoint
  halt
}
"""
    q, found = normalize_calls(prep(src))
    assert found == []
    r = run_pipeline(src, None)
    assert all(i.target == "volatile" for i in r.program.func("h").instrs() if i.is_mem)


def test_frame_of_saving_function_is_mapped():
    r = run_pipeline(corpus_program("crc16_long"), "loop-latch")
    frame = [i.target for i in r.program.func("crc_all").instrs() if i.is_mem and i.addr.base in "ciw"]
    assert "nonvolatile" in frame


@pytest.mark.parametrize("src", [LOOP_SUM, NESTED, COND_READ, F_CALL, TWO_WRITES])
@pytest.mark.parametrize("mode", ["conservative", "non-conservative"])
def test_normalize_all_idempotent_and_sound(src, mode, m16):
    p = prep(src)
    q, _ = normalize_all(p, mode)
    r, again = normalize_all(q, mode)
    assert r == q
    a, b = run_continuous(p, None, m16), run_continuous(q, None, m16)
    assert a.globals == b.globals and a.outputs == b.outputs


@pytest.mark.parametrize("name", ["crc16", "fft8", "feistel"])
@pytest.mark.parametrize("strategy", ["loop-latch", "function-return", "idempotent"])
def test_normalize_corpus_idempotent(name, strategy):
    p = compute_memory_tags(normalize_interval_boundaries(place_checkpoints(corpus_program(name), strategy)))
    q, _ = normalize_all(p)
    assert normalize_all(q)[0] == q


def test_finding_vocabulary():
    _, found = normalize_all(prep(LOOP_SUM))
    for f in found:
        assert f.kind in KINDS and f.remedy in REMEDIES
        assert set(f.to_json()) >= {"kind", "instrs", "region", "remedy"}
