import pytest

from conftest import COND_READ, TWO_WRITES, LOOP_SUM
from flashvm.air import (IRError, ParseError, UnsupportedProgram,
                         build_cfg, build_region_tree, check_no_recursion, compute_memory_tags,
                         may_alias, parse_program, print_program, same_cell)
from flashvm.cli import corpus_program


def test_minimal_program():
    p = parse_program("func main() {\nentry:\n  halt\n}\n")
    assert len(p.functions) == 1
    assert len(p.functions[0].blocks) == 1


def test_two_writes_shape(two_writes):
    mem = two_writes.mem_instrs()
    assert [i.op for i in mem] == ["store", "store", "load", "load"]
    assert sum(1 for i in two_writes.instrs() if i.op == "checkpoint") == 2


@pytest.mark.parametrize("text,needle", [
    ("func main() {\nentry:\n  jmp missing\n}\n", "missing"),
    ("func main() {\nentry:\n  frob r1\n  halt\n}\n", "frob"),
    ("func main() {\nentry:\n  load r1, nowhere\n  halt\n}\n", "nowhere"),
    ("func main() {\nentry:\n  const r16, 1\n  halt\n}\n", "r16"),
    ("global g : word[2] = 1, 2, 3\nfunc main() {\nentry:\n  halt\n}\n", "initial values"),
])
def test_parse_errors(text, needle):
    with pytest.raises(ParseError) as e:
        parse_program(text)
    assert needle in str(e.value)


def test_parse_error_has_line():
    with pytest.raises(ParseError) as e:
        parse_program("func main() {\nentry:\n  jmp missing\n}\n")
    assert e.value.line == 3


@pytest.mark.parametrize("name", ["crc16", "fft8", "feistel", "crc16_long"])
def test_corpus_round_trip(name):
    p = corpus_program(name)
    assert parse_program(print_program(p)) == p


def test_annotations_round_trip():
    p = parse_program(TWO_WRITES)
    i = p.mem_instrs()[0]
    p.functions[0].blocks[0].instrs.insert(3, p.new("store", i.args, prov="dummy-write", target="nonvolatile"))
    text = print_program(p)
    assert "@prov=dummy-write" in text
    assert parse_program(text) == p


def test_no_globals_prints_no_global_lines():
    text = print_program(parse_program("func main() {\nentry:\n  halt\n}\n"))
    assert "global" not in text


def test_comments_and_hex():
    p = parse_program("global g : word[1] = 0x10 ; init\nfunc main() { ; entry point\nentry:\n  halt\n}\n")
    assert p.globals[0].init == [16]


def _fn(text, name="main"):
    return parse_program(text).func(name)


def test_cfg_straight_line():
    f = _fn("func main() {\nb0:\n  jmp b1\nb1:\n  const r1, 1\nb2:\n  halt\n}\n")
    cfg = build_cfg(f)
    assert cfg.succ == {"b0": ["b1"], "b1": ["b2"], "b2": []}


def test_cfg_diamond():
    cfg = build_cfg(_fn(COND_READ))
    assert cfg.succ["entry"] == ["then", "join"]
    assert cfg.pred["join"] == ["entry", "then"]


def test_cfg_loop_back_edge():
    cfg = build_cfg(_fn(LOOP_SUM))
    assert "loop" in cfg.succ["loop"]
    assert cfg.succ["loop"] == ["loop", "done"]


def test_cfg_rejects_entry_predecessor():
    with pytest.raises(IRError):
        build_cfg(_fn("func main() {\nentry:\n  jmp entry\n}\n"))


def test_region_tree_crc_nesting():
    p = corpus_program("crc16_long")
    tree = build_region_tree(build_cfg(p.func("crc_all")))
    outer = [l for l in tree.loops if l.header == "word"]
    inner = [l for l in tree.loops if l.header == "nib"]
    assert outer and inner
    assert inner[0].parent is outer[0]


def test_region_tree_loop_contains_conditional():
    p = corpus_program("fft8")
    tree = build_region_tree(build_cfg(p.func("bitrev")))
    (lp,) = tree.loops
    cond = [c for c in tree.conditionals if c.cond == "perm"]
    assert cond and cond[0].parent is lp


def test_region_tree_empty_without_branches():
    tree = build_region_tree(build_cfg(_fn(TWO_WRITES)))
    assert tree.roots == []


def test_region_tree_loop_with_save():
    src = LOOP_SUM.replace("  add r1, r1, 1\n", "  checkpoint\n  add r1, r1, 1\n")
    f = _fn(src)
    tree = build_region_tree(build_cfg(f))
    (lp,) = tree.loops
    assert any(i.op == "checkpoint" for lab in lp.body for i in f.block(lab).instrs)


@pytest.mark.parametrize("name,fname", [("crc16", "crc_word"), ("fft8", "main"), ("feistel", "main"),
                                        ("crc16_long", "crc_all")])
def test_region_partition(name, fname):
    f = corpus_program(name).func(fname)
    tree = build_region_tree(build_cfg(f))

    def check(regions, universe):
        seen = set()
        for r in regions:
            assert not (r.blocks & seen)
            assert r.blocks <= universe
            seen |= r.blocks
            check(r.children, r.blocks)

    check(tree.roots, frozenset(b.label for b in f.blocks))


def test_irreducible_rejected():
    src = """
func main() {
entry:
  br r1, a, b
a:
  jmp b
b:
  br r2, a, out
out:
  halt
}
"""
    with pytest.raises(IRError):
        build_region_tree(build_cfg(_fn(src)))


def test_recursion_rejected():
    p = parse_program("func f() {\nentry:\n  call f\n  ret\n}\nfunc main() {\nentry:\n  call f\n  halt\n}\n")
    with pytest.raises(UnsupportedProgram):
        check_no_recursion(p)


MIRROR_INDEX = """
global a : word[8]

func main() {
entry:
  const r1, 0
  jmp loop
loop:
  load r2, a[r1]
  add r2, r2, 1
  store a[r1], r2
  sub r3, r0, r1
  add r3, r3, 7
  load r4, a[r3]
  add r1, r1, 1
  cmp r5, r1, 8
  br r5, loop, done
done:
  halt
}
"""


def test_tags_fig5():
    p = compute_memory_tags(parse_program(MIRROR_INDEX))
    ld, st, other = p.mem_instrs()
    assert ld.tag == st.tag and same_cell(ld.tag, st.tag)
    assert ld.tag.kind == "affine"
    assert other.tag != ld.tag


def test_affine_index_expression():
    src = MIRROR_INDEX.replace("  sub r3, r0, r1\n  add r3, r3, 7\n", "  add r3, r1, 2\n")
    p = compute_memory_tags(parse_program(src))
    ld, _, other = p.mem_instrs()
    assert other.tag.kind == "affine" and other.tag.c0 == ld.tag.c0 + 2
    assert not may_alias(ld.tag, other.tag)


def test_scalar_tags_equal():
    p = compute_memory_tags(parse_program(LOOP_SUM))
    sums = [i.tag for i in p.mem_instrs() if i.addr.base == "sum"]
    assert len(sums) == 3 and len(set(sums)) == 1


def test_table_lookup_is_opaque():
    p = compute_memory_tags(corpus_program("feistel"))
    sbox = [i.tag for i in p.mem_instrs() if i.addr.base == "sbox"]
    assert sbox and all(t.conservative for t in sbox)
    assert all(not same_cell(t, t) for t in sbox)
    assert len(set(sbox)) == len(sbox)
