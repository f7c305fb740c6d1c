import pytest

from flashvm.air import parse_program, print_program
from flashvm.baselines import BASELINE_NAMES
from flashvm.cli import build_arm, corpus_program
from flashvm.layout import (REGISTER_WORDS, LayoutError, SegmentOverflow, assign_layout, layout_from_annotations,
                            resolve_address)
from flashvm.versioning import VersionPlan

V, N, RO, RW = "volatile", "nonvolatile", "read-only-version", "read-write-version"


def user_words(lay):
    used = lay.used_words()
    managed = sum(s.span for s in lay.slots.values() if s.kind != "user" and s.segments == N)
    return {V: used[V], N: used[N] - managed}


def prog(decls):
    return parse_program(decls + "\nfunc main() {\nentry:\n  halt\n}\n")


def test_packing():
    lay = assign_layout(prog("global x : word[1]\nglobal y : word[1]\nglobal a : word[4]"))
    assert user_words(lay) == {V: 6, N: 6}
    for obj in ("x", "y", "a"):
        assert resolve_address(lay, obj, N) - resolve_address(lay, obj, V) == lay.delta


def test_hazardous_scalar_doubles_nonvolatile():
    lay = assign_layout(prog("global a : word[1]"), VersionPlan(versioned=["a"]))
    assert user_words(lay) == {V: 1, N: 2}
    o = lay.slot("a").offset
    assert resolve_address(lay, "a", RO) == lay.nv_base + o
    assert resolve_address(lay, "a", RW) == lay.nv_base + o + 1
    assert resolve_address(lay, "a", RO, direction=1) == lay.nv_base + o + 1


def test_overflow():
    with pytest.raises(SegmentOverflow):
        assign_layout(prog("global big : word[40]"), v_size=32)
    with pytest.raises(SegmentOverflow):
        assign_layout(prog("global big : word[40]"), nv_size=64)


def test_overlapping_segments():
    with pytest.raises(LayoutError):
        assign_layout(prog("global a : word[1]"), nv_base=0x10)


def test_scalar_at_offset_three():
    lay = assign_layout(prog("global p : word[3]\nglobal a : word[1]"))
    assert lay.slot("a").offset == 3 and lay.delta == 0x1000
    assert resolve_address(lay, "a", V) == 0x0003
    assert resolve_address(lay, "a", N) == 0x1003


def test_versioned_array_read_write_copy():
    lay = assign_layout(prog("global p : word[8]\nglobal a : word[4]"), VersionPlan(versioned=["a"]))
    assert lay.slot("a").offset == 8
    assert resolve_address(lay, "a", RW, 2) == lay.nv_base + 8 + 4 + 2
    assert resolve_address(lay, "a", RO, 2) == lay.nv_base + 8 + 2


@pytest.mark.parametrize("index", [-1, 4])
def test_out_of_bounds(index):
    lay = assign_layout(prog("global a : word[4]"))
    with pytest.raises(LayoutError):
        resolve_address(lay, "a", V, index)


def test_frame_slots_named_by_function():
    p = parse_program("func h() {\n  local t : word[2]\nentry:\n  ret\n}\nfunc main() {\nentry:\n  call h\n  halt\n}\n")
    lay = assign_layout(p)
    assert "h.t" in lay.slots


def test_managed_objects_follow_user_objects():
    lay = assign_layout(prog("global a : word[2]\nglobal b : word[1]"),
                        VersionPlan(versioned=["a"], tracked=["a"]))
    user_end = max(s.offset + s.span for s in lay.slots.values() if s.kind == "user")
    assert all(s.offset >= user_end for s in lay.slots.values() if s.kind != "user")
    assert lay.slot("__dirty.a").segments == V
    assert lay.slot("__dir.a").segments == N
    with pytest.raises(LayoutError):
        resolve_address(lay, "__dir.a", V)


def test_volatile_image_only_for_full_saves():
    p = prog("global a : word[5]")
    assert assign_layout(p).volatile_image == 0
    assert assign_layout(p, full_state_saves=True).volatile_image == 5


def test_checkpoint_area_holds_two_register_images():
    lay = assign_layout(prog("global a : word[1]"))
    assert lay.slots["__checkpoint"].segments == N
    assert lay.slots["__checkpoint"].span == 2 * REGISTER_WORDS + 1


def test_dump_lists_objects():
    text = assign_layout(prog("global a : word[2]"), VersionPlan(versioned=["a"])).dump()
    assert "a\tboth\t0\t2\tyes" in text


@pytest.mark.parametrize("arm", ["flashvm", "flashvm-fr", "flashvm-idem", *BASELINE_NAMES])
@pytest.mark.parametrize("name", ["crc16", "fft8", "feistel"])
def test_layout_survives_printing(name, arm, m16):
    a = build_arm(corpus_program(name), arm, m16)
    again = layout_from_annotations(parse_program(print_program(a.program)))
    assert again.dump() == a.layout.dump()
    assert again.volatile_image == a.layout.volatile_image
