"""Address assignment for the volatile and non-volatile segments.

Every object gets one offset o used in both segments, so an access is retargeted
by adding the segment delta.  Versioned objects reserve two contiguous copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

from .air import Program

V, N = "volatile", "nonvolatile"
RO, RW = "read-only-version", "read-write-version"

DEFAULT_V_BASE = 0x0000
DEFAULT_NV_BASE = 0x1000
DEFAULT_V_WORDS = 1024
DEFAULT_NV_WORDS = 32768
REGISTER_WORDS = 17          # r0..r15 plus the saved program counter


class LayoutError(Exception):
    pass


class SegmentOverflow(LayoutError):
    pass


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    size: int
    versioned: bool = False
    segments: str = "both"       # both | volatile | nonvolatile
    kind: str = "user"           # user | direction | dirty | job | checkpoint

    @property
    def span(self) -> int:
        return self.size * (2 if self.versioned else 1)


@dataclass
class MemoryLayout:
    v_base: int = DEFAULT_V_BASE
    nv_base: int = DEFAULT_NV_BASE
    v_size: int = DEFAULT_V_WORDS
    nv_size: int = DEFAULT_NV_WORDS
    slots: dict[str, Slot] = field(default_factory=dict)
    volatile_image: int = 0      # words a full-state save must copy

    @property
    def delta(self) -> int:
        return self.nv_base - self.v_base

    def slot(self, obj: str) -> Slot:
        try:
            return self.slots[obj]
        except KeyError:
            raise LayoutError(f"unknown object {obj!r}") from None

    @property
    def versioned(self) -> list[str]:
        return [s.name for s in self.slots.values() if s.versioned]

    def used_words(self) -> dict[str, int]:
        """Words occupied per segment (a versioned object counts twice in non-volatile memory only)."""
        v = sum(s.size for s in self.slots.values() if s.segments in ("both", V))
        nv = sum(s.span for s in self.slots.values() if s.segments in ("both", N))
        return {V: v, N: nv}

    def dump(self) -> str:
        lines = [f"# delta 0x{self.delta:04x}  volatile 0x{self.v_base:04x}+{self.v_size}"
                 f"  nonvolatile 0x{self.nv_base:04x}+{self.nv_size}",
                 "object\tsegment\toffset\tsize\tversioned"]
        for s in sorted(self.slots.values(), key=lambda s: s.offset):
            lines.append(f"{s.name}\t{s.segments}\t{s.offset}\t{s.size}\t{'yes' if s.versioned else 'no'}")
        return "\n".join(lines) + "\n"


def assign_layout(p: Program, plan=None, v_size: int = DEFAULT_V_WORDS, nv_size: int = DEFAULT_NV_WORDS,
                  v_base: int = DEFAULT_V_BASE, nv_base: int = DEFAULT_NV_BASE,
                  full_state_saves: bool = False, tracked=None) -> MemoryLayout:
    """Pack objects in declaration order; managed objects follow the user objects."""
    versioned = set(plan.versioned) if plan is not None else set()
    tracked = set(tracked if tracked is not None else (plan.tracked if plan is not None else ()))
    lay = MemoryLayout(v_base, nv_base, v_size, nv_size)
    off = 0
    for name, size in p.objects().items():
        s = Slot(name, off, size, name in versioned)
        lay.slots[name] = s
        off += s.span
    lay.volatile_image = off if full_state_saves else 0
    v_end = off
    for name in sorted(tracked):
        s = Slot(f"__dirty.{name}", off, lay.slots[name].size, segments=V, kind="dirty")
        lay.slots[s.name] = s
        off += s.size
        v_end = off
    for name in sorted(versioned):
        s = Slot(f"__dir.{name}", off, 1, segments=N, kind="direction")
        lay.slots[s.name] = s
        off += 1
    if versioned:
        job = 1 + max(lay.slots[x].size for x in versioned)
        lay.slots["__job"] = Slot("__job", off, job, segments=N, kind="job")
        off += job
    ck = 2 * (REGISTER_WORDS + lay.volatile_image) + 1
    lay.slots["__checkpoint"] = Slot("__checkpoint", off, ck, segments=N, kind="checkpoint")
    off += ck
    if v_end > v_size:
        raise SegmentOverflow(f"volatile segment needs {v_end} words, capacity {v_size}")
    if off > nv_size:
        raise SegmentOverflow(f"non-volatile segment needs {off} words, capacity {nv_size}")
    if v_base + v_size > nv_base and nv_base + nv_size > v_base:
        raise LayoutError("segments overlap")
    return lay


def layout_from_annotations(p: Program, **kw) -> MemoryLayout:
    """Rebuild the layout of a transformed program from its target and checkpoint annotations."""
    versioned, tracked, full = set(), set(), False
    for f in p.functions:
        for i in f.instrs():
            if i.op == "checkpoint":
                full = full or i.attrs.get("save") == "full"
                tracked.update(x for x in i.attrs.get("track", "").split(",") if x)
            if i.is_mem and i.target in (RO, RW):
                obj = p.object_of(f.name, i.addr.base)
                versioned.add(obj)
                if "dyn" in i.attrs or "track" in i.attrs:
                    tracked.add(obj)
    plan = SimpleNamespace(versioned=sorted(versioned), tracked=sorted(tracked))
    return assign_layout(p, plan, full_state_saves=full, **kw)


def resolve_address(l: MemoryLayout, obj: str, version: str, index: int = 0, direction: int = 0) -> int:
    """Concrete word address of obj[index] in the given version.

    For versioned objects the read-only copy sits at o + direction*size and the
    read-write copy at o + (1-direction)*size.
    """
    s = l.slot(obj)
    if not 0 <= index < s.size:
        raise LayoutError(f"index {index} out of bounds for {obj}[{s.size}]")
    if version == V:
        if s.segments == N:
            raise LayoutError(f"{obj} has no volatile copy")
        return l.v_base + s.offset + index
    if s.segments == V:
        raise LayoutError(f"{obj} has no non-volatile copy")
    base = l.nv_base + s.offset
    if version == N or not s.versioned:
        return base + index
    if version == RO:
        return base + direction * s.size + index
    if version == RW:
        return base + (1 - direction) * s.size + index
    raise LayoutError(f"unknown version {version!r}")
