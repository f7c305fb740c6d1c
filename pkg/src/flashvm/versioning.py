"""Write-after-read hazard detection and two-copy memory versioning.

A versioned object keeps two non-volatile copies and a direction word d.  The
read-only version (home) is copy[d], the read-write version copy[1-d].  Intervals
that read an object before writing it write the read-write version and swap at
their exit; copies reconcile partially updated arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .air import Addr, MemoryTag, Program, Reg, block_exit_values, may_alias
from .flow import EMPTY, FlowGraph, dead_register, liveness, must_written, reset_tag, solve_forward

RO, RW = "read-only-version", "read-write-version"
V, N = "volatile", "nonvolatile"


@dataclass(frozen=True)
class Hazard:
    tag: MemoryTag
    write: int
    read: int

    @property
    def base(self) -> str:
        return self.tag.base


@dataclass
class VersionPlan:
    versioned: list[str] = field(default_factory=list)
    assignment: dict = field(default_factory=dict)     # uid -> RO | RW | "dynamic"
    exits: dict = field(default_factory=dict)          # exit uid -> {object: action}
    copies: list = field(default_factory=list)         # {exit, object, direction, cells}
    tracked: list[str] = field(default_factory=list)
    active: dict = field(default_factory=dict)         # object -> number of active intervals
    loop_copies: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"versioned": self.versioned, "tracked": self.tracked,
                "assignment": {str(k): v for k, v in sorted(self.assignment.items())},
                "exits": {str(k): v for k, v in sorted(self.exits.items())},
                "copies": self.copies, "loop_copies": self.loop_copies}


def _is_nv(i, all_nonvolatile: bool) -> bool:
    return all_nonvolatile or i.target != V


def _skip_set(p: Program) -> set[int]:
    from .mapping import pinned_locals
    pins = pinned_locals(p)
    return {i.uid for i in p.mem_instrs() if i.tag is not None and i.tag.base in pins}


# Cell sets tracked by the analyses below: a MemoryTag; ("past", tag) for the cells an
# affine tag named in all earlier iterations of its loop; ("?", base) for any cell.

def _shift(e, rs):
    t = e[1] if isinstance(e, tuple) and e[0] == "past" else e
    if not isinstance(t, MemoryTag) or not reset_tag(t, rs):
        return e
    if ("back",) + t.loop[:2] in rs:
        return ("past", t)
    return ("?", t.base)


def _alias(g: FlowGraph, e, r: MemoryTag) -> bool:
    if isinstance(e, MemoryTag):
        return may_alias(e, r)
    if e[0] == "?":
        return e[1] == r.base
    t = e[1]
    if t.base != r.base:
        return False
    step = g.steps.get(t.loop)
    if r.kind != "affine" or r.loop != t.loop or r.c1 != t.c1 or step is None:
        return True
    d, unit = t.c0 - r.c0, t.c1 * step
    return d % unit == 0 and d // unit >= 1


def _base(e) -> str:
    return e.base if isinstance(e, MemoryTag) else (e[1] if e[0] == "?" else e[1].base)


def _hazard_pass(g: FlowGraph, all_nonvolatile: bool):
    """Forward may analysis of (cells, read uid) for non-volatile reads since the interval entry."""
    skip = set() if all_nonvolatile else _skip_set(g.p)
    nodes = g.nodes

    def transfer(u, s):
        i = nodes[u].ins
        if i is None:
            return s
        if i.op == "checkpoint":
            return EMPTY
        if i.op == "load" and i.uid not in skip and _is_nv(i, all_nonvolatile):
            return s | {(i.tag, i.uid)}
        return s

    def reset(s, rs):
        return frozenset((_shift(e, rs), r) for e, r in s)

    ins, _ = solve_forward(g, EMPTY, transfer, frozenset.union, reset)
    return ins, skip


def _node_hazards(g: FlowGraph, ins, skip, all_nonvolatile):
    out = []
    for n in g.nodes:
        i = n.ins
        if i is None or i.op != "store" or ins[n.id] is None or i.uid in skip:
            continue
        if not _is_nv(i, all_nonvolatile):
            continue
        for e, ruid in ins[n.id]:
            if _alias(g, e, i.tag):
                out.append((n.id, Hazard(i.tag, i.uid, ruid)))
    return out


def detect_war_hazards(p: Program, intervals=None, all_nonvolatile: bool = False) -> list[Hazard]:
    """Non-volatile reads followed, within one interval, by a may-aliasing non-volatile write."""
    g = FlowGraph(p)
    ins, skip = _hazard_pass(g, all_nonvolatile)
    seen, out = set(), []
    for u, h in sorted(_node_hazards(g, ins, skip, all_nonvolatile), key=lambda x: (g.rank[x[0]], x[1].read)):
        if h not in seen:
            seen.add(h)
            out.append(h)
    return out


# ---------------------------------------------------------------- components

def components(g: FlowGraph) -> list[int]:
    """Union-find over the instruction graph with checkpoint out-edges cut."""
    parent = list(range(len(g.nodes)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u in range(len(g.nodes)):
        if g.nodes[u].boundary:
            continue
        for v, _ in g.succ[u]:
            a, b = find(u), find(v)
            if a != b:
                parent[a] = b
    return [find(u) for u in range(len(g.nodes))]


def _written_tags(g: FlowGraph, skip):
    """Forward may analysis of the non-volatile cells written since the interval entry."""
    nodes = g.nodes

    def transfer(u, s):
        i = nodes[u].ins
        if i is None:
            return s
        if i.op == "checkpoint":
            return EMPTY
        if i.op == "store" and i.uid not in skip and i.target != V:
            return s | {i.tag}
        return s

    def reset(s, rs):
        return frozenset(_shift(e, rs) for e in s)

    return solve_forward(g, EMPTY, transfer, frozenset.union, reset)


def _nv_must_written(g: FlowGraph, skip):
    return must_written(g, skip=lambda i: i.uid in skip or i.target == V)


def _maybe_written(g: FlowGraph, s, t: MemoryTag) -> bool:
    return any(_alias(g, e, t) for e in s)


# ---------------------------------------------------------------- versioning

def apply_versioning(p: Program, hazards) -> tuple[Program, VersionPlan]:
    """Direct accesses of hazardous objects to read-only / read-write versions."""
    q = p.copy()
    plan = VersionPlan()
    objs = sorted({h.base for h in hazards})
    if not objs:
        return q, plan
    g = FlowGraph(q)
    q = g.p
    plan.versioned = objs
    ins, skip = _hazard_pass(g, False)
    comp = components(g)
    active: dict[int, set[str]] = {}
    for u, h in _node_hazards(g, ins, skip, False):
        if h.base in objs:
            active.setdefault(comp[u], set()).add(h.base)
    access = {}
    for n in g.nodes:
        i = n.ins
        if i is not None and i.is_mem and i.uid not in skip and i.tag.base in objs and i.target != V:
            access.setdefault(i.uid, []).append(n.id)
    # close over static instructions shared by several intervals
    changed = True
    while changed:
        changed = False
        for uid, ns in access.items():
            x = g.nodes[ns[0]].ins.tag.base
            comps = {comp[u] for u in ns}
            if any(x in active.get(c, ()) for c in comps) and not all(x in active.get(c, ()) for c in comps):
                for c in comps:
                    active.setdefault(c, set()).add(x)
                changed = True
    written, _ = _nv_must_written(g, skip)
    maybe, _ = _written_tags(g, skip)
    dynamic_objs = set()
    by_uid = {i.uid: i for i in q.mem_instrs()}
    for uid, ns in access.items():
        i = by_uid[uid]
        x = i.tag.base
        is_active = x in active.get(comp[ns[0]], ())
        if not is_active:
            i.target = RO
            plan.assignment[uid] = RO
            continue
        if i.op == "store":
            i.target = RW
            plan.assignment[uid] = RW
            continue
        kinds = set()
        for u in ns:
            if written[u] is not None and i.tag in written[u] and i.tag.kind != "opaque":
                kinds.add(RW)
            elif maybe[u] is None or not _maybe_written(g, maybe[u], i.tag):
                kinds.add(RO)
            else:
                kinds.add("dynamic")
        if len(kinds) == 1 and "dynamic" not in kinds:
            i.target = kinds.pop()
        else:
            i.target = RO
            i.attrs["dyn"] = ""
            dynamic_objs.add(x)
        plan.assignment[uid] = "dynamic" if "dyn" in i.attrs else i.target
    plan.active = {x: sum(1 for c in active.values() if x in c) for x in objs}
    plan.tracked = sorted(dynamic_objs)
    # every exit of an active interval swaps its objects until copy planning refines it
    for n in g.nodes:
        if not g.is_exit(n.id) or n.ins is None:
            continue
        acts = active.get(comp[n.id], set())
        if acts:
            e = plan.exits.setdefault(n.ins.uid, {})
            for x in acts:
                e.setdefault(x, "swap")
    for f in q.functions:
        for i in f.instrs():
            if i.op == "checkpoint":
                i.attrs["exec"] = "always"
    return q, plan


def plan_partial_update_copies(p: Program, intervals, plan: VersionPlan) -> VersionPlan:
    """Pick swap, copy-forward, copy-back or run-time tracking at each interval exit."""
    if not plan.versioned:
        return plan
    g = FlowGraph(p)
    skip = _skip_set(g.p)
    comp = components(g)
    sizes = g.p.objects()
    written, _ = _nv_must_written(g, skip)
    maybe, _ = _written_tags(g, skip)
    # a component is active for x iff it holds a read-write store to x
    active: dict[int, set[str]] = {}
    for n in g.nodes:
        i = n.ins
        if i is not None and i.op == "store" and i.target == RW:
            active.setdefault(comp[n.id], set()).add(i.tag.base)
    exits: dict[int, dict] = {}
    tracked = set(plan.tracked)
    copies = []
    exit_nodes: dict[int, list[int]] = {}
    for u in range(len(g.nodes)):
        if g.is_exit(u) and g.nodes[u].ins is not None:
            exit_nodes.setdefault(g.nodes[u].ins.uid, []).append(u)
    for uid in sorted(exit_nodes):
        ns = exit_nodes[uid]
        objs = set().union(*(active.get(comp[u], set()) for u in ns))
        entry = {}
        for x in sorted(objs):
            per_ctx = [_written_cells(written[u], maybe[u], x) if x in active.get(comp[u], set()) else None
                       for u in ns]
            if any(c is None for c in per_ctx) or len(set(per_ctx)) != 1:
                entry[x] = "track"
                tracked.add(x)
                continue
            cells, n_cells = per_ctx[0], sizes[x]
            if not cells:
                continue
            if len(cells) == n_cells:
                entry[x] = "swap"
            elif len(cells) >= n_cells / 2:
                rest = sorted(set(range(n_cells)) - cells)
                entry[x] = ("fwd", rest)
                copies.append({"exit": uid, "object": x, "direction": "forward", "cells": rest})
            else:
                entry[x] = ("back", sorted(cells))
                copies.append({"exit": uid, "object": x, "direction": "back", "cells": sorted(cells)})
        if entry:
            exits[uid] = entry
    plan.exits = exits
    plan.copies = copies
    plan.tracked = sorted(tracked)
    return plan


def _written_cells(must, may, x) -> frozenset | None:
    """Cells of x written on every path, or None when that set is not statically exact."""
    if must is None or may is None:
        return None
    for t in may:
        if _base(t) == x and not (isinstance(t, MemoryTag) and t.kind == "const"):
            return None
    must_c = {t.c0 for t in must if t.base == x and t.kind == "const"}
    may_c = {t.c0 for t in may if isinstance(t, MemoryTag) and t.base == x}
    return frozenset(must_c) if must_c == may_c else None


def annotate_exits(p: Program, plan: VersionPlan) -> Program:
    """Write exit actions and tracking flags into instruction attributes."""
    q = p.copy()
    tracked = set(plan.tracked)
    for i in q.instrs():
        for k in ("swap", "fwd", "back", "track"):
            i.attrs.pop(k, None)
        if i.uid in plan.exits:
            e = plan.exits[i.uid]
            swap = sorted(x for x, a in e.items() if a == "swap")
            fwd = sorted((x, a[1]) for x, a in e.items() if isinstance(a, tuple) and a[0] == "fwd")
            back = sorted((x, a[1]) for x, a in e.items() if isinstance(a, tuple) and a[0] == "back")
            trk = sorted(x for x, a in e.items() if a == "track")
            if swap:
                i.attrs["swap"] = ",".join(swap)
            if fwd:
                i.attrs["fwd"] = ",".join(f"{x}/" + ".".join(map(str, cs)) for x, cs in fwd)
            if back:
                i.attrs["back"] = ",".join(f"{x}/" + ".".join(map(str, cs)) for x, cs in back)
            if trk:
                i.attrs["track"] = ",".join(trk)
        if i.op == "store" and i.target == RW and i.tag is not None and i.tag.base in tracked:
            i.attrs["track"] = ""
    return q


def parse_exit_attrs(attrs: dict) -> dict:
    """Decode exit attributes into {object: action}."""
    out = {}
    for x in filter(None, attrs.get("swap", "").split(",")):
        out[x] = ("swap", None)
    for k, name in (("fwd", "fwd"), ("back", "back")):
        for item in filter(None, attrs.get(k, "").split(",")):
            x, _, cells = item.partition("/")
            out[x] = (name, [int(c) for c in cells.split(".") if c != ""])
    if attrs.get("track"):
        for x in attrs["track"].split(","):
            out[x] = ("track", None)
    return out


def versioned_objects(p: Program) -> list[str]:
    objs = set()
    for i in p.instrs():
        if i.is_mem and i.target in (RO, RW):
            objs.add(i.tag.base if i.tag is not None else i.addr.base)
    return sorted(objs)


# ---------------------------------------------------------------- uncertainty normalization

def normalize_versioning_uncertainties(p: Program, intervals=None, model=None, hazards=None):
    """Loop case: volatile copies for arrays read one iteration after being written.
    Conditional case: non-conservative dummy writes for conditionally executed first writes.

    Returns (program, hazards, notes); the mapping is recomputed when anything was inserted.
    """
    from .mapping import consolidate_reads, map_reads, map_writes
    from .normalize import normalize_conditionals
    q = p.copy()
    if hazards is None:
        hazards = detect_war_hazards(q)
    if not hazards:
        return q, hazards, {"conditional": [], "loop": []}
    objs = {h.base for h in hazards}
    # conditional case
    q2, findings = normalize_conditionals(q, mode="conservative")
    request = {(fd.region.split(":")[0], fd.region.split(":")[1], fd.tag) for fd in findings
               if fd.kind == "cond-first-write" and fd.tag.split("[")[0] in objs}
    inserted = False
    out_findings = []
    if request:
        q3, f3 = normalize_conditionals(q, mode="conservative", request=request)
        out_findings = [fd for fd in f3 if fd.remedy == "non-conservative"]
        if out_findings:
            q = q3
            inserted = True
    # loop case
    q, loops = _loop_copies(q, objs)
    if inserted or loops:
        q = map_writes(q)
        q = map_reads(q)
        if model is not None:
            q = consolidate_reads(q, None, model)
        _retarget_loop_reads(q, loops)
        hazards = detect_war_hazards(q)
    return q, hazards, {"conditional": out_findings, "loop": loops}


def _retarget_loop_reads(q: Program, loops):
    uids = {lc["read"] for lc in loops}
    for i in q.mem_instrs():
        if i.uid in uids:
            i.target = V
            i.attrs["loopcopy"] = ""


def _loop_copies(q: Program, objs) -> tuple[Program, list]:
    """Volatile copies for the a[i] read / a[i+j] written pattern in save-free loops."""
    done = []
    g = FlowGraph(q)
    q = g.p
    live_in, live_out, block_in = liveness(q)
    sizes = q.objects()
    for f in q.functions:
        tree = g.trees[f.name]
        ends = None
        for lp in tree.loops:
            if lp.children or lp.preheader is None:
                continue
            body = [i for lab in lp.body for i in f.block(lab).instrs]
            if any(i.op in ("checkpoint", "call") for i in body):
                continue
            for x in sorted(objs):
                stores = [i for i in body if i.op == "store" and i.tag.base == x]
                if len(stores) != 1 or stores[0].target == V or stores[0].tag.kind != "affine":
                    continue
                s = stores[0]
                if s.tag.loop[:2] != (f.name, lp.header) or not _every_iteration(f, tree, lp, s):
                    continue
                step = g.steps.get(s.tag.loop)
                if step is None:
                    continue
                if ends is None:
                    ends = block_exit_values(q, f.name)
                init = (ends.get(lp.preheader) or [None] * 16)[s.tag.loop[2]]
                if init is None or init[0] != "c":
                    continue
                v0 = init[1] - 0x10000 if init[1] & 0x8000 else init[1]
                for r in body:
                    if r.op != "load" or r.target == V or r.tag.base != x or r.tag.kind != "affine":
                        continue
                    if r.tag.loop != s.tag.loop or r.tag.c1 != s.tag.c1:
                        continue
                    diff, unit = s.tag.c0 - r.tag.c0, s.tag.c1 * step
                    if diff % unit or not 1 <= diff // unit <= 4:
                        continue
                    cells = [r.tag.c0 + r.tag.c1 * (v0 + m * step) for m in range(diff // unit)]
                    if any(c < 0 or c >= sizes[x] for c in cells):
                        continue
                    dead = dead_register(block_in[(f.name, lp.header)])
                    if dead is None:
                        continue
                    base = x.split(".", 1)[1] if "." in x else x
                    pre = f.block(lp.preheader)
                    pairs = []
                    for c in cells:
                        pairs.append(q.new("load", (Reg(dead), Addr(base, c)), prov="versioning-copy"))
                        pairs.append(q.new("store", (Addr(base, c), Reg(dead)), prov="versioning-copy",
                                           target=V))
                    k = len(pre.instrs) - (1 if pre.terminator is not None else 0)
                    pre.instrs[k:k] = pairs
                    if not any(c.get("write") == s.uid for c in done):
                        blk = next(b for b in f.blocks if s in b.instrs)
                        cp = q.new("store", s.args, prov="versioning-copy", target=V)
                        blk.instrs.insert(blk.instrs.index(s) + 1, cp)
                    done.append({"function": f.name, "loop": lp.header, "object": x, "read": r.uid,
                                 "write": s.uid, "prefill": cells})
    return q, done


def _every_iteration(f, tree, lp, s) -> bool:
    sb = next(b for b in f.blocks if s in b.instrs)
    return all(tree.dominates(sb.label, l) for l in lp.latches)
