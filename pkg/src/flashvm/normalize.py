"""Passes that pin where a location's last write and first read happen.

Each pass inserts semantics-preserving load/store pairs (provenance dummy-write) so
the mapping analyses see path-independent last writes and first reads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .air import (Addr, Block, block_successors, ConditionalRegion, Function, Instr, LoopRegion, MemoryTag, Program,
                  Reg, check_no_recursion, callee_closure)
from .flow import FlowGraph, covered, dead_register, liveness, must_written, register_cache

KINDS = ("loop-last-write", "loop-first-read", "cond-first-write", "cond-last-write", "call-outside-frame")
REMEDIES = ("dummy-write-after", "dummy-write-before", "conservative", "non-conservative")


@dataclass
class UncertaintyFinding:
    kind: str
    instrs: list[int]
    region: str
    remedy: str
    tag: str = ""
    inserted: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- CFG editing helpers

def _fresh_label(f: Function, stem: str) -> str:
    labels = {b.label for b in f.blocks}
    k = 0
    while f"{stem}{k}" in labels:
        k += 1
    return f"{stem}{k}"


def _retarget(term: Instr, old: str, new: str) -> Instr:
    if term.op == "jmp":
        args = (new,)
    else:
        args = (term.args[0], new if term.args[1] == old else term.args[1],
                new if term.args[2] == old else term.args[2])
    i = Instr(term.op, args, term.prov, term.target, term.attrs, term.uid)
    return i


def split_edge(p: Program, f: Function, u: str, v: str) -> str:
    """New block on edge u -> v; returns its label."""
    lab = _fresh_label(f, f"{v}.e")
    ub = f.block(u)
    nb = Block(lab, [p.new("jmp", (v,))])
    term = ub.terminator
    if term is None:
        ub.instrs.append(p.new("jmp", (lab,)))
    else:
        ub.instrs[-1] = _retarget(term, v, lab)
    k = f.blocks.index(ub)
    f.blocks.insert(k + 1, nb)
    return lab


def ensure_preheader(p: Program, f: Function, lp: LoopRegion, preds: list[str]) -> str:
    """Label of a block whose single successor is the loop header and that all outside edges pass."""
    if lp.preheader is not None:
        return lp.preheader
    lab = _fresh_label(f, f"{lp.header}.pre")
    nb = Block(lab, [p.new("jmp", (lp.header,))])
    for u in preds:
        ub = f.block(u)
        term = ub.terminator
        if term is None:
            ub.instrs.append(p.new("jmp", (lab,)))
        else:
            ub.instrs[-1] = _retarget(term, lp.header, lab)
    k = f.blocks.index(f.block(lp.header))
    f.blocks.insert(k, nb)
    return lab


def insert_before_terminator(b: Block, instrs: list[Instr]):
    k = len(b.instrs) - (1 if b.terminator is not None else 0)
    b.instrs[k:k] = instrs


def addr_for(p: Program, fname: str, t: MemoryTag) -> Addr | None:
    """Address expression naming a constant-index tag from inside function fname."""
    if t.kind != "const":
        return None
    base = t.base
    if "." in base:
        owner, slot = base.split(".", 1)
        if owner != fname:
            return None
        base = slot
    size = p.objects()[t.base]
    return Addr(base) if size == 1 else Addr(base, t.c0)


def dummy_pair(p: Program, addr: Addr, reg: int, cached: bool, before_load=True) -> list[Instr]:
    st = p.new("store", (addr, Reg(reg)), prov="dummy-write")
    if cached:
        return [st]
    ld = p.new("load", (Reg(reg), addr), prov="dummy-write")
    return [ld, st]


def _cached_reg(states, t) -> int | None:
    regs = None
    for s in states:
        if s is None:
            return None
        rs = {r for tt, r in s if tt == t}
        regs = rs if regs is None else regs & rs
    return min(regs) if regs else None


def _has_save(p: Program, f: Function, labels) -> bool:
    clo = callee_closure(p)
    for lab in labels:
        for i in f.block(lab).instrs:
            if i.op == "checkpoint":
                return True
            if i.op == "call" and any(ins.op == "checkpoint" for c in clo[i.args[0]]
                                      for ins in p.func(c).instrs()):
                return True
    return False


def _pins(p: Program) -> set[str]:
    from .mapping import pinned_locals
    return pinned_locals(p)


# ---------------------------------------------------------------- loops

def normalize_loops(p: Program, intervals=None) -> tuple[Program, list[UncertaintyFinding]]:
    """Dummy write after loops for loop-controlled last writes, priming access before for first reads."""
    q = p.copy()
    findings: list[UncertaintyFinding] = []
    handled: set = set()
    while True:
        g = FlowGraph(q)
        q = g.p
        if not _loop_step(q, g, findings, handled):
            return q, findings


def _loop_step(q, g, findings, handled) -> bool:
    cov = covered(g)
    written, _ = must_written(g)
    _, cache_out = register_cache(g)
    cache_in, _ = register_cache(g)
    live_in, live_out, block_in = liveness(q)
    pins = _pins(q)
    for f in q.functions:
        tree = g.trees[f.name]
        for lp in [r for r in tree.postorder() if isinstance(r, LoopRegion)]:
            if _has_save(q, f, lp.body):
                continue
            body_instrs = [i for lab in sorted(lp.body, key=tree.cfg.labels.index) for i in f.block(lab).instrs]
            tags = []
            for i in body_instrs:
                if i.is_mem and i.tag.kind == "const" and i.tag.base not in pins and i.tag not in tags:
                    tags.append(i.tag)
            for t in tags:
                addr = addr_for(q, f.name, t)
                if addr is None:
                    continue
                stores = [i for i in body_instrs if i.op == "store" and i.tag == t]
                loads = [i for i in body_instrs if i.op == "load" and i.tag == t]
                last = [i.uid for i in stores
                        if any(cov[u] is None or t not in cov[u] for u in g.by_uid.get(i.uid, []))]
                first = [i.uid for i in loads
                         if any(written[u] is None or t not in written[u] for u in g.by_uid.get(i.uid, []))]
                key = (f.name, lp.header, t)
                if last and (key, "last") not in handled:
                    handled.add((key, "last"))
                    fd = UncertaintyFinding("loop-last-write", last, f"{f.name}:{lp.header}", "dummy-write-after", str(t))
                    findings.append(fd)
                    if _after_loop(q, g, f, lp, t, addr, cache_out, block_in, fd):
                        return True
                    fd.remedy = "conservative"
                if first and (key, "first") not in handled:
                    handled.add((key, "first"))
                    fd = UncertaintyFinding("loop-first-read", first, f"{f.name}:{lp.header}", "dummy-write-before", str(t))
                    findings.append(fd)
                    if _before_loop(q, g, f, lp, t, addr, live_in, block_in, fd):
                        return True
                    fd.remedy = "conservative"
    return False


def _after_loop(q, g, f, lp, t, addr, cache_out, block_in, fd) -> bool:
    plans = []
    for u, v in lp.exits:
        tail = f.block(u)
        tnode = tail.instrs[-1].uid if tail.instrs else None
        states = [cache_out[x] for x in g.by_uid.get(tnode, [])] if tnode is not None else [None]
        reg = _cached_reg(states, t)
        cached = reg is not None
        if not cached:
            reg = dead_register(block_in[(f.name, v)])
            if reg is None:
                return False
        plans.append((u, v, reg, cached))
    preds_of = {b.label: [] for b in f.blocks}
    for k, b in enumerate(f.blocks):
        for s in block_successors(f, k):
            preds_of[s].append(b.label)
    for u, v, reg, cached in plans:
        pair = dummy_pair(q, addr, reg, cached)
        if preds_of[v] == [u]:
            f.block(v).instrs[0:0] = pair
        else:
            lab = split_edge(q, f, u, v)
            f.block(lab).instrs[0:0] = pair
        fd.inserted += [i.uid for i in pair]
    return True


def _before_loop(q, g, f, lp, t, addr, live_in, block_in, fd) -> bool:
    outside = [x for x in g.trees[f.name].cfg.pred[lp.header] if x not in lp.body]
    if not outside:
        return False
    reg = dead_register(block_in[(f.name, lp.header)])
    if reg is None:
        return False
    pre = ensure_preheader(q, f, lp, outside)
    pair = dummy_pair(q, addr, reg, False)
    insert_before_terminator(f.block(pre), pair)
    fd.inserted += [i.uid for i in pair]
    return True


# ---------------------------------------------------------------- conditionals

def normalize_conditionals(p: Program, intervals=None, mode: str = "conservative",
                           request=None) -> tuple[Program, list[UncertaintyFinding]]:
    """Record conditional first/last-write uncertainty; with the non-conservative remedy,
    add a dummy write to the arm lacking the write.

    request: optional set of (function, condition label, tag text) that must use the
    non-conservative remedy regardless of mode.
    """
    q = p.copy()
    findings: list[UncertaintyFinding] = []
    handled: set = set()
    while True:
        g = FlowGraph(q)
        q = g.p
        if not _cond_step(q, g, findings, handled, mode, request or set()):
            return q, findings


def _cond_step(q, g, findings, handled, mode, request) -> bool:
    cov = covered(g)
    written, _ = must_written(g)
    _, cache_out = register_cache(g)
    live_in, live_out, block_in = liveness(q)
    pins = _pins(q)
    for f in q.functions:
        tree = g.trees[f.name]
        for c in [r for r in tree.postorder() if isinstance(r, ConditionalRegion)]:
            if _has_save(q, f, c.arms[0] | c.arms[1]):
                continue
            arm_stores = []
            for arm in c.arms:
                arm_stores.append([i for lab in sorted(arm, key=tree.cfg.labels.index)
                                   for i in f.block(lab).instrs if i.op == "store"])
            tags = []
            for st in arm_stores:
                for i in st:
                    if i.tag.kind == "const" and i.tag.base not in pins and i.tag not in tags:
                        tags.append(i.tag)
            cterm = f.block(c.cond).instrs[-1]
            for t in tags:
                in_arm = [[i for i in st if i.tag == t] for st in arm_stores]
                if all(in_arm):
                    continue
                ws = [i.uid for st in in_arm for i in st]
                before = [written[u] for u in g.by_uid.get(cterm.uid, [])]
                first = any(s is None or t not in s for s in before)
                last = any(cov[u] is None or t not in cov[u] for w in ws for u in g.by_uid.get(w, []))
                if not (first or last):
                    continue
                key = (f.name, c.cond, t)
                if key in handled:
                    continue
                handled.add(key)
                kind = "cond-first-write" if first else "cond-last-write"
                wanted = mode == "non-conservative" or (f.name, c.cond, str(t)) in request
                involved = ws + (_reads_around(f, c, t) if first else [])
                fd = UncertaintyFinding(kind, involved, f"{f.name}:{c.cond}", "conservative", str(t))
                findings.append(fd)
                if not wanted:
                    continue
                addr = addr_for(q, f.name, t)
                if addr is None:
                    continue
                k = 0 if not in_arm[0] else 1
                if _fill_arm(q, f, c, k, addr, t, block_in, fd):
                    fd.remedy = "non-conservative"
                    return True
    return False


def _reads_around(f: Function, c, t) -> list[int]:
    """Loads of t in the condition block, the arms and the join block up to its first save."""
    out = []
    for lab in [c.cond, *sorted(c.arms[0] | c.arms[1]), c.join]:
        for i in f.block(lab).instrs:
            if i.op == "checkpoint" and lab == c.join:
                break
            if i.op == "load" and i.tag == t:
                out.append(i.uid)
    return out


def _fill_arm(q, f, c, k, addr, t, block_in, fd) -> bool:
    arm = c.arms[k]
    if not arm:
        reg = dead_register(block_in[(f.name, c.join)])
        if reg is None:
            return False
        lab = split_edge(q, f, c.cond, c.join)
        pair = dummy_pair(q, addr, reg, False)
        f.block(lab).instrs[0:0] = pair
    else:
        # the arm's blocks that lead to the join
        tails = [lab for lab in arm if any(s == c.join for s in _succs(f, lab))]
        if not tails:
            return False
        pairs = []
        for lab in tails:
            b = f.block(lab)
            live = block_in[(f.name, c.join)]
            reg = dead_register(live)
            if reg is None:
                return False
            pairs.append((lab, reg))
        for lab, reg in pairs:
            b = f.block(lab)
            if len(_succs(f, lab)) > 1:
                nl = split_edge(q, f, lab, c.join)
                b = f.block(nl)
                pair = dummy_pair(q, addr, reg, False)
                b.instrs[0:0] = pair
            else:
                pair = dummy_pair(q, addr, reg, False)
                insert_before_terminator(b, pair)
            fd.inserted += [i.uid for i in pair]
        return True
    fd.inserted += [i.uid for i in pair]
    return True


def _succs(f: Function, lab: str) -> list[str]:
    from .air import block_successors
    return block_successors(f, f.blocks.index(f.block(lab)))


# ---------------------------------------------------------------- calls

def normalize_calls(p: Program) -> tuple[Program, list[UncertaintyFinding]]:
    """Per call site dummy writes for callee accesses that are last/first only in some contexts."""
    check_no_recursion(p)
    q = p.copy()
    findings: list[UncertaintyFinding] = []
    handled: set = set()
    while True:
        g = FlowGraph(q)
        q = g.p
        if not _call_step(q, g, findings, handled):
            break
    return q, findings


def _call_step(q, g, findings, handled) -> bool:
    cov = covered(g)
    written, _ = must_written(g)
    live_in, live_out, block_in = liveness(q)
    loc = q.locate()
    calls = {i.uid: i for i in q.instrs() if i.op == "call"}
    for i in q.mem_instrs():
        t = i.tag
        if t.kind != "const" or "." in t.base:
            continue
        ns = g.by_uid.get(i.uid, [])
        ctxs = [g.nodes[u].ctx for u in ns]
        if len(ns) < 2 or not all(ctxs):
            continue
        if i.op == "store":
            bad = [u for u in ns if cov[u] is None or t not in cov[u]]
        else:
            bad = [u for u in ns if written[u] is None or t not in written[u]]
        if not bad or len(bad) == len(ns):
            continue
        sites = sorted({g.nodes[u].ctx[-1] for u in bad})
        for s in sites:
            key = (s, t, i.op)
            if key in handled:
                continue
            handled.add(key)
            fn, lab, k = loc[s]
            f = q.func(fn)
            addr = addr_for(q, fn, t)
            kind = "call-outside-frame"
            fd = UncertaintyFinding(kind, [i.uid], f"{fn}:{lab}",
                                    "dummy-write-after" if i.op == "store" else "dummy-write-before", str(t))
            findings.append(fd)
            live = live_out[s] if i.op == "store" else live_in[s]
            reg = dead_register(live)
            if addr is None or reg is None:
                fd.remedy = "conservative"
                continue
            pair = dummy_pair(q, addr, reg, False)
            b = f.block(lab)
            pos = b.instrs.index(calls[s])
            if i.op == "store":
                b.instrs[pos + 1:pos + 1] = pair
            else:
                b.instrs[pos:pos] = pair
            fd.inserted += [x.uid for x in pair]
            return True
    return False


def normalize_all(p: Program, mode: str = "conservative", request=None):
    """calls, then loops, then conditionals."""
    q, f1 = normalize_calls(p)
    q, f2 = normalize_loops(q)
    q, f3 = normalize_conditionals(q, mode=mode, request=request)
    return q, f1 + f2 + f3
