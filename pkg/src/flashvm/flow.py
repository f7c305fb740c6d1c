"""Context-expanded instruction graph and the dataflow solvers shared by the passes.

Callees are expanded per call string, so facts stay precise across calls while the
passes still decide per static instruction (aggregated over contexts).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .air import (NUM_REGS, Instr, LoopRegion, MemoryTag, Program, build_cfg, build_region_tree,
                  check_no_recursion, compute_memory_tags, induction_variables, may_alias, read_registers,
                  written_registers)

EMPTY = frozenset()


@dataclass
class Node:
    id: int
    ctx: tuple
    fn: str
    label: str
    idx: int            # -1 for a block head
    ins: Instr | None

    @property
    def boundary(self) -> bool:
        return self.ins is not None and self.ins.op == "checkpoint"


class FlowGraph:
    def __init__(self, p: Program):
        check_no_recursion(p)
        self.p = compute_memory_tags(p)
        self.trees = {f.name: build_region_tree(build_cfg(f)) for f in self.p.functions}
        self.nodes: list[Node] = []
        self.succ: list[list[tuple[int, frozenset]]] = []
        self.pred: list[list[tuple[int, frozenset]]] = []
        self.exits: set[int] = set()
        self.by_uid: dict[int, list[int]] = {}
        self.loop_keys = {f: frozenset((f, l.header) for l in t.loops) for f, t in self.trees.items()}
        wregs = written_registers(self.p)
        self.steps = {}     # (function, header, register) -> induction step
        for f in self.p.functions:
            for key, ivs in induction_variables(f, self.trees[f.name], wregs).items():
                for r, st in ivs.items():
                    self.steps[key + (r,)] = st
        self.entry = self._expand(self.p.entry, ())[0]
        self._rpo()

    # construction
    def _add(self, ctx, fn, label, idx, ins) -> int:
        n = Node(len(self.nodes), ctx, fn, label, idx, ins)
        self.nodes.append(n)
        self.succ.append([])
        self.pred.append([])
        if ins is not None:
            self.by_uid.setdefault(ins.uid, []).append(n.id)
        return n.id

    def _edge(self, u, v, resets=EMPTY):
        self.succ[u].append((v, resets))
        self.pred[v].append((u, resets))

    def _expand(self, fname: str, ctx: tuple):
        f = self.p.func(fname)
        tree = self.trees[fname]
        cfg = tree.cfg
        reach = cfg.reachable()
        heads, rets = {}, []
        body_nodes = {}
        for b in f.blocks:
            if b.label not in reach:
                continue
            heads[b.label] = self._add(ctx, fname, b.label, -1, None)
            body_nodes[b.label] = [self._add(ctx, fname, b.label, k, i) for k, i in enumerate(b.instrs)]

        def block_edge_resets(u, v):
            rs = set()
            for lp in tree.loops:
                if u in lp.body and (v not in lp.body or v == lp.header):
                    rs.add((fname, lp.header))
                    if v == lp.header:
                        rs.add(("back", fname, lp.header))
            return frozenset(rs)

        for b in f.blocks:
            if b.label not in reach:
                continue
            chain = [heads[b.label]] + body_nodes[b.label]
            k = 0
            while k < len(chain) - 1:
                u = chain[k]
                ins = self.nodes[u].ins
                if ins is not None and ins.op == "call":
                    callee = ins.args[0]
                    ch, crets = self._expand(callee, ctx + (ins.uid,))
                    lk = self.loop_keys[callee]
                    self._edge(u, ch, lk)
                    for r in crets:
                        self._edge(r, chain[k + 1], lk)
                else:
                    self._edge(u, chain[k + 1])
                k += 1
            last = chain[-1]
            ins = self.nodes[last].ins
            if ins is not None and ins.op == "call":
                callee = ins.args[0]
                ch, crets = self._expand(callee, ctx + (ins.uid,))
                lk = self.loop_keys[callee]
                self._edge(last, ch, lk)
                tails, after = crets, lk
            else:
                tails, after = [last], EMPTY
            if ins is not None and ins.op in ("halt",):
                self.exits.add(last)
                continue
            if ins is not None and ins.op == "ret":
                if ctx == ():
                    self.exits.add(last)
                else:
                    rets.append(last)
                continue
            for v in cfg.succ[b.label]:
                rs = block_edge_resets(b.label, v) | after
                for t in tails:
                    self._edge(t, heads[v], rs)
        return heads[cfg.entry], rets

    def _rpo(self):
        seen = [False] * len(self.nodes)
        order = []
        stack = [(self.entry, iter(self.succ[self.entry]))]
        seen[self.entry] = True
        while stack:
            u, it = stack[-1]
            for v, _ in it:
                if not seen[v]:
                    seen[v] = True
                    stack.append((v, iter(self.succ[v])))
                    break
            else:
                stack.pop()
                order.append(u)
        order.reverse()
        self.rpo = order
        self.rank = [len(order)] * len(self.nodes)
        for k, u in enumerate(order):
            self.rank[u] = k

    # queries
    def mem_nodes(self):
        return [n for n in self.nodes if n.ins is not None and n.ins.is_mem]

    def is_exit(self, u: int) -> bool:
        return u in self.exits or self.nodes[u].boundary

    def loop_of_node(self, u: int) -> LoopRegion | None:
        n = self.nodes[u]
        return self.trees[n.fn].loop_of(n.label)


def reset_tag(t: MemoryTag, resets) -> bool:
    return t.kind == "affine" and t.loop[:2] in resets


def solve_forward(g: FlowGraph, init, transfer, merge, reset):
    """Returns (ins, outs) per node; unreached nodes have None."""
    n = len(g.nodes)
    ins: list = [None] * n
    outs: list = [None] * n
    heap = [(g.rank[g.entry], g.entry)]
    queued = {g.entry}
    while heap:
        _, u = heapq.heappop(heap)
        queued.discard(u)
        if u == g.entry:
            s = init
        else:
            vals = [reset(outs[p], rs) if rs else outs[p] for p, rs in g.pred[u] if outs[p] is not None]
            if not vals:
                continue
            s = vals[0]
            for v in vals[1:]:
                s = merge(s, v)
        ins[u] = s
        o = transfer(u, s)
        if o != outs[u]:
            outs[u] = o
            for v, _ in g.succ[u]:
                if v not in queued:
                    queued.add(v)
                    heapq.heappush(heap, (g.rank[v], v))
    return ins, outs


def solve_backward(g: FlowGraph, exit_state, transfer, merge, reset):
    """Returns (ins, outs) per node; out of an exit node is exit_state."""
    n = len(g.nodes)
    ins: list = [None] * n
    outs: list = [None] * n
    start = [u for u in range(n) if not g.succ[u]]
    heap = [(-g.rank[u], u) for u in start]
    heapq.heapify(heap)
    queued = set(start)
    while heap:
        _, u = heapq.heappop(heap)
        queued.discard(u)
        if not g.succ[u]:
            s = exit_state
        else:
            vals = [reset(ins[v], rs) if rs else ins[v] for v, rs in g.succ[u] if ins[v] is not None]
            if not vals:
                continue
            s = vals[0]
            for v in vals[1:]:
                s = merge(s, v)
        outs[u] = s
        i = transfer(u, s)
        if i != ins[u]:
            ins[u] = i
            for p, _ in g.pred[u]:
                if p not in queued:
                    queued.add(p)
                    heapq.heappush(heap, (-g.rank[p], p))
    return ins, outs


# ---------------------------------------------------------------- common analyses

def _drop_variant(s: frozenset, resets) -> frozenset:
    return frozenset(t for t in s if not reset_tag(t, resets))


def covered(g: FlowGraph, skip=lambda ins: False):
    """Backward must analysis: tags rewritten on every path to the interval exit.

    Returns per-node sets holding just after the node (cover of its own write excluded).
    """
    def transfer(u, s):
        n = g.nodes[u]
        if n.boundary:
            return EMPTY
        i = n.ins
        if i is not None and i.op == "store" and not skip(i) and i.tag.kind != "opaque":
            return s | {i.tag}
        return s

    ins, outs = solve_backward(g, EMPTY, transfer, frozenset.intersection, _drop_variant)
    return outs


def must_written(g: FlowGraph, skip=lambda ins: False):
    """Forward must analysis: tags written on every path since the interval entry."""
    def transfer(u, s):
        n = g.nodes[u]
        if n.boundary:
            return EMPTY
        i = n.ins
        if i is not None and i.op == "store" and not skip(i) and i.tag.kind != "opaque":
            return s | {i.tag}
        return s

    return solve_forward(g, EMPTY, transfer, frozenset.intersection, _drop_variant)


def register_cache(g: FlowGraph, skip=lambda ins: False):
    """Forward must analysis of (tag, reg) pairs whose register holds the cell's current value."""
    def transfer(u, s):
        n = g.nodes[u]
        i = n.ins
        if i is None:
            return s
        if i.op == "checkpoint":
            return s
        if i.is_mem and not skip(i):
            t = i.tag
            if i.op == "load":
                r = i.args[0].n
                s = frozenset(x for x in s if x[1] != r)
                return s | {(t, r)} if t.kind != "opaque" else s
            r = i.args[1].n
            if (t, r) in s:
                return s
            s = frozenset(x for x in s if not _alias(x[0], t))
            return s | {(t, r)} if t.kind != "opaque" else s
        d = i.defs()
        if d:
            return frozenset(x for x in s if x[1] not in d)
        return s

    def reset(s, rs):
        return frozenset(x for x in s if not reset_tag(x[0], rs))

    return solve_forward(g, EMPTY, transfer, frozenset.intersection, reset)


def _alias(a, b):
    return may_alias(a, b)


# ---------------------------------------------------------------- liveness

def liveness(p: Program) -> tuple[dict[int, frozenset], dict[int, frozenset], dict[tuple, frozenset]]:
    """Per-instruction live-in/live-out register sets (by uid) and block live-in (fn, label).

    Registers live after a return are those live after any call site of the function.
    """
    reads = read_registers(p)
    at_ret = {f.name: frozenset() for f in p.functions}
    cfgs = {f.name: build_cfg(f) for f in p.functions}
    while True:
        live_in, live_out, block_in = {}, {}, {}
        for f in p.functions:
            _live_function(f, cfgs[f.name], reads, at_ret[f.name], live_in, live_out, block_in)
        new = {f.name: frozenset() for f in p.functions}
        for f in p.functions:
            for i in f.instrs():
                if i.op == "call":
                    new[i.args[0]] = new[i.args[0]] | live_out[i.uid]
        if new == at_ret:
            return live_in, live_out, block_in
        at_ret = new


def _live_function(f, cfg, reads, ret_live, live_in, live_out, block_in):
    bin_ = {b.label: frozenset() for b in f.blocks}
    changed = True
    while changed:
        changed = False
        for b in reversed(f.blocks):
            s = frozenset().union(*(bin_[v] for v in cfg.succ[b.label])) if cfg.succ[b.label] else frozenset()
            for i in reversed(b.instrs):
                if i.op == "ret":
                    s = ret_live
                elif i.op == "halt":
                    s = frozenset()
                live_out[i.uid] = s
                if i.op == "call":
                    s = s | reads[i.args[0]]
                else:
                    s = (s - set(i.defs())) | set(i.uses())
                live_in[i.uid] = s
            if s != bin_[b.label]:
                bin_[b.label] = s
                changed = True
    for lab, s in bin_.items():
        block_in[(f.name, lab)] = s


def dead_register(live: frozenset, avoid=()) -> int | None:
    for r in range(NUM_REGS - 1, 0, -1):
        if r not in live and r not in avoid:
            return r
    return None
