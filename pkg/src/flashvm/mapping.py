"""Volatile/non-volatile target assignment: final writes, first reads, read consolidation."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .air import (ConditionalRegion, LoopRegion, Program, may_alias, same_cell)
from .flow import EMPTY, FlowGraph, covered, must_written, reset_tag, solve_forward

V, N = "volatile", "nonvolatile"


# ---------------------------------------------------------------- energy model

DEFAULT_CYCLES = {"const": 1, "mov": 1, "add": 1, "sub": 1, "mul": 2, "and": 1, "or": 1, "xor": 1,
                  "shl": 1, "shr": 1, "cmp": 1, "load": 1, "store": 1, "jmp": 1, "br": 1,
                  "call": 2, "ret": 2, "checkpoint": 2, "out": 1, "halt": 1}


@dataclass(frozen=True)
class EnergyModel:
    E_read: float
    E_write: float
    E_nv_read_cc: float
    E_nv_write_cc: float
    CC_read: int
    CC_write: int
    E_cpu: float
    cycles: dict = field(default_factory=lambda: dict(DEFAULT_CYCLES))
    probe_cycles: int = 0
    probe_nJ: float = 0.0
    name: str = "custom"
    note: str = ""

    def __post_init__(self):
        for k in ("E_read", "E_write", "E_nv_read_cc", "E_nv_write_cc", "E_cpu", "probe_nJ"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.CC_read < 0 or self.CC_write < 0 or self.probe_cycles < 0:
            raise ValueError("cycle counts must be non-negative")
        missing = set(DEFAULT_CYCLES) - set(self.cycles)
        if missing:
            object.__setattr__(self, "cycles", {**DEFAULT_CYCLES, **self.cycles})

    @property
    def nv_read(self) -> tuple[int, float]:
        c = 1 + self.CC_read
        return c, self.E_nv_read_cc * c

    @property
    def nv_write(self) -> tuple[int, float]:
        c = 1 + self.CC_write
        return c, self.E_nv_write_cc * c

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> EnergyModel:
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown energy model fields: {sorted(extra)}")
        return cls(**doc)


PRESETS = ("msp430fr5969-16mhz", "msp430fr5969-8mhz")


def load_model(name_or_path: str) -> EnergyModel:
    """Load a shipped preset by name or an EnergyModel JSON file by path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        stem = name_or_path.removesuffix(".json")
        if stem not in PRESETS:
            raise ValueError(f"unknown energy model preset {name_or_path!r}; known: {', '.join(PRESETS)}")
        text = resources.files("flashvm").joinpath(f"presets/{stem}.json").read_text()
    return EnergyModel.from_json(json.loads(text))


class ConsolidationNeverBeneficial(ValueError):
    pass


def compute_n_min(m: EnergyModel, n_w: int = 1, strict: bool = False) -> float:
    """Reads needed before a volatile copy pays off; inf when copies never pay off."""
    denom = m.E_nv_read_cc * (1 + m.CC_read) - m.E_read
    if denom <= 1e-12:
        if strict:
            raise ConsolidationNeverBeneficial("volatile reads are not cheaper than non-volatile reads")
        return math.inf
    return math.floor(m.E_write * n_w / denom + 1e-9)


# ---------------------------------------------------------------- report

@dataclass
class MappingReport:
    decisions: dict = field(default_factory=dict)
    n_values: list = field(default_factory=list)
    copies: list = field(default_factory=list)
    normalization: list = field(default_factory=list)
    versioning: dict = field(default_factory=dict)

    def decide(self, ins, reason: str, where: str = ""):
        self.decisions[ins.uid] = {"op": ins.op, "target": ins.target, "reason": reason,
                                   "tag": str(ins.tag) if ins.tag else None, "prov": ins.prov,
                                   "where": where}

    def to_json(self) -> dict:
        return {"decisions": {str(k): v for k, v in sorted(self.decisions.items())},
                "n_values": self.n_values, "copies": self.copies,
                "normalization": self.normalization, "versioning": self.versioning}


# ---------------------------------------------------------------- coherence analysis

@dataclass(frozen=True)
class Coh:
    valid: frozenset = EMPTY      # tags whose volatile copy holds the current value
    pend: frozenset = EMPTY       # (tag, writer uid): non-volatile copy stale
    unk: frozenset = EMPTY        # (base, writer uid): stale at a cell no longer nameable
    cache: frozenset = EMPTY      # (tag, reg): register holds the cell's current value


INIT = Coh()


def _merge(a: Coh, b: Coh) -> Coh:
    return Coh(a.valid & b.valid, a.pend | b.pend, a.unk | b.unk, a.cache & b.cache)


def _reset(s: Coh, rs) -> Coh:
    moved = {(t.base, w) for t, w in s.pend if reset_tag(t, rs)}
    if not moved and not any(reset_tag(t, rs) for t in s.valid) and not any(reset_tag(t, rs) for t, _ in s.cache):
        return s
    return Coh(frozenset(t for t in s.valid if not reset_tag(t, rs)),
               frozenset(x for x in s.pend if not reset_tag(x[0], rs)),
               s.unk | moved,
               frozenset(x for x in s.cache if not reset_tag(x[0], rs)))


def is_volatile_target(t: str) -> bool:
    return t == V


def pinned_locals(p: Program, g: FlowGraph | None = None) -> set[str]:
    """Frame objects of functions that never reach a checkpoint (directly or via callees)."""
    from .air import callee_closure
    clo = callee_closure(p)
    has_save = {f.name: any(i.op == "checkpoint" for i in f.instrs()) for f in p.functions}
    out = set()
    for f in p.functions:
        if not any(has_save[c] for c in clo[f.name]):
            out |= {f"{f.name}.{l.name}" for l in f.frame}
    return out


def coherence(g: FlowGraph, target: dict, copies=frozenset(), skip=frozenset()):
    """Forward coherence states; target maps uid -> V or N for each analysed access."""
    nodes = g.nodes

    def transfer(u, s: Coh) -> Coh:
        i = nodes[u].ins
        if i is None:
            return s
        op = i.op
        if op == "checkpoint":
            return INIT
        if op == "load":
            rd = i.args[0].n
            cache = frozenset(x for x in s.cache if x[1] != rd)
            if i.uid in skip:
                return Coh(s.valid, s.pend, s.unk, cache)
            t = i.tag
            valid = s.valid
            if t.kind != "opaque":
                cache = cache | {(t, rd)}
                if i.uid in copies:
                    valid = valid | {t}
            return Coh(valid, s.pend, s.unk, cache)
        if op == "store":
            if i.uid in skip:
                return s
            t = i.tag
            r = i.args[1].n
            opaque = t.kind == "opaque"
            is_copy = not opaque and (t, r) in s.cache
            valid, pend, cache = s.valid, s.pend, s.cache
            if not is_copy:
                cache = frozenset(x for x in cache if not may_alias(x[0], t))
                if not opaque:
                    cache = cache | {(t, r)}
            if target[i.uid] == V:
                if not opaque:
                    valid = valid | {t}
                if not is_copy:
                    pend = pend | {(t, i.uid)}
            else:
                if not is_copy:
                    valid = frozenset(v for v in valid if not may_alias(v, t))
                if not opaque:
                    pend = frozenset(x for x in pend if not same_cell(x[0], t))
                if i.uid in copies and not opaque:
                    valid = valid | {t}
            return Coh(valid, pend, s.unk, cache)
        d = i.defs()
        if d:
            return Coh(s.valid, s.pend, s.unk, frozenset(x for x in s.cache if x[1] not in d))
        return s

    return solve_forward(g, INIT, transfer, _merge, _reset)


def nv_ok(s: Coh, t) -> bool:
    if any(u == t.base for u, _ in s.unk):
        return False
    return not any(may_alias(p, t) for p, _ in s.pend)


def blockers(s: Coh, t) -> set[int]:
    out = {w for u, w in s.unk if u == t.base}
    out |= {w for p, w in s.pend if may_alias(p, t)}
    return out


def check(g: FlowGraph, target: dict, copies=frozenset(), skip=frozenset()) -> list[str]:
    """Coherence violations of a complete assignment (empty list when sound)."""
    ins, _ = coherence(g, target, copies, skip)
    problems = []
    for n in g.nodes:
        s = ins[n.id]
        if s is None:
            continue
        i = n.ins
        if i is not None and i.op == "load" and i.uid not in skip:
            if target[i.uid] == V:
                if i.tag not in s.valid:
                    problems.append(f"volatile read {i.uid} of {i.tag} may see a stale copy")
            elif not nv_ok(s, i.tag):
                problems.append(f"non-volatile read {i.uid} of {i.tag} may miss a volatile write")
        if g.is_exit(n.id) and (s.pend or s.unk):
            ws = sorted({w for _, w in s.pend} | {w for _, w in s.unk})
            problems.append(f"interval exit at node {n.id} with unpersisted writes {ws}")
    return problems


# ---------------------------------------------------------------- write and read mapping

COPY_PROVS = ("consolidation-copy", "versioning-copy")


def _where(g: FlowGraph, uid: int) -> str:
    n = g.nodes[g.by_uid[uid][0]]
    return f"{n.fn}:{n.label}"


def _analysed(p: Program, g: FlowGraph):
    pins = pinned_locals(p)
    skip = set()
    for f in p.functions:
        for i in f.instrs():
            if i.is_mem and i.tag.base in pins:
                skip.add(i.uid)
    return skip


def map_writes(p: Program, intervals=None, report: MappingReport | None = None) -> Program:
    """Intermediate writes volatile, writes that may be last in their interval non-volatile."""
    q = p.copy()
    g = FlowGraph(q)
    q = g.p
    skip = _analysed(q, g)
    cov = covered(g, skip=lambda i: i.uid in skip or i.prov in COPY_PROVS)
    for f in q.functions:
        for i in f.instrs():
            if i.op == "checkpoint":
                i.attrs["save"] = "regs"
                i.attrs["exec"] = "always"
            if i.op != "store":
                continue
            if i.prov in COPY_PROVS:
                i.target = V
                continue
            if i.uid in skip:
                i.target = V
                reason = "intermediate"
            else:
                ns = g.by_uid.get(i.uid, [])
                ok = bool(ns) and i.tag.kind != "opaque" and all(
                    cov[u] is not None and i.tag in cov[u] for u in ns)
                i.target = V if ok else N
                reason = "intermediate" if ok else "final-write"
            if report is not None:
                report.decide(i, reason, _where(g, i.uid) if i.uid in g.by_uid else f.name)
    return q


def _targets(p: Program, skip) -> dict:
    return {i.uid: (V if i.target == V else N) for i in p.mem_instrs() if i.uid not in skip}


def map_reads(p: Program, intervals=None, report: MappingReport | None = None) -> Program:
    """Reads volatile when the volatile copy is current on every path, else non-volatile.

    Reads that are safe in neither memory promote the pending volatile writes they
    depend on to non-volatile until the assignment is coherent.
    """
    q = p.copy()
    g = FlowGraph(q)
    q = g.p
    skip = _analysed(q, g)
    by_uid = {i.uid: i for i in q.mem_instrs()}
    target = _targets(q, skip)
    for uid in target:
        if by_uid[uid].op == "load":
            target[uid] = N
    promoted = set()
    while True:
        ins, _ = coherence(g, target, skip=skip)
        conflicts = False
        for uid, ins_ in by_uid.items():
            if ins_.op != "load" or uid in skip or uid not in g.by_uid:
                continue
            states = [ins[u] for u in g.by_uid[uid] if ins[u] is not None]
            if states and all(ins_.tag in s.valid for s in states):
                target[uid] = V
            elif all(nv_ok(s, ins_.tag) for s in states):
                target[uid] = N
            else:
                target[uid] = N
                for s in states:
                    for w in blockers(s, ins_.tag):
                        if target.get(w) == V:
                            target[w] = N
                            promoted.add(w)
                            conflicts = True
        if not conflicts:
            break
    written, _ = must_written(g, skip=lambda i: i.uid in skip)
    for uid, i in by_uid.items():
        if uid in skip:
            if i.op == "load":
                i.target = V
                if report is not None:
                    report.decide(i, "intermediate", _where(g, uid) if uid in g.by_uid else "")
            continue
        i.target = target[uid]
        if report is None:
            continue
        where = _where(g, uid) if uid in g.by_uid else ""
        if i.op == "store":
            if uid in promoted:
                report.decide(i, "conservative", where)
        elif i.target == V:
            report.decide(i, "intermediate", where)
        else:
            ns = g.by_uid.get(uid, [])
            after_write = ns and all(written[u] is not None and i.tag in written[u] for u in ns)
            report.decide(i, "final-write" if after_write else "first-read", where)
    return q


# ---------------------------------------------------------------- consolidation

def _scope_ends(g: FlowGraph, anchor_node: int):
    """Nodes where the anchor's branch scope ends, plus the innermost region."""
    n = g.nodes[anchor_node]
    tree = g.trees[n.fn]
    region = tree.innermost.get(n.label)
    while isinstance(region, ConditionalRegion) and n.label == region.cond:
        region = region.parent
    ends = set()
    ctx = n.ctx
    for v in g.nodes:
        if v.ctx != ctx or v.fn != n.fn:
            continue
        if v.ins is not None and v.ins.op == "ret":
            ends.add(v.id)
        if v.idx != -1:
            continue
        if isinstance(region, ConditionalRegion) and v.label == region.join:
            ends.add(v.id)
        if isinstance(region, LoopRegion) and (v.label == region.header or v.label not in region.body):
            ends.add(v.id)
    return region, ends


def _min_reads(g: FlowGraph, start: int, ends: set, counted: set) -> int:
    """0-1 shortest path from start to a scope end or exit, weighting counted read nodes."""
    INF = math.inf
    dist = {start: 0}
    dq = deque([start])
    best = INF
    while dq:
        u = dq.popleft()
        d = dist[u]
        if d >= best:
            continue
        if u != start and (u in ends or g.is_exit(u)):
            best = min(best, d + (1 if u in counted else 0))
            continue
        if g.is_exit(u) and u != start:
            continue
        succs = g.succ[u]
        if not succs:
            best = min(best, d)
            continue
        for v, _ in succs:
            w = 1 if v in counted else 0
            nd = d + w
            if v in ends or g.is_exit(v):
                best = min(best, nd)
                if v in ends:
                    continue
            if nd < dist.get(v, INF):
                dist[v] = nd
                if w:
                    dq.append(v)
                else:
                    dq.appendleft(v)
    return 0 if best == INF else best


def _reachable_within(g: FlowGraph, start: int, ends: set) -> set[int]:
    seen, stack = {start}, [start]
    while stack:
        u = stack.pop()
        if u != start and (u in ends or g.is_exit(u)):
            continue
        for v, _ in g.succ[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def consolidate_reads(p: Program, intervals=None, m: EnergyModel | None = None,
                      report: MappingReport | None = None) -> Program:
    """Insert volatile copies after non-volatile accesses when enough later reads benefit."""
    if m is None:
        raise ValueError("consolidate_reads needs an energy model")
    q = p.copy()
    g = FlowGraph(q)
    q = g.p
    skip = _analysed(q, g)
    by_uid = {i.uid: i for i in q.mem_instrs()}
    target = _targets(q, skip)
    reasons: dict[int, str] = {}
    copies: set[int] = set()
    if compute_n_min(m, 1) == math.inf:
        return q
    order = sorted((uid for uid in target if uid in g.by_uid),
                   key=lambda uid: min(g.rank[u] for u in g.by_uid[uid]))
    for a in order:
        ai = by_uid[a]
        if target[a] != N or ai.tag.kind == "opaque" or a in copies:
            continue
        if ai.prov in COPY_PROVS:
            continue
        if ai.op == "load" and ai.addr.index == ai.args[0]:
            continue
        t = ai.tag
        base_in, _ = coherence(g, target, copies, skip)
        # candidate later conditional non-volatile writes of the same cell, in order
        anchor_nodes = g.by_uid[a]
        region, _ = _scope_ends(g, anchor_nodes[0])
        scopes = [(_scope_ends(g, u)[1], u) for u in anchor_nodes]
        inside = set()
        for ends, u in scopes:
            inside |= _reachable_within(g, u, ends)
        later = sorted({g.nodes[u].ins.uid for u in inside
                        if g.nodes[u].ins is not None and g.nodes[u].ins.op == "store"
                        and g.nodes[u].ins.uid != a and g.nodes[u].ins.uid in target
                        and target[g.nodes[u].ins.uid] == N and same_cell(g.nodes[u].ins.tag, t)},
                       key=lambda uid: min(g.rank[x] for x in g.by_uid[uid]))
        cands = []
        for w in later:
            wn = g.nodes[g.by_uid[w][0]]
            wreg = g.trees[wn.fn].innermost.get(wn.label)
            if wreg is region or wn.fn != g.nodes[anchor_nodes[0]].fn:
                break
            cands.append(w)
        for k in range(len(cands) + 1):
            trial_target = dict(target)
            trial_copies = set(copies) | {a}
            n_w = 1
            for w in cands[:k]:
                if reasons.get(w) == "conservative" or (report and report.decisions.get(w, {}).get("reason") == "conservative"):
                    trial_target[w] = V
                else:
                    trial_copies.add(w)
                    n_w += 1
            ins, _ = coherence(g, trial_target, trial_copies, skip)
            gained = []
            for uid, i in by_uid.items():
                if i.op != "load" or uid in skip or trial_target.get(uid) != N or not same_cell(i.tag, t):
                    continue
                states = [ins[u] for u in g.by_uid.get(uid, []) if ins[u] is not None]
                if states and all(t in s.valid for s in states):
                    gained.append(uid)
            if not gained:
                continue
            counted = {u for uid in gained for u in g.by_uid[uid]}
            n = min(_min_reads(g, u, ends, counted) for ends, u in scopes)
            n_min = compute_n_min(m, n_w)
            entry = {"tag": str(t), "anchor": a, "n": n, "n_w": n_w, "n_min": n_min, "committed": False}
            if n <= n_min:
                if report is not None:
                    report.n_values.append(entry)
                continue
            for uid in gained:
                trial_target[uid] = V
            if check(g, trial_target, trial_copies, skip):
                if report is not None:
                    report.n_values.append(entry)
                continue
            entry["committed"] = True
            if report is not None:
                report.n_values.append(entry)
            for uid in gained:
                reasons[uid] = "consolidated"
            for w in cands[:k]:
                if trial_target[w] == V:
                    reasons[w] = "consolidated"
            target, copies = trial_target, trial_copies
            break
    # materialize copies right after their anchors
    for f in q.functions:
        for b in f.blocks:
            out = []
            for i in b.instrs:
                out.append(i)
                if i.uid in copies:
                    reg = i.args[0] if i.op == "load" else i.args[1]
                    c = q.new("store", (i.addr, reg), prov="consolidation-copy", target=V)
                    c.tag = i.tag
                    out.append(c)
                    if report is not None:
                        report.copies.append({"after": i.uid, "copy": c.uid, "tag": str(i.tag)})
                        report.decide(c, "consolidated", f"{f.name}:{b.label}")
            b.instrs = out
    for uid, i in by_uid.items():
        if uid in target:
            i.target = target[uid]
        if report is not None and uid in reasons:
            report.decide(i, reasons[uid], report.decisions.get(uid, {}).get("where", ""))
    return q


def verify_mapping(p: Program) -> list[str]:
    """Coherence problems of a fully mapped program (versioned accesses count as non-volatile)."""
    g = FlowGraph(p)
    skip = _analysed(g.p, g) | {i.uid for i in g.p.mem_instrs() if "loopcopy" in i.attrs}
    target = {i.uid: (V if i.target == V else N) for i in g.p.mem_instrs() if i.uid not in skip}
    return check(g, target, skip=skip)
