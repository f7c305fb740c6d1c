"""Checkpoint placement strategies, interval boundary normalization, interval extraction."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .air import (ConditionalRegion, Function, IRError, LoopRegion, Program, build_cfg, build_region_tree,
                  callee_closure)
from .normalize import ensure_preheader, insert_before_terminator


class PlacementStrategy(enum.Enum):
    LoopLatch = "loop-latch"
    FunctionReturn = "function-return"
    IdempotentBoundaries = "idempotent"
    Manual = "manual"

    @classmethod
    def parse(cls, text: str) -> PlacementStrategy:
        for s in cls:
            if text in (s.value, s.name):
                return s
        aliases = {"ll": cls.LoopLatch, "fr": cls.FunctionReturn, "idem": cls.IdempotentBoundaries}
        if text in aliases:
            return aliases[text]
        raise ValueError(f"unknown placement {text!r}; expected loop-latch, function-return or idempotent")


class IntervalError(IRError):
    """A memory instruction could belong to two intervals; signals a normalization bug."""


@dataclass
class ComputationInterval:
    id: int
    function: str
    instrs: list[int]
    entry_saves: frozenset
    exit_saves: frozenset = field(default_factory=frozenset)

    @property
    def mem_count(self) -> int:
        return len(self.instrs)


def _has_checkpoints(p: Program) -> bool:
    return any(i.op == "checkpoint" for i in p.instrs())


def place_checkpoints(p: Program, s: PlacementStrategy | str) -> Program:
    """Insert checkpoints per strategy; Manual keeps the authored ones."""
    if isinstance(s, str):
        s = PlacementStrategy.parse(s)
    q = p.copy()
    if s is PlacementStrategy.Manual:
        return q
    if _has_checkpoints(q):
        raise IRError("program already contains checkpoints; use manual placement")
    if s is PlacementStrategy.LoopLatch:
        for f in q.functions:
            tree = build_region_tree(build_cfg(f))
            latches = []
            for lp in tree.loops:
                latches += [l for l in lp.latches if l not in latches]
            for lab in latches:
                insert_before_terminator(f.block(lab), [q.new("checkpoint")])
    elif s is PlacementStrategy.FunctionReturn:
        for f in q.functions:
            for b in f.blocks:
                out = []
                for i in b.instrs:
                    if i.op == "ret" or (i.op == "halt" and f.name == q.entry):
                        out.append(q.new("checkpoint"))
                    out.append(i)
                b.instrs = out
    else:
        q = _idempotent(q)
    return q


def _idempotent(q: Program) -> Program:
    from .versioning import detect_war_hazards
    while True:
        hz = detect_war_hazards(q, all_nonvolatile=True)
        if not hz:
            return q
        loc = q.locate()
        w = hz[0].write
        fn, lab, k = loc[w]
        b = q.func(fn).block(lab)
        b.instrs.insert(k, q.new("checkpoint"))


# ---------------------------------------------------------------- boundary normalization

def _save_at(b, pos) -> bool:
    return 0 <= pos < len(b.instrs) and b.instrs[pos].op == "checkpoint"


def _before_term(b) -> int:
    return len(b.instrs) - (2 if b.terminator is not None else 1)


def _region_saves(f: Function, tree, region) -> list[tuple[str, int]]:
    out = []
    for lab in f.blocks:
        if lab.label in region.blocks:
            out += [(lab.label, k) for k, i in enumerate(lab.instrs) if i.op == "checkpoint"]
    return out


def _top_level(tree, region, lab) -> bool:
    return tree.innermost.get(lab) is region


def _loop_normalized(f, tree, lp) -> bool:
    pre = lp.preheader
    if pre is None or not _save_at(f.block(pre), _before_term(f.block(pre))):
        return False
    return all(_save_at(f.block(l), _before_term(f.block(l))) for l in lp.latches)


def _normalize_loop(p: Program, f: Function, tree, lp: LoopRegion):
    cfg = tree.cfg
    if lp.preheader is None or not _save_at(f.block(lp.preheader), _before_term(f.block(lp.preheader))):
        outside = [x for x in cfg.pred[lp.header] if x not in lp.body]
        pre = ensure_preheader(p, f, lp, outside)
        insert_before_terminator(f.block(pre), [p.new("checkpoint")])
        return
    missing = [l for l in lp.latches if not _save_at(f.block(l), _before_term(f.block(l)))]
    order = [b.label for b in f.blocks]
    top = [(lab, k) for lab, k in _region_saves(f, tree, lp) if _top_level(tree, lp, lab)]
    top = [x for x in top if not (x[0] in lp.latches and x[1] == _before_term(f.block(x[0])))]
    top.sort(key=lambda x: (order.index(x[0]), x[1]))
    moved = None
    if top and missing:
        lab, k = top[-1]
        moved = f.block(lab).instrs.pop(k)
    for l in missing:
        ck = moved if moved is not None else p.new("checkpoint")
        moved = None
        insert_before_terminator(f.block(l), [ck])


def _cond_normalized(f, tree, c) -> bool:
    cb = f.block(c.cond)
    if not _save_at(cb, _before_term(cb)):
        return False
    arms_have = any(i.op == "checkpoint" for arm in c.arms for lab in arm for i in f.block(lab).instrs)
    if not arms_have:
        return True
    jb = f.block(c.join)
    return bool(jb.instrs) and jb.instrs[0].op == "checkpoint"


def _normalize_cond(p: Program, f: Function, tree, c: ConditionalRegion):
    order = [b.label for b in f.blocks]
    cb = f.block(c.cond)
    if not _save_at(cb, _before_term(cb)):
        insert_before_terminator(cb, [p.new("checkpoint")])
    for arm in c.arms:
        top = [(lab, k) for lab in arm for k, i in enumerate(f.block(lab).instrs)
               if i.op == "checkpoint" and _top_level(tree, c, lab)]
        if top:
            top.sort(key=lambda x: (order.index(x[0]), x[1]))
            lab, k = top[-1]
            f.block(lab).instrs.pop(k)
    if any(i.op == "checkpoint" for arm in c.arms for lab in arm for i in f.block(lab).instrs):
        jb = f.block(c.join)
        if not (jb.instrs and jb.instrs[0].op == "checkpoint"):
            jb.instrs.insert(0, p.new("checkpoint"))


def _region_has_save(f, region) -> bool:
    # a save in the condition block runs before the branch, so only arm saves count
    labs = region.arms[0] | region.arms[1] if isinstance(region, ConditionalRegion) else region.blocks
    return any(i.op == "checkpoint" for lab in labs for i in f.block(lab).instrs)


def normalize_interval_boundaries(p: Program) -> Program:
    """Loops with saves: save after the pre-header and at each latch end.
    Conditionals with saves: save before the branch, arm-last saves removed, save after the join if needed.
    """
    q = p.copy()
    for f in q.functions:
        for _ in range(10000):
            tree = build_region_tree(build_cfg(f))
            todo = None
            for r in tree.postorder():
                if not _region_has_save(f, r):
                    continue
                if isinstance(r, LoopRegion) and not _loop_normalized(f, tree, r):
                    todo = r
                    break
                if isinstance(r, ConditionalRegion) and not _cond_normalized(f, tree, r):
                    todo = r
                    break
            if todo is None:
                break
            if isinstance(todo, LoopRegion):
                _normalize_loop(q, f, tree, todo)
            else:
                _normalize_cond(q, f, tree, todo)
        else:
            raise IntervalError(f"boundary normalization did not converge in {f.name}")
    return q


# ---------------------------------------------------------------- interval extraction

def _boundaries(p: Program) -> set[int]:
    clo = callee_closure(p)
    saving = {f.name for f in p.functions
              if any(i.op == "checkpoint" for c in clo[f.name] for i in p.func(c).instrs())}
    out = set()
    for i in p.instrs():
        if i.op == "checkpoint" or (i.op == "call" and i.args[0] in saving):
            out.add(i.uid)
    return out


def extract_intervals(p: Program) -> list[ComputationInterval]:
    """Group each function's instructions by the set of boundaries that can start their interval."""
    bounds = _boundaries(p)
    intervals = []
    for f in p.functions:
        cfg = build_cfg(f)
        tree = build_region_tree(cfg)
        seq = []          # (label, index, instr) in program order
        for b in f.blocks:
            for k, i in enumerate(b.instrs):
                seq.append((b.label, k, i))
        # entry signature: boundaries (or function entry) reaching each instruction save-free
        sig: dict[int, frozenset] = {}
        block_in: dict[str, frozenset] = {lab: frozenset() for lab in cfg.labels}
        block_in[cfg.entry] = frozenset({"entry"})
        changed = True
        while changed:
            changed = False
            for lab in cfg.rpo():
                cur = block_in[lab]
                for i in f.block(lab).instrs:
                    sig[i.uid] = cur
                    if i.uid in bounds:
                        cur = frozenset({i.uid})
                for v in cfg.succ[lab]:
                    nv = block_in[v] | cur
                    if nv != block_in[v]:
                        block_in[v] = nv
                        changed = True
        groups: dict[frozenset, list[int]] = {}
        for lab, k, i in seq:
            if i.uid in bounds or i.uid not in sig or not sig[i.uid]:
                continue
            groups.setdefault(sig[i.uid], []).append(i.uid)
        exits = _exit_sigs(f, cfg, bounds)
        for s, uids in groups.items():
            ex = frozenset().union(*(exits.get(u, frozenset()) for u in uids))
            intervals.append(ComputationInterval(len(intervals), f.name, uids, s, ex))
        _check_loops(f, tree, sig, bounds)
    return intervals


def _exit_sigs(f, cfg, bounds) -> dict[int, frozenset]:
    """Boundaries (or function exit) reachable save-free from each instruction."""
    at_start = {lab: frozenset() for lab in cfg.labels}
    res = {}
    changed = True
    while changed:
        changed = False
        for lab in reversed(cfg.rpo()):
            cur = frozenset().union(*(at_start[v] for v in cfg.succ[lab]))
            for i in reversed(f.block(lab).instrs):
                if i.op in ("ret", "halt"):
                    cur = frozenset({"exit"})
                res[i.uid] = cur
                if i.uid in bounds:
                    cur = frozenset({i.uid})
            if cur != at_start[lab]:
                at_start[lab] = cur
                changed = True
    return res


def _check_loops(f, tree, sig, bounds):
    for lp in tree.loops:
        inside = {i.uid for lab in lp.body for i in f.block(lab).instrs}
        if not any(i.op == "checkpoint" for lab in lp.body for i in f.block(lab).instrs):
            continue
        pre = lp.preheader
        allowed = set(inside)
        if pre is not None:
            allowed |= {i.uid for i in f.block(pre).instrs if i.uid in bounds}
        for lab in lp.body:
            for i in f.block(lab).instrs:
                if i.is_mem and not set(sig.get(i.uid, ())) <= allowed:
                    raise IntervalError(f"memory instruction {i.uid} in loop {f.name}:{lp.header} "
                                        "is reachable from outside the loop without a save")
