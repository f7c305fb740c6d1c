"""Cycle and energy accounting interpreter with power-failure injection.

Execution is instruction-atomic: an instruction (or a whole save) runs only if
the remaining budget covers its cost, otherwise power fails before it.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import asdict, dataclass, field

from .air import BINOPS, WORD_MASK, Program, _concrete_binop
from .layout import REGISTER_WORDS, MemoryLayout, layout_from_annotations
from .mapping import EnergyModel
from .versioning import parse_exit_attrs

V, N = "volatile", "nonvolatile"
RO, RW = "read-only-version", "read-write-version"
POISON = 0xDEAD
DEFAULT_MAX_CYCLES = 50_000_000

# stand-in cycle budgets between failures; not measured values
PROFILES = {"min": 2000, "avg": 8000, "max": 32000}


class EmulatorError(Exception):
    pass


class MemoryFault(EmulatorError):
    pass


class CycleLimitExceeded(EmulatorError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class PowerSchedule:
    """Budget per power cycle, in cycles or nJ, drawn with seeded jitter or from an explicit list.

    With an explicit list, power cycles past its end are unlimited.
    """
    mode: str = "cycles"
    mean: float = PROFILES["avg"]
    jitter: float = 0.5
    seed: int = 0
    limit: int = 10_000
    budgets: list | None = None
    profile: str = "custom"

    def __post_init__(self):
        if self.mode not in ("cycles", "energy"):
            raise ValueError(f"schedule mode must be cycles or energy, not {self.mode!r}")
        if self.budgets is None and self.mean <= 0:
            raise ValueError("budget mean must be positive")
        if self.budgets is not None and any(b <= 0 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")

    @classmethod
    def profile_named(cls, name: str, seed: int = 0, **kw) -> PowerSchedule:
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}; known: {', '.join(PROFILES)}")
        return cls("cycles", PROFILES[name], seed=seed, profile=name, **kw)

    @classmethod
    def from_json(cls, doc: dict) -> PowerSchedule:
        doc = dict(doc)
        if "profile" in doc and "mean" not in doc and doc["profile"] in PROFILES:
            doc["mean"] = PROFILES[doc["profile"]]
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)

    def draws(self):
        rng = random.Random(self.seed)
        k = 0
        while True:
            if self.budgets is not None:
                yield self.budgets[k] if k < len(self.budgets) else math.inf
            else:
                b = self.mean * rng.uniform(1 - self.jitter, 1 + self.jitter)
                yield max(1, round(b)) if self.mode == "cycles" else b
            k += 1

    @property
    def max_budget(self) -> float:
        if self.budgets is not None:
            return math.inf
        return self.mean * (1 + self.jitter)


@dataclass(frozen=True)
class CheckpointPolicy:
    kind: str = "execute"

    def __post_init__(self):
        if self.kind not in ("execute", "probe"):
            raise ValueError(f"checkpoint policy must be execute or probe, not {self.kind!r}")


EXECUTE = CheckpointPolicy("execute")
PROBE = CheckpointPolicy("probe")

ACCESS_KINDS = ("v_read", "v_write", "nv_read", "nv_write")
CLASSES = ("original", "dummy-write", "consolidation-copy", "versioning-copy", "runtime")


@dataclass
class RunMetrics:
    energy_nJ: float = 0.0
    cycles: int = 0
    accesses: dict = field(default_factory=dict)     # "kind/class" -> count
    checkpoint_calls: int = 0
    saves: int = 0
    save_words: dict = field(default_factory=dict)   # words written per save -> count
    restores: int = 0
    failures: int = 0
    power_cycles: int = 1
    status: str = "completed"

    def count(self, kind: str, cls: str | None = None) -> int:
        return sum(v for k, v in self.accesses.items()
                   if k.split("/")[0] == kind and (cls is None or k.split("/")[1] == cls))

    def to_json(self) -> dict:
        d = asdict(self)
        d["save_words"] = {str(k): v for k, v in sorted(self.save_words.items())}
        return d


@dataclass
class MachineState:
    regs: list
    pc: int
    stack: list
    vmem: list
    nvmem: list
    pending: list = field(default_factory=list)      # outputs of the running interval
    committed: list = field(default_factory=list)
    checkpoint: tuple | None = None                  # (regs, pc, stack, volatile image)
    job: list | None = None                          # persisted copy-back job

    def snapshot(self):
        return (self.regs[:], self.pc, self.stack[:], self.vmem[:], self.nvmem[:], len(self.pending),
                len(self.committed), self.checkpoint, None if self.job is None else list(self.job))

    def rollback(self, s):
        self.regs, self.pc, self.stack, self.vmem, self.nvmem = s[0], s[1], s[2], s[3], s[4]
        del self.pending[s[5]:]
        del self.committed[s[6]:]
        self.checkpoint, self.job = s[7], s[8]


@dataclass
class RunResult:
    globals: dict
    outputs: list
    metrics: RunMetrics
    state: MachineState
    trace: list | None = None


# ---------------------------------------------------------------- compilation

_BIN = {op: (lambda o: (lambda a, b: _concrete_binop(o, a, b)))(op) for op in BINOPS}
_BIN.update({
    "add": lambda a, b: (a + b) & WORD_MASK,
    "sub": lambda a, b: (a - b) & WORD_MASK,
    "and": lambda a, b: a & b,
    "or": lambda a, b: a | b,
    "xor": lambda a, b: a ^ b,
})

(CONST, MOV, BINR, BINI, LOAD, STORE, JMP, BR, CALL, RET, CKPT, OUT, HALT) = range(13)
_OPS = {"const": CONST, "mov": MOV, "load": LOAD, "store": STORE, "jmp": JMP, "br": BR, "call": CALL,
        "ret": RET, "checkpoint": CKPT, "out": OUT, "halt": HALT}
# memory modes
M_V, M_N, M_RO, M_RW, M_DYN = range(5)


def _acct(kind: str, prov: str) -> str:
    return f"{kind}/{prov}"


class _Code:
    """Flattened program with per-instruction costs."""

    def __init__(self, p: Program, lay: MemoryLayout, m: EnergyModel):
        self.p, self.lay, self.m = p, lay, m
        self.ins = []
        self.src = []
        starts = {}
        pc = 0
        for f in p.functions:
            for b in f.blocks:
                starts[(f.name, b.label)] = pc
                pc += len(b.instrs)
        entries = {f.name: starts[(f.name, f.blocks[0].label)] for f in p.functions}
        self.entry = entries[p.entry]
        self.fn_of = []
        nvr_c, nvr_e = m.nv_read
        nvw_c, nvw_e = m.nv_write
        self.costs = {"v_read": (1, m.E_read), "v_write": (1, m.E_write),
                      "nv_read": (nvr_c, nvr_e), "nv_write": (nvw_c, nvw_e)}
        cyc = m.cycles
        for f in p.functions:
            for b in f.blocks:
                for i in b.instrs:
                    self.src.append(i)
                    self.fn_of.append(f.name)
                    self.ins.append(self._compile(f, i, starts, entries, cyc))
        ext = max((s.offset + s.span for s in lay.slots.values()), default=0)
        self.extent = ext
        self.user_extent = max((s.offset + s.span for s in lay.slots.values() if s.kind == "user"), default=0)

    def _compile(self, f, i, starts, entries, cyc):
        op = i.op
        c = cyc.get(op, 1)
        e = c * self.m.E_cpu
        a = i.args
        if op in BINOPS:
            if isinstance(a[2], int):
                return (BINI, a[0].n, a[1].n, a[2], c, e, _BIN[op])
            return (BINR, a[0].n, a[1].n, a[2].n, c, e, _BIN[op])
        code = _OPS[op]
        if code == CONST:
            return (CONST, a[0].n, a[1] & WORD_MASK, None, c, e, None)
        if code == MOV:
            return (MOV, a[0].n, a[1].n, None, c, e, None)
        if code in (LOAD, STORE):
            return self._mem(f, i, code)
        if code == JMP:
            return (JMP, starts[(f.name, a[0])], None, None, c, e, None)
        if code == BR:
            return (BR, a[0].n, starts[(f.name, a[1])], starts[(f.name, a[2])], c, e, None)
        if code == CALL:
            return (CALL, entries[a[0]], None, None, c, e, None)
        if code == OUT:
            return (OUT, a[0].n, None, None, c, e, None)
        if code == CKPT:
            return (CKPT, None, None, None, c, e, self._ckpt_info(i))
        if code == HALT:
            return (HALT, None, None, None, c, e, self._ckpt_info(i))
        if code == RET:
            info = self._ckpt_info(i) if f.name == self.p.entry else None
            return (RET, None, None, None, c, e, info)
        raise EmulatorError(f"cannot compile {op}")

    def _ckpt_info(self, i):
        acts = parse_exit_attrs(i.attrs)
        return {"always": i.attrs.get("exec") == "always", "full": i.attrs.get("save", "full") == "full",
                "actions": sorted(acts.items())}

    def _mem(self, f, i, code):
        ad = i.addr
        obj = self.p.object_of(f.name, ad.base)
        s = self.lay.slot(obj)
        idx_reg = ad.index.n if hasattr(ad.index, "n") else None
        idx_imm = ad.index if isinstance(ad.index, int) else 0
        t = i.target
        load = code == LOAD
        kind = "v_" if t == V else "nv_"
        kind += "read" if load else "write"
        cyc, nj = self.costs[kind]
        dir_off = dirty_off = None
        if t in (RO, RW) and s.versioned:
            dir_off = self.lay.slot(f"__dir.{obj}").offset
            mode = M_RO if t == RO else M_RW
            if load and "dyn" in i.attrs:
                mode = M_DYN
            if f"__dirty.{obj}" in self.lay.slots:
                dirty_off = self.lay.slot(f"__dirty.{obj}").offset
        elif t == V:
            mode = M_V
        else:
            mode = M_N
        track = not load and "track" in i.attrs and dirty_off is not None
        if mode == M_DYN and dirty_off is None:
            raise EmulatorError(f"dynamic read of {obj} without dirty bits")
        if mode == M_DYN or track:
            cyc += 1
            nj += self.m.E_read if mode == M_DYN else self.m.E_write
        reg = i.args[0].n if load else i.args[1].n
        prov = i.prov
        mem = (s.offset, s.size, idx_reg, idx_imm, mode, dir_off, dirty_off, track,
               _acct(kind, prov), obj)
        return (code, reg, mem, None, cyc, nj, None)


_CODE_CACHE: dict = {}


def compile_program(p: Program, lay: MemoryLayout, m: EnergyModel) -> _Code:
    key = (id(p), id(lay), id(m))
    hit = _CODE_CACHE.get(key)
    if hit is not None and hit[0] is p and hit[1] is lay and hit[2] is m:
        return hit[3]
    code = _Code(p, lay, m)
    if len(_CODE_CACHE) > 64:
        _CODE_CACHE.clear()
    _CODE_CACHE[key] = (p, lay, m, code)
    return code


# ---------------------------------------------------------------- interpreter

class _Engine:
    def __init__(self, p: Program, lay: MemoryLayout | None, m: EnergyModel, inputs=None, trace=None,
                 max_cycles: int = DEFAULT_MAX_CYCLES):
        if lay is None:
            lay = layout_from_annotations(p)
        self.code = compile_program(p, lay, m)
        self.p, self.lay, self.m = p, lay, m
        self.trace = trace
        self.max_cycles = max_cycles
        self.metrics = RunMetrics()
        self.acc = self.metrics.accesses
        n = self.code.extent
        vmem = [0] * n
        nvmem = [0] * n
        inputs = inputs or {}
        objs = p.objects()
        for g in p.globals:
            vals = g.values()
            if g.name in inputs:
                vals = ([int(x) & WORD_MASK for x in inputs[g.name]] + vals)[: g.size]
            s = lay.slot(g.name)
            for k, v in enumerate(vals):
                vmem[s.offset + k] = v
                for c in range(2 if s.versioned else 1):
                    nvmem[s.offset + c * s.size + k] = v
        unknown = set(inputs) - set(objs)
        if unknown:
            raise EmulatorError(f"inputs name unknown objects: {sorted(unknown)}")
        self.st = MachineState([0] * 16, self.code.entry, [], vmem, nvmem)
        # objects living only in volatile memory need the load image to survive an early failure
        full = any(x[0] == CKPT and x[6]["full"] for x in self.code.ins) or V in _homes(p).values()
        self.st.checkpoint = self._image() if full else (self.st.regs[:], self.st.pc, [], None)
        self.progress = False
        self.unit_cycles = True
        self.rem = math.inf

    # accounting helpers
    def _charge(self, kind: str, count: int = 1, cls: str = "runtime"):
        c, e = self.code.costs[kind]
        k = f"{kind}/{cls}"
        self.acc[k] = self.acc.get(k, 0) + count
        return c * count, e * count

    def _cost(self, c, e) -> float:
        return c if self.unit_cycles else e

    def _spend(self, c, e, what, pc=-1):
        self.metrics.cycles += c
        self.metrics.energy_nJ += e
        self.rem -= self._cost(c, e)
        if self.trace is not None:
            self.trace.append({"pc": pc, "op": what, "target": "", "cycles": c, "nJ": e})

    def _image(self):
        st = self.st
        return (st.regs[:], st.pc, st.stack[:], st.vmem[: self.code.user_extent])

    # main loop: runs until a checkpoint, halt, fault or budget exhaustion
    def _run(self):
        st = self.st
        code = self.code.ins
        regs, vmem, nvmem, stack = st.regs, st.vmem, st.nvmem, st.stack
        pc = st.pc
        rem = self.rem
        ucyc = self.unit_cycles
        met = self.metrics
        acc = self.acc
        tr = self.trace
        cycles = met.cycles
        energy = met.energy_nJ
        limit = self.max_cycles
        event = None
        while True:
            ins = code[pc]
            op = ins[0]
            if op == CKPT or op == HALT or (op == RET and not stack):
                event = "exit"
                break
            c = ins[4]
            e = ins[5]
            cost = c if ucyc else e
            if cost > rem:
                event = "fail"
                break
            rem -= cost
            cycles += c
            energy += e
            if tr is not None:
                tr.append({"pc": pc, "op": self.code.src[pc].op, "target": self.code.src[pc].target,
                           "cycles": c, "nJ": e})
            if op == BINR:
                regs[ins[1]] = ins[6](regs[ins[2]], regs[ins[3]])
                pc += 1
            elif op == BINI:
                regs[ins[1]] = ins[6](regs[ins[2]], ins[3])
                pc += 1
            elif op == LOAD or op == STORE:
                off, size, ireg, imm, mode, dir_off, dirty_off, track, ak, obj = ins[2]
                idx = regs[ireg] if ireg is not None else imm
                if idx >= size:
                    st.pc = pc
                    raise MemoryFault(f"index {idx} out of bounds for {obj}[{size}] at pc {pc}")
                if mode == M_V:
                    mem, a = vmem, off + idx
                elif mode == M_N:
                    mem, a = nvmem, off + idx
                else:
                    d = nvmem[dir_off]
                    if mode == M_DYN:
                        acc["v_read/runtime"] = acc.get("v_read/runtime", 0) + 1
                        ro = not vmem[dirty_off + idx]
                    else:
                        ro = mode == M_RO
                    mem, a = nvmem, off + (d if ro else 1 - d) * size + idx
                if op == LOAD:
                    regs[ins[1]] = mem[a]
                else:
                    mem[a] = regs[ins[1]]
                    if track:
                        vmem[dirty_off + idx] = 1
                        acc["v_write/runtime"] = acc.get("v_write/runtime", 0) + 1
                acc[ak] = acc.get(ak, 0) + 1
                pc += 1
            elif op == CONST:
                regs[ins[1]] = ins[2]
                pc += 1
            elif op == MOV:
                regs[ins[1]] = regs[ins[2]]
                pc += 1
            elif op == BR:
                pc = ins[2] if regs[ins[1]] else ins[3]
            elif op == JMP:
                pc = ins[1]
            elif op == CALL:
                stack.append(pc + 1)
                pc = ins[1]
            elif op == RET:
                pc = stack.pop()
            elif op == OUT:
                st.pending.append(regs[ins[1]])
                pc += 1
            if cycles > limit:
                st.pc = pc
                met.cycles, met.energy_nJ = cycles, energy
                raise CycleLimitExceeded(f"cycle limit {limit} exceeded")
        st.pc = pc
        self.rem = rem
        met.cycles, met.energy_nJ = cycles, energy
        return event

    # exit handling
    def _exit_cost_and_plan(self, info):
        """Cost of phase A (exit actions, save) and the copy-back job, without side effects."""
        st = self.st
        lay = self.lay
        ca, ea = 0, 0.0
        cb, eb = 0, 0.0
        plan = []
        job = []
        tracked_clear = []
        counts = {}

        def add(kind, n, phase="a"):
            nonlocal ca, ea, cb, eb
            c, e = self.code.costs[kind]
            counts[(kind, phase)] = counts.get((kind, phase), 0) + n
            if phase == "a":
                ca += c * n
                ea += e * n
            else:
                cb += c * n
                eb += e * n

        for obj, (act, cells) in info["actions"]:
            s = lay.slot(obj)
            if act == "track":
                doff = lay.slot(f"__dirty.{obj}").offset
                dirty = [k for k in range(s.size) if st.vmem[doff + k] == 1]
                add("v_read", s.size)
                tracked_clear.append((doff, s.size))
                if not dirty:
                    continue
                if len(dirty) >= s.size / 2:
                    act, cells = "fwd", [k for k in range(s.size) if k not in set(dirty)]
                else:
                    act, cells = "back", dirty
            if act == "swap":
                add("nv_write", 1)
                plan.append((obj, "flip", None))
            elif act == "fwd":
                add("nv_read", len(cells))
                add("nv_write", len(cells) + 1)
                plan.append((obj, "fwd", cells))
            elif act == "back":
                add("nv_write", len(cells) + 1)
                add("nv_read", len(cells), "b")
                add("nv_write", len(cells) + 1, "b")
                job.append((obj, cells))
        for obj in self.tracked_objs:
            if all(o != obj for o, _ in info["actions"]):
                doff = lay.slot(f"__dirty.{obj}").offset
                tracked_clear.append((doff, lay.slot(obj).size))
        for _, n in tracked_clear:
            add("v_write", n)
        return (ca, ea, cb, eb), plan, job, tracked_clear, counts

    @property
    def tracked_objs(self):
        t = getattr(self, "_tracked", None)
        if t is None:
            t = [s.name[len("__dirty."):] for s in self.lay.slots.values() if s.kind == "dirty"]
            self._tracked = t
        return t

    def _save_cost(self, info):
        words = REGISTER_WORDS + (self.code.user_extent if info["full"] else 0)
        c, e = self.code.costs["nv_write"]
        cost_c, cost_e = c * words, e * words
        if info["full"]:
            vc, ve = self.code.costs["v_read"]
            cost_c += vc * self.code.user_extent
            cost_e += ve * self.code.user_extent
        return cost_c, cost_e, words

    def _apply_actions(self, plan, job, tracked_clear, counts):
        st = self.st
        lay = self.lay
        for obj, act, cells in plan:
            s = lay.slot(obj)
            doff = lay.slot(f"__dir.{obj}").offset
            d = st.nvmem[doff]
            base = s.offset
            if act == "fwd":
                ro, rw = base + d * s.size, base + (1 - d) * s.size
                for k in cells:
                    st.nvmem[rw + k] = st.nvmem[ro + k]
            st.nvmem[doff] = 1 - d
        st.job = [(obj, list(cells)) for obj, cells in job] if job else None
        for off, n in tracked_clear:
            for k in range(n):
                st.vmem[off + k] = 0
        for (kind, phase), n in counts.items():
            if phase == "a":
                k = f"{kind}/runtime"
                self.acc[k] = self.acc.get(k, 0) + n

    def _run_job(self):
        st = self.st
        lay = self.lay
        for obj, cells in st.job:
            s = lay.slot(obj)
            d = st.nvmem[lay.slot(f"__dir.{obj}").offset]
            ro, rw = s.offset + d * s.size, s.offset + (1 - d) * s.size
            for k in cells:
                st.nvmem[ro + k] = st.nvmem[rw + k]
        n = sum(len(c) for _, c in st.job)
        self.acc["nv_read/runtime"] = self.acc.get("nv_read/runtime", 0) + n
        self.acc["nv_write/runtime"] = self.acc.get("nv_write/runtime", 0) + n + 1
        st.job = None

    def _job_cost(self):
        if not self.st.job:
            return 0, 0.0
        n = sum(len(c) for _, c in self.st.job)
        rc, re_ = self.code.costs["nv_read"]
        wc, we = self.code.costs["nv_write"]
        return rc * n + wc * (n + 1), re_ * n + we * (n + 1)

    def exit_step(self, policy: CheckpointPolicy, at_halt: bool):
        """Execute the checkpoint (or final exit) at pc.  Returns 'ok', 'fail' or 'done'."""
        st = self.st
        ins = self.code.ins[st.pc]
        info = ins[6]
        c0, e0 = ins[4], ins[5]
        if at_halt:
            (ca, ea, cb, eb), plan, job, clear, counts = self._exit_cost_and_plan(info) if info else \
                ((0, 0.0, 0, 0.0), [], [], [], {})
            c, e = c0 + ca + cb, e0 + ea + eb
            if self._cost(c, e) > self.rem:
                return "fail"
            self._spend(c, e, "exit", st.pc)
            if info:
                self._apply_actions(plan, job, clear, counts)
                if st.job:
                    self._run_job()
            st.committed += st.pending
            st.pending.clear()
            return "done"
        self.metrics.checkpoint_calls += 1
        probe = policy.kind == "probe" and not info["always"]
        if probe:
            pc_, pe = self.m.probe_cycles, self.m.probe_nJ
            if self._cost(c0 + pc_, e0 + pe) > self.rem:
                return "fail"
            self._spend(c0 + pc_, e0 + pe, "probe", st.pc)
            if not self._should_save():
                st.pc += 1
                return "ok"
            c0 = e0 = 0
        (ca, ea, cb, eb), plan, job, clear, counts = self._exit_cost_and_plan(info)
        sc, se, words = self._save_cost(info)
        c, e = c0 + ca + sc, e0 + ea + se
        if self._cost(c, e) > self.rem:
            return "fail"
        self._spend(c, e, "save", st.pc)
        self._apply_actions(plan, job, clear, counts)
        self.acc["nv_write/runtime"] = self.acc.get("nv_write/runtime", 0) + words
        if info["full"]:
            self.acc["v_read/runtime"] = self.acc.get("v_read/runtime", 0) + self.code.user_extent
        st.pc += 1
        st.checkpoint = self._image() if info["full"] else (st.regs[:], st.pc, st.stack[:], None)
        st.committed += st.pending
        st.pending.clear()
        self.metrics.saves += 1
        self.metrics.save_words[words] = self.metrics.save_words.get(words, 0) + 1
        self.progress = True
        if st.job:
            jc, je = self._job_cost()
            if self._cost(jc, je) > self.rem:
                return "fail"
            self._spend(jc, je, "copy-back", st.pc)
            self._run_job()
        return "ok"

    def _should_save(self) -> bool:
        """Oracle lookahead: save unless the next checkpoint call is reachable and can save itself."""
        if math.isinf(self.rem):
            return False
        snap = self.st.snapshot()
        msnap = (self.metrics.cycles, self.metrics.energy_nJ, dict(self.acc), self.rem,
                 len(self.trace) if self.trace is not None else 0)
        self.st.pc += 1
        try:
            ev = self._run()
        except EmulatorError:
            ev = "fail"
        ok = False
        if ev == "exit":
            nxt = self.code.ins[self.st.pc]
            if nxt[0] != CKPT:
                ok = self._cost(nxt[4], nxt[5]) <= self.rem
            else:
                need_c = nxt[4] + self.m.probe_cycles
                need_e = nxt[5] + self.m.probe_nJ
                sc, se, _ = self._save_cost(nxt[6])
                ok = self._cost(need_c + sc, need_e + se) <= self.rem
        self.st.rollback(snap)
        self.metrics.cycles, self.metrics.energy_nJ = msnap[0], msnap[1]
        self.acc.clear()
        self.acc.update(msnap[2])
        self.rem = msnap[3]
        if self.trace is not None:
            del self.trace[msnap[4]:]
        return not ok

    def power_fail(self):
        st = self.st
        st.regs[:] = [POISON] * 16
        st.vmem[:] = [POISON] * len(st.vmem)
        st.stack.clear()
        st.pending.clear()
        self.metrics.failures += 1
        if self.trace is not None:
            self.trace.append({"pc": st.pc, "op": "power-failure", "target": "", "cycles": 0, "nJ": 0.0})

    def restore_cost(self):
        st = self.st
        img = st.checkpoint[3]
        n_img = len(img) if img is not None else 0
        rc, re_ = self.code.costs["nv_read"]
        vc, ve = self.code.costs["v_write"]
        c = rc * (REGISTER_WORDS + n_img) + vc * n_img
        e = re_ * (REGISTER_WORDS + n_img) + ve * n_img
        for obj in self.tracked_objs:
            n = self.lay.slot(obj).size
            c += vc * n
            e += ve * n
        jc, je = self._job_cost()
        return c + jc, e + je

    def restore(self):
        st = self.st
        regs, pc, stack, img = st.checkpoint
        c, e = self.restore_cost()
        self._spend(c, e, "restore", pc)
        n_img = len(img) if img is not None else 0
        self.acc["nv_read/runtime"] = self.acc.get("nv_read/runtime", 0) + REGISTER_WORDS + n_img
        if n_img:
            self.acc["v_write/runtime"] = self.acc.get("v_write/runtime", 0) + n_img
        st.regs[:] = regs
        st.pc = pc
        st.stack[:] = stack
        if img is not None:
            st.vmem[: len(img)] = img
        for obj in self.tracked_objs:
            off = self.lay.slot(f"__dirty.{obj}").offset
            n = self.lay.slot(obj).size
            st.vmem[off: off + n] = [0] * n
            self.acc["v_write/runtime"] = self.acc.get("v_write/runtime", 0) + n
        if st.job:
            self._run_job()
        self.metrics.restores += 1

    def final_globals(self) -> dict:
        homes = _homes(self.p)
        out = {}
        st = self.st
        for g in self.p.globals:
            s = self.lay.slot(g.name)
            if homes.get(g.name) == V:
                out[g.name] = st.vmem[s.offset: s.offset + s.size]
            elif s.versioned:
                d = st.nvmem[self.lay.slot(f"__dir.{g.name}").offset]
                base = s.offset + d * s.size
                out[g.name] = st.nvmem[base: base + s.size]
            else:
                out[g.name] = st.nvmem[s.offset: s.offset + s.size]
        return out


def _homes(p: Program) -> dict:
    """Volatile when every access of the object targets volatile memory."""
    seen: dict[str, set] = {}
    for f in p.functions:
        for i in f.instrs():
            if i.is_mem:
                seen.setdefault(p.object_of(f.name, i.addr.base), set()).add(i.target)
    return {o: (V if ts == {V} else N) for o, ts in seen.items()}


def _trace_default(trace):
    if trace is None:
        return [] if os.environ.get("FLASHVM_TRACE") == "1" else None
    if trace is True:
        return []
    if trace is False:
        return None
    return trace


def run_continuous(p: Program, layout: MemoryLayout | None, m: EnergyModel, inputs=None,
                   policy: CheckpointPolicy = EXECUTE, trace=None,
                   max_cycles: int = DEFAULT_MAX_CYCLES) -> RunResult:
    """Run without power failures; checkpoints still cost their save energy."""
    eng = _Engine(p, layout, m, inputs, _trace_default(trace), max_cycles)
    while True:
        eng._run()
        halting = eng.code.ins[eng.st.pc][0] != CKPT
        if eng.exit_step(policy, halting) == "done":
            break
    return RunResult(eng.final_globals(), list(eng.st.committed), eng.metrics, eng.st, eng.trace)


def run_intermittent(p: Program, layout: MemoryLayout | None, m: EnergyModel, sched: PowerSchedule,
                     pol: CheckpointPolicy = EXECUTE, inputs=None, trace=None, patience: int = 50,
                     max_cycles: int = DEFAULT_MAX_CYCLES) -> RunResult:
    """Run with power failures drawn from the schedule; status reports livelock or limit-exceeded."""
    eng = _Engine(p, layout, m, inputs, _trace_default(trace), max_cycles)
    eng.unit_cycles = sched.mode == "cycles"
    draws = sched.draws()
    eng.rem = next(draws)
    met = eng.metrics
    stalled = 0
    worst_stall = 0.0
    budget = eng.rem
    while True:
        ev = eng._run()
        r = "fail"
        if ev == "exit":
            halting = eng.code.ins[eng.st.pc][0] != CKPT
            r = eng.exit_step(pol, halting)
            if r == "done":
                break
            if r == "ok":
                continue
        # power failure
        if eng.progress:
            stalled, worst_stall = 0, 0.0
        else:
            stalled += 1
            worst_stall = max(worst_stall, budget)
        eng.progress = False
        if met.failures + 1 > sched.limit:
            met.failures += 1
            met.status = "limit-exceeded"
            break
        if stalled >= patience or worst_stall >= sched.max_budget:
            met.status = "livelock"
            break
        eng.power_fail()
        met.power_cycles += 1
        eng.rem = budget = next(draws)
        c, e = eng.restore_cost()
        if eng._cost(c, e) > eng.rem:
            met.status = "livelock"
            break
        eng.restore()
    return RunResult(eng.final_globals(), list(eng.st.committed), met, eng.st, eng.trace)


def charge(instr, m: EnergyModel) -> tuple[int, float]:
    """(cycles, nJ) of one instruction under its assigned target."""
    cyc = m.cycles.get(instr.op, 1)
    if instr.op in ("load", "store"):
        load = instr.op == "load"
        if instr.target == V:
            return cyc, m.E_read if load else m.E_write
        return m.nv_read if load else m.nv_write
    return cyc, cyc * m.E_cpu


def dump_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
