"""Hypothesis strategy producing structured, terminating AIR programs as text.

Programs use straight-line code, if/else diamonds, counted do-while loops,
helper calls (acyclic), globals and frame locals.  Indices are always in
bounds: constants, loop induction variables (plus an offset) or masked values.
"""

from __future__ import annotations

from hypothesis import strategies as st

DATA = [1, 2, 3, 4, 5, 6]
MAIN_IVS = [9, 10, 11]
HELPER_IV = 14
OPS = ["add", "sub", "mul", "and", "or", "xor", "shl", "shr", "cmp"]


class _Fn:
    def __init__(self, draw, name, objects, callees, ivs, cmp_reg, max_depth, budget):
        self.draw = draw
        self.name = name
        self.objects = objects          # list of (name, size)
        self.callees = callees
        self.ivs = ivs
        self.cmp_reg = cmp_reg
        self.max_depth = max_depth
        self.budget = budget
        self.blocks = [["entry", []]]
        self.n = 0

    def label(self, kind):
        self.n += 1
        return f"{kind}{self.n}"

    def emit(self, text):
        self.blocks[-1][1].append(text)

    def start(self, label):
        self.blocks.append([label, []])

    def reg(self):
        return f"r{self.draw(st.sampled_from(DATA))}"

    def access(self, loops):
        name, size = self.draw(st.sampled_from(self.objects))
        if size == 1:
            return name
        choices = ["const", "mask"]
        usable = [(iv, trip) for iv, trip in loops if trip <= size]
        if usable:
            choices += ["iv", "iv"]
        kind = self.draw(st.sampled_from(choices))
        if kind == "const":
            return f"{name}[{self.draw(st.integers(0, size - 1))}]"
        if kind == "mask":
            self.emit(f"and r7, {self.reg()}, {size - 1}")
            return f"{name}[r7]"
        iv, trip = self.draw(st.sampled_from(usable))
        off = self.draw(st.integers(0, size - trip))
        if off == 0:
            return f"{name}[r{iv}]"
        self.emit(f"add r7, r{iv}, {off}")
        return f"{name}[r7]"

    def stmt(self, depth, loops):
        self.budget -= 1
        kinds = ["const", "op", "load", "load", "store", "store"]
        if self.budget > 0 and depth < self.max_depth:
            kinds += ["if", "loop"]
        if self.callees:
            kinds.append("call")
        if self.name == "main":
            kinds.append("out")
        k = self.draw(st.sampled_from(kinds))
        if k == "const":
            self.emit(f"const {self.reg()}, {self.draw(st.integers(0, 300))}")
        elif k == "op":
            op = self.draw(st.sampled_from(OPS))
            rhs = self.reg() if self.draw(st.booleans()) else str(self.draw(st.integers(0, 20)))
            self.emit(f"{op} {self.reg()}, {self.reg()}, {rhs}")
        elif k == "load":
            acc = self.access(loops)
            self.emit(f"load {self.reg()}, {acc}")
        elif k == "store":
            acc = self.access(loops)
            self.emit(f"store {acc}, {self.reg()}")
        elif k == "out":
            self.emit(f"out {self.reg()}")
        elif k == "call":
            self.emit(f"call {self.draw(st.sampled_from(self.callees))}")
        elif k == "if":
            lt, lf, lj = self.label("then"), self.label("else"), self.label("join")
            self.emit(f"cmp r8, {self.reg()}, {self.reg()}")
            self.emit(f"br r8, {lt}, {lf}")
            self.start(lt)
            self.body(depth + 1, loops)
            self.emit(f"jmp {lj}")
            self.start(lf)
            if self.draw(st.booleans()):
                self.body(depth + 1, loops)
            self.emit(f"jmp {lj}")
            self.start(lj)
        elif k == "loop":
            free = [iv for iv in self.ivs if all(iv != x for x, _ in loops)]
            if not free:
                return
            iv = free[0]
            trip = self.draw(st.integers(1, 3))
            head, done = self.label("loop"), self.label("exit")
            self.emit(f"const r{iv}, 0")
            self.emit(f"jmp {head}")
            self.start(head)
            self.body(depth + 1, loops + [(iv, trip)])
            self.emit(f"add r{iv}, r{iv}, 1")
            self.emit(f"cmp {self.cmp_reg}, r{iv}, {trip}")
            self.emit(f"br {self.cmp_reg}, {head}, {done}")
            self.start(done)

    def body(self, depth, loops):
        for _ in range(self.draw(st.integers(1, 4))):
            self.stmt(depth, loops)

    def text(self, params, frame, last):
        self.body(0, [])
        self.emit(last)
        lines = [f"func {self.name}({params}) {{"]
        lines += [f"  local {n} : word[{s}]" for n, s in frame]
        for lab, ins in self.blocks:
            lines.append(f"{lab}:")
            lines += [f"  {x}" for x in ins]
        lines.append("}")
        return "\n".join(lines)


@st.composite
def programs(draw, max_helpers: int = 2, max_depth: int = 2, budget: int = 10) -> str:
    sizes = st.sampled_from([1, 1, 2, 4, 8])
    gl = [(f"g{k}", draw(sizes)) for k in range(draw(st.integers(1, 3)))]
    out = []
    for n, s in gl:
        init = draw(st.lists(st.integers(0, 0xFFFF), max_size=s))
        out.append(f"global {n} : word[{s}]" + (" = " + ", ".join(map(str, init)) if init else ""))
    helpers = []
    for h in range(draw(st.integers(0, max_helpers))):
        frame = [(f"t{k}", draw(st.sampled_from([1, 2, 4]))) for k in range(draw(st.integers(0, 2)))]
        fn = _Fn(draw, f"h{h}", gl + frame, [f"h{j}" for j in range(h)], [HELPER_IV], "r15",
                 1, budget // 2)
        out.append(fn.text("", frame, "ret"))
        helpers.append(fn.name)
    main = _Fn(draw, "main", gl, helpers, MAIN_IVS, "r13", max_depth, budget)
    out.append(main.text("", [], "halt"))
    return "\n".join(out) + "\n"
