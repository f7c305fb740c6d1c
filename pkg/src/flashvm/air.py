"""Intermediate representation: instructions, text format, CFG, region tree, memory tags."""

from __future__ import annotations

import copy
import itertools
import re
from dataclasses import dataclass, field

import networkx as nx

NUM_REGS = 16
WORD_MASK = 0xFFFF

BINOPS = ("add", "sub", "mul", "and", "or", "xor", "shl", "shr", "cmp")
OPCODES = frozenset(("const", "mov", *BINOPS, "load", "store", "jmp", "br", "call",
                     "ret", "checkpoint", "out", "halt"))
TERMINATORS = frozenset(("jmp", "br", "ret", "halt"))
PROVENANCES = ("original", "dummy-write", "consolidation-copy", "versioning-copy")
TARGETS = ("unassigned", "volatile", "nonvolatile", "read-only-version", "read-write-version")

# short spellings accepted in annotations
_TARGET_ALIASES = {"v": "volatile", "nv": "nonvolatile", "ro": "read-only-version",
                   "rw": "read-write-version"}


class IRError(Exception):
    """Malformed or unsupported program."""


class ParseError(IRError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {msg}")
        self.line = line
        self.col = col


class IrreducibleCFG(IRError):
    pass


class UnsupportedProgram(IRError):
    pass


# ---------------------------------------------------------------- operands

@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self):
        return f"r{self.n}"


@dataclass(frozen=True)
class Addr:
    """base or base[index]; index is an int, a Reg, or None (scalar form). One word per element."""
    base: str
    index: int | Reg | None = None
    stride: int = 1

    def __str__(self):
        return self.base if self.index is None else f"{self.base}[{self.index}]"


# ---------------------------------------------------------------- instructions

class Instr:
    __slots__ = ("op", "args", "_prov", "target", "attrs", "uid", "tag")

    def __init__(self, op: str, args=(), prov: str = "original", target: str = "unassigned",
                 attrs: dict | None = None, uid: int = -1):
        if op not in OPCODES:
            raise IRError(f"unknown opcode {op!r}")
        if prov not in PROVENANCES:
            raise IRError(f"unknown provenance {prov!r}")
        self.op = op
        self.args = tuple(args)
        self._prov = prov
        self.target = target
        self.attrs = dict(attrs or {})
        self.uid = uid
        self.tag: MemoryTag | None = None

    @property
    def prov(self) -> str:
        return self._prov

    @property
    def is_mem(self) -> bool:
        return self.op in ("load", "store")

    @property
    def addr(self) -> Addr | None:
        if self.op == "load":
            return self.args[1]
        if self.op == "store":
            return self.args[0]
        return None

    def defs(self) -> tuple[int, ...]:
        if self.op in ("const", "mov", "load") or self.op in BINOPS:
            return (self.args[0].n,)
        return ()

    def uses(self) -> tuple[int, ...]:
        regs = []
        if self.op == "mov":
            regs.append(self.args[1].n)
        elif self.op in BINOPS:
            regs += [a.n for a in self.args[1:] if isinstance(a, Reg)]
        elif self.op == "load":
            if isinstance(self.args[1].index, Reg):
                regs.append(self.args[1].index.n)
        elif self.op == "store":
            if isinstance(self.args[0].index, Reg):
                regs.append(self.args[0].index.n)
            regs.append(self.args[1].n)
        elif self.op in ("br", "out"):
            regs.append(self.args[0].n)
        return tuple(regs)

    def key(self):
        return (self.op, self.args, self._prov, self.target, tuple(sorted(self.attrs.items())))

    def clone(self, uid: int | None = None) -> Instr:
        i = Instr(self.op, self.args, self._prov, self.target, self.attrs,
                  self.uid if uid is None else uid)
        i.tag = self.tag
        return i

    def text(self) -> str:
        a = self.args
        if self.op in ("ret", "checkpoint", "halt"):
            body = self.op
        elif self.op == "call" or self.op == "jmp":
            body = f"{self.op} {a[0]}"
        else:
            body = f"{self.op} " + ", ".join(str(x) for x in a)
        notes = []
        if self.target != "unassigned":
            notes.append(f"@vol={self.target}")
        if self._prov != "original":
            notes.append(f"@prov={self._prov}")
        for k, v in sorted(self.attrs.items()):
            notes.append(f"@{k}" if v == "" else f"@{k}={v}")
        return body + (" ; " + " ".join(notes) if notes else "")

    def __repr__(self):
        return f"<{self.uid}: {self.text()}>"


@dataclass
class Block:
    label: str
    instrs: list[Instr] = field(default_factory=list)

    @property
    def terminator(self) -> Instr | None:
        if self.instrs and self.instrs[-1].op in TERMINATORS:
            return self.instrs[-1]
        return None


@dataclass
class GlobalDecl:
    name: str
    size: int
    init: list[int] = field(default_factory=list)

    def values(self) -> list[int]:
        return (list(self.init) + [0] * self.size)[: self.size]


@dataclass
class LocalDecl:
    name: str
    size: int


@dataclass
class Function:
    name: str
    params: list[Reg] = field(default_factory=list)
    blocks: list[Block] = field(default_factory=list)
    frame: list[LocalDecl] = field(default_factory=list)

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def instrs(self):
        for b in self.blocks:
            yield from b.instrs


@dataclass
class Program:
    globals: list[GlobalDecl] = field(default_factory=list)
    functions: list[Function] = field(default_factory=list)
    entry: str = "main"
    next_uid: int = 0

    def fresh_uid(self) -> int:
        u = self.next_uid
        self.next_uid += 1
        return u

    def new(self, op: str, args=(), **kw) -> Instr:
        return Instr(op, args, uid=self.fresh_uid(), **kw)

    def func(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def instrs(self):
        for f in self.functions:
            yield from f.instrs()

    def mem_instrs(self):
        return [i for i in self.instrs() if i.is_mem]

    def objects(self) -> dict[str, int]:
        """Memory object name -> size; frame slots are named func.slot."""
        objs = {g.name: g.size for g in self.globals}
        for f in self.functions:
            for l in f.frame:
                objs[f"{f.name}.{l.name}"] = l.size
        return objs

    def object_of(self, fname: str, base: str) -> str:
        f = self.func(fname)
        if any(l.name == base for l in f.frame):
            return f"{fname}.{base}"
        return base

    def copy(self) -> Program:
        return copy.deepcopy(self)

    def locate(self) -> dict[int, tuple[str, str, int]]:
        """uid -> (function, block label, index)."""
        out = {}
        for f in self.functions:
            for b in f.blocks:
                for k, i in enumerate(b.instrs):
                    out[i.uid] = (f.name, b.label, k)
        return out

    def shape(self):
        """Structural identity ignoring uids and derived tags."""
        return (
            tuple((g.name, g.size, tuple(g.values())) for g in self.globals),
            tuple((f.name, tuple(f.params), tuple((l.name, l.size) for l in f.frame),
                   tuple((b.label, tuple(i.key() for i in b.instrs)) for b in f.blocks))
                  for f in self.functions),
            self.entry,
        )

    def __eq__(self, other):
        return isinstance(other, Program) and self.shape() == other.shape()

    __hash__ = None


def structurally_equal(a: Program, b: Program) -> bool:
    return a.shape() == b.shape()


# ---------------------------------------------------------------- tokenizer and parser

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>;[^\n]*)
  | (?P<num>-?0[xX][0-9a-fA-F]+|-?\d+)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[{}()\[\],:=])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks, line, start, pos = [], 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - start + 1)
        kind = m.lastgroup
        col = pos - start + 1
        if kind == "nl":
            line += 1
            start = m.end()
        elif kind == "comment":
            notes = [w for w in m.group()[1:].split() if w.startswith("@")]
            if notes:
                toks.append(_Tok("note", " ".join(notes), line, col))
        elif kind != "ws":
            toks.append(_Tok(kind, m.group(), line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - start + 1))
    return toks


_REG_RE = re.compile(r"[rR](\d+)$")


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0
        self.prog = Program()
        self.pending_refs: list[tuple[str, Function, _Tok, str]] = []

    def peek(self, k=0) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def take(self, kind=None, text=None) -> _Tok:
        t = self.peek()
        if (kind and t.kind != kind) or (text is not None and t.text != text):
            want = text or kind
            raise ParseError(f"expected {want!r}, found {t.text or t.kind!r}", t.line, t.col)
        self.i += 1
        return t

    def accept(self, text) -> bool:
        if self.peek().text == text and self.peek().kind in ("punct", "name"):
            self.i += 1
            return True
        return False

    def int_(self) -> int:
        t = self.take("num")
        return int(t.text, 0)

    def reg(self) -> Reg:
        t = self.take("name")
        m = _REG_RE.match(t.text)
        if not m:
            raise ParseError(f"expected register, found {t.text!r}", t.line, t.col)
        n = int(m.group(1))
        if n >= NUM_REGS:
            raise ParseError(f"register {t.text} outside r0..r{NUM_REGS - 1}", t.line, t.col)
        return Reg(n)

    def reg_or_imm(self):
        return self.int_() if self.peek().kind == "num" else self.reg()

    def parse(self) -> Program:
        entry_tok = None
        while self.peek().kind != "eof":
            t = self.peek()
            if t.text == "global":
                self.global_decl()
            elif t.text == "func":
                self.func_decl()
            elif t.text == "entry":
                self.take()
                entry_tok = self.take("name")
            elif t.kind == "note":
                self.take()
            else:
                raise ParseError(f"unexpected {t.text!r} at top level", t.line, t.col)
        p = self.prog
        if entry_tok is not None:
            p.entry = entry_tok.text
        names = [f.name for f in p.functions]
        if p.entry not in names:
            line, col = (entry_tok.line, entry_tok.col) if entry_tok else (1, 1)
            raise ParseError(f"entry function {p.entry!r} not defined", line, col)
        for kind, f, tok, name in self.pending_refs:
            if kind == "label" and not any(b.label == name for b in f.blocks):
                raise ParseError(f"undefined label {name!r}", tok.line, tok.col)
            if kind == "func" and name not in names:
                raise ParseError(f"call to undefined function {name!r}", tok.line, tok.col)
            if kind == "base":
                locs = {l.name for l in f.frame}
                if name not in locs and name not in {g.name for g in p.globals}:
                    raise ParseError(f"undefined global or local {name!r}", tok.line, tok.col)
        return p

    def global_decl(self):
        self.take("name", "global")
        nt = self.take("name")
        if any(g.name == nt.text for g in self.prog.globals):
            raise ParseError(f"duplicate global {nt.text!r}", nt.line, nt.col)
        size = self.word_type()
        init = []
        if self.accept("="):
            init.append(self.int_() & WORD_MASK)
            while self.accept(","):
                init.append(self.int_() & WORD_MASK)
        if len(init) > size:
            raise ParseError(f"{len(init)} initial values for {size} words", nt.line, nt.col)
        self.prog.globals.append(GlobalDecl(nt.text, size, init))

    def word_type(self) -> int:
        self.take("punct", ":")
        self.take("name", "word")
        self.take("punct", "[")
        t = self.peek()
        size = self.int_()
        if size < 1:
            raise ParseError("object size must be at least 1", t.line, t.col)
        self.take("punct", "]")
        return size

    def func_decl(self):
        self.take("name", "func")
        nt = self.take("name")
        if any(f.name == nt.text for f in self.prog.functions):
            raise ParseError(f"duplicate function {nt.text!r}", nt.line, nt.col)
        f = Function(nt.text)
        if self.accept("("):
            if not self.accept(")"):
                f.params.append(self.reg())
                while self.accept(","):
                    f.params.append(self.reg())
                self.take("punct", ")")
        self.take("punct", "{")
        while self.peek().text == "local" and self.peek(1).kind == "name":
            self.take()
            lt = self.take("name")
            if any(l.name == lt.text for l in f.frame):
                raise ParseError(f"duplicate local {lt.text!r}", lt.line, lt.col)
            f.frame.append(LocalDecl(lt.text, self.word_type()))
        block = None
        while not (self.peek().kind == "punct" and self.peek().text == "}"):
            t = self.peek()
            if t.kind == "eof":
                raise ParseError("unterminated function body", t.line, t.col)
            if t.kind == "note":
                self.take()
                continue
            if t.kind == "name" and self.peek(1).text == ":" and self.peek(1).kind == "punct":
                self.take()
                self.take()
                if any(b.label == t.text for b in f.blocks):
                    raise ParseError(f"duplicate label {t.text!r}", t.line, t.col)
                block = Block(t.text)
                f.blocks.append(block)
                continue
            if block is None:
                raise ParseError("instruction before first label", t.line, t.col)
            if block.terminator is not None:
                raise ParseError("instruction after block terminator", t.line, t.col)
            block.instrs.append(self.instr(f))
        self.take("punct", "}")
        if not f.blocks:
            raise ParseError(f"function {f.name!r} has no blocks", nt.line, nt.col)
        self.prog.functions.append(f)

    def addr(self, f: Function) -> Addr:
        bt = self.take("name")
        self.pending_refs.append(("base", f, bt, bt.text))
        idx = None
        if self.accept("["):
            idx = self.reg_or_imm()
            self.take("punct", "]")
        return Addr(bt.text, idx)

    def instr(self, f: Function) -> Instr:
        t = self.take("name")
        op = t.text
        if op not in OPCODES:
            raise ParseError(f"unknown opcode {op!r}", t.line, t.col)
        if op == "const":
            d = self.reg(); self.take("punct", ","); args = (d, self.int_() & WORD_MASK)
        elif op == "mov":
            d = self.reg(); self.take("punct", ","); args = (d, self.reg())
        elif op in BINOPS:
            d = self.reg(); self.take("punct", ","); a = self.reg(); self.take("punct", ",")
            b = self.reg_or_imm()
            args = (d, a, b & WORD_MASK if isinstance(b, int) else b)
        elif op == "load":
            d = self.reg(); self.take("punct", ","); args = (d, self.addr(f))
        elif op == "store":
            a = self.addr(f); self.take("punct", ","); args = (a, self.reg())
        elif op == "jmp":
            lt = self.take("name"); self.pending_refs.append(("label", f, lt, lt.text))
            args = (lt.text,)
        elif op == "br":
            c = self.reg(); self.take("punct", ",")
            lt = self.take("name"); self.take("punct", ","); lf = self.take("name")
            self.pending_refs += [("label", f, lt, lt.text), ("label", f, lf, lf.text)]
            args = (c, lt.text, lf.text)
        elif op == "call":
            ft = self.take("name"); self.pending_refs.append(("func", f, ft, ft.text))
            args = (ft.text,)
        elif op == "out":
            args = (self.reg(),)
        else:
            args = ()
        ins = Instr(op, args, uid=self.prog.fresh_uid())
        nt = self.peek()
        if nt.kind == "note" and nt.line == t.line:
            self.take()
            self.apply_notes(ins, nt)
        return ins

    def apply_notes(self, ins: Instr, tok: _Tok):
        for word in tok.text.split():
            k, _, v = word[1:].partition("=")
            if k == "vol":
                v = _TARGET_ALIASES.get(v, v)
                if v not in TARGETS:
                    raise ParseError(f"unknown volatility target {v!r}", tok.line, tok.col)
                if not ins.is_mem:
                    raise ParseError("volatility target on non-memory instruction", tok.line, tok.col)
                ins.target = v
            elif k == "prov":
                if v not in PROVENANCES:
                    raise ParseError(f"unknown provenance {v!r}", tok.line, tok.col)
                ins._prov = v
            else:
                ins.attrs[k] = v


def parse_program(text: str) -> Program:
    """Parse IR source text into a Program."""
    return _Parser(text).parse()


def print_program(p: Program) -> str:
    """Render a Program as IR source; parse_program inverts this."""
    out = []
    for g in p.globals:
        vals = g.values()
        line = f"global {g.name} : word[{g.size}]"
        if any(vals):
            last = max(k for k, v in enumerate(vals) if v) + 1
            line += " = " + ", ".join(str(v) for v in vals[:last])
        out.append(line)
    if p.entry != "main":
        out.append(f"entry {p.entry}")
    if out:
        out.append("")
    for f in p.functions:
        params = ", ".join(str(r) for r in f.params)
        out.append(f"func {f.name}({params}) {{")
        for l in f.frame:
            out.append(f"  local {l.name} : word[{l.size}]")
        for b in f.blocks:
            out.append(f"{b.label}:")
            for i in b.instrs:
                out.append("  " + i.text())
        out.append("}")
        out.append("")
    return "\n".join(out)


def load_program(path) -> Program:
    with open(path, encoding="utf-8") as fh:
        return parse_program(fh.read())


# ---------------------------------------------------------------- CFG

@dataclass
class CFG:
    func: Function
    entry: str
    succ: dict[str, list[str]]
    pred: dict[str, list[str]]
    warnings: list[str]

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.func.blocks]

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.labels)
        for u, vs in self.succ.items():
            g.add_edges_from((u, v) for v in vs)
        return g

    def reachable(self) -> set[str]:
        return set(nx.descendants(self.graph(), self.entry)) | {self.entry}

    def rpo(self) -> list[str]:
        seen, order = set(), []

        def dfs(u):
            seen.add(u)
            for v in self.succ[u]:
                if v not in seen:
                    dfs(v)
            order.append(u)

        dfs(self.entry)
        return order[::-1]


def block_successors(f: Function, k: int) -> list[str]:
    b = f.blocks[k]
    t = b.terminator
    if t is None:
        return [f.blocks[k + 1].label] if k + 1 < len(f.blocks) else []
    if t.op == "jmp":
        return [t.args[0]]
    if t.op == "br":
        return [t.args[1]] if t.args[1] == t.args[2] else [t.args[1], t.args[2]]
    return []


def build_cfg(f: Function) -> CFG:
    """One node per block; edges from jmp/br/fallthrough."""
    succ = {b.label: block_successors(f, k) for k, b in enumerate(f.blocks)}
    pred = {b.label: [] for b in f.blocks}
    for u, vs in succ.items():
        for v in vs:
            pred[v].append(u)
    entry = f.blocks[0].label
    warnings = []
    if pred[entry]:
        raise IRError(f"entry block {entry!r} of {f.name} has predecessors")
    last = f.blocks[-1]
    if last.terminator is None:
        raise IRError(f"function {f.name} falls off its last block {last.label!r}")
    cfg = CFG(f, entry, succ, pred, warnings)
    reach = cfg.reachable()
    for lab in cfg.labels:
        if lab not in reach:
            warnings.append(f"unreachable block {lab!r} in {f.name}")
    return cfg


# ---------------------------------------------------------------- regions

@dataclass(eq=False)
class LoopRegion:
    header: str
    latches: list[str]
    body: frozenset[str]
    preheader: str | None
    exits: list[tuple[str, str]]
    children: list = field(default_factory=list)
    parent: object = None

    @property
    def blocks(self) -> frozenset[str]:
        return self.body

    kind = "loop"


@dataclass(eq=False)
class ConditionalRegion:
    cond: str
    arms: tuple[frozenset[str], frozenset[str]]
    targets: tuple[str, str]
    join: str
    children: list = field(default_factory=list)
    parent: object = None

    @property
    def blocks(self) -> frozenset[str]:
        return frozenset({self.cond}) | self.arms[0] | self.arms[1]

    kind = "conditional"


@dataclass
class RegionTree:
    cfg: CFG
    roots: list
    loops: list[LoopRegion]
    conditionals: list[ConditionalRegion]
    innermost: dict[str, object]
    idom: dict[str, str]

    @property
    def regions(self) -> list:
        return [*self.loops, *self.conditionals]

    def loop_of(self, label: str) -> LoopRegion | None:
        r = self.innermost.get(label)
        while r is not None and not isinstance(r, LoopRegion):
            r = r.parent
        return r

    def loops_containing(self, label: str) -> list[LoopRegion]:
        return [l for l in self.loops if label in l.body]

    def dominates(self, a: str, b: str) -> bool:
        while True:
            if a == b:
                return True
            nb = self.idom.get(b)
            if nb is None or nb == b:
                return False
            b = nb

    def postorder(self) -> list:
        """Regions innermost first."""
        out = []

        def walk(r):
            for c in r.children:
                walk(c)
            out.append(r)

        for r in self.roots:
            walk(r)
        return out


def build_region_tree(cfg: CFG) -> RegionTree:
    """Natural loops and two-way conditionals with a join, nested by containment."""
    reach = cfg.reachable()
    g = cfg.graph().subgraph(reach)
    idom = nx.immediate_dominators(g, cfg.entry)

    def dominates(a, b):
        while True:
            if a == b:
                return True
            nb = idom[b]
            if nb == b:
                return False
            b = nb

    # retreating edges via DFS; each must be a back edge (target dominates source)
    back = []
    state = {}
    order = []

    def dfs(u):
        state[u] = 1
        for v in cfg.succ[u]:
            if v not in reach:
                continue
            if state.get(v) == 1:
                if not dominates(v, u):
                    raise IrreducibleCFG(f"irreducible control flow in {cfg.func.name}: {u} -> {v}")
                back.append((u, v))
            elif v not in state:
                dfs(v)
        state[u] = 2
        order.append(u)

    dfs(cfg.entry)
    for u in reach:
        for v in cfg.succ[u]:
            if dominates(v, u) and (u, v) not in back:
                back.append((u, v))

    loops = []
    for header in [v for v in cfg.rpo() if any(b[1] == v for b in back)]:
        latches = sorted({u for u, v in back if v == header}, key=cfg.labels.index)
        body = {header}
        stack = list(latches)
        while stack:
            x = stack.pop()
            if x not in body:
                body.add(x)
                stack.extend(p for p in cfg.pred[x] if p in reach)
        outside = [p for p in cfg.pred[header] if p not in body and p in reach]
        pre = None
        if len(outside) == 1 and cfg.succ[outside[0]] == [header]:
            pre = outside[0]
        exits = [(u, v) for u in sorted(body, key=cfg.labels.index) for v in cfg.succ[u] if v not in body]
        loops.append(LoopRegion(header, latches, frozenset(body), pre, exits))

    def innermost_loop(lab):
        best = None
        for l in loops:
            if lab in l.body and (best is None or len(l.body) < len(best.body)):
                best = l
        return best

    conds = []
    for lab in cfg.rpo():
        term = cfg.func.block(lab).terminator
        if term is None or term.op != "br" or len(cfg.succ[lab]) != 2:
            continue
        lp = innermost_loop(lab)
        scope = set(lp.body) if lp else set(reach)
        t, fl = cfg.succ[lab]
        if lp and (t not in scope or fl not in scope or t == lp.header or fl == lp.header):
            continue
        if (lab, t) in back or (lab, fl) in back:
            continue
        # within a loop, cut the back edges so post-dominance is taken over one iteration
        sub = scope
        pd = _postdominators_scoped(cfg, sub, lp)
        join = pd.get(lab)
        if join is None or join == "__exit__":
            continue
        arms = []
        for s in (t, fl):
            arm, stack = set(), [s]
            while stack:
                x = stack.pop()
                if x == join or x in arm or x not in sub:
                    continue
                if lp and x == lp.header:
                    continue
                arm.add(x)
                stack.extend(cfg.succ[x])
            arms.append(frozenset(arm))
        if arms[0] & arms[1]:
            continue
        conds.append(ConditionalRegion(lab, (arms[0], arms[1]), (t, fl), join))

    regions = [*loops, *conds]
    for r in regions:
        best = None
        for q in regions:
            if q is r:
                continue
            if r.blocks < q.blocks or (r.blocks == q.blocks and isinstance(q, LoopRegion)
                                       and isinstance(r, ConditionalRegion)):
                if best is None or len(q.blocks) < len(best.blocks):
                    best = q
        r.parent = best
        if best is not None:
            best.children.append(r)
    for a, b in itertools.combinations(regions, 2):
        if a.blocks & b.blocks and not (a.blocks <= b.blocks or b.blocks <= a.blocks):
            raise IrreducibleCFG(f"regions not properly nested in {cfg.func.name}")
    for r in regions:
        r.children.sort(key=lambda c: cfg.labels.index(c.header if isinstance(c, LoopRegion) else c.cond))
    roots = sorted([r for r in regions if r.parent is None],
                   key=lambda c: cfg.labels.index(c.header if isinstance(c, LoopRegion) else c.cond))
    innermost = {}
    for lab in cfg.labels:
        holders = [r for r in regions if lab in r.blocks]
        innermost[lab] = max(holders, key=lambda r: len(_ancestors(r))) if holders else None
    for x in cfg.labels:
        if x not in idom:
            idom[x] = x
    return RegionTree(cfg, roots, loops, conds, innermost, dict(idom))


def _ancestors(r):
    out = []
    while r.parent is not None:
        r = r.parent
        out.append(r)
    return out


def _postdominators_scoped(cfg: CFG, nodes: set[str], loop: LoopRegion | None) -> dict[str, str]:
    g = nx.DiGraph()
    g.add_node("__exit__")
    for u in nodes:
        g.add_node(u)
        succs = cfg.succ[u]
        if not succs:
            g.add_edge("__exit__", u)
        for v in succs:
            if v in nodes and not (loop and v == loop.header):
                g.add_edge(v, u)
            else:
                g.add_edge("__exit__", u)
    return nx.immediate_dominators(g, "__exit__")


def region_trees(p: Program) -> dict[str, RegionTree]:
    return {f.name: build_region_tree(build_cfg(f)) for f in p.functions}


# ---------------------------------------------------------------- call graph

def call_graph(p: Program) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(f.name for f in p.functions)
    for f in p.functions:
        for i in f.instrs():
            if i.op == "call":
                g.add_edge(f.name, i.args[0])
    return g


def check_no_recursion(p: Program) -> None:
    g = call_graph(p)
    try:
        cyc = nx.find_cycle(g)
    except nx.NetworkXNoCycle:
        return
    raise UnsupportedProgram("recursion is not supported: " + " -> ".join(u for u, _ in cyc))


def callee_closure(p: Program) -> dict[str, set[str]]:
    g = call_graph(p)
    return {f: set(nx.descendants(g, f)) | {f} for f in g.nodes}


def written_registers(p: Program) -> dict[str, frozenset[int]]:
    """Registers a call to each function may modify, transitively."""
    clo = callee_closure(p)
    local = {f.name: {d for i in f.instrs() for d in i.defs()} for f in p.functions}
    return {f: frozenset().union(*(local[g] for g in clo[f])) for f in clo}


def read_registers(p: Program) -> dict[str, frozenset[int]]:
    clo = callee_closure(p)
    local = {f.name: {u for i in f.instrs() for u in i.uses()} for f in p.functions}
    return {f: frozenset().union(*(local[g] for g in clo[f])) for f in clo}


# ---------------------------------------------------------------- memory tags

@dataclass(frozen=True)
class MemoryTag:
    """Location class: base object plus const / affine(c0 + c1*v) / opaque index."""
    base: str
    kind: str = "const"
    c0: int = 0
    c1: int = 0
    loop: tuple[str, str, int] | None = None     # (function, loop header, induction register)
    token: int | None = None

    @property
    def conservative(self) -> bool:
        return self.kind == "opaque"

    @property
    def variant(self) -> bool:
        return self.kind == "affine"

    def __str__(self):
        if self.kind == "const":
            return f"{self.base}[{self.c0}]"
        if self.kind == "affine":
            return f"{self.base}[{self.c0}{self.c1:+d}*{self.loop[1]}.r{self.loop[2]}]"
        return f"{self.base}[?{self.token}]"


def same_cell(a: MemoryTag, b: MemoryTag) -> bool:
    """Must refer to the same cell when both execute in one loop iteration."""
    return a == b and a.kind != "opaque"


def may_alias(a: MemoryTag, b: MemoryTag) -> bool:
    """May refer to the same cell within one iteration."""
    if a.base != b.base:
        return False
    if a.kind == "const" and b.kind == "const":
        return a.c0 == b.c0
    if a.kind == "affine" and b.kind == "affine" and a.loop == b.loop and a.c1 == b.c1:
        return a.c0 == b.c0
    return True


def _affine_step(ins: Instr, v: int):
    if ins.op in ("add", "sub") and ins.args[0].n == v and ins.args[1].n == v and isinstance(ins.args[2], int):
        c = ins.args[2]
        c = c - 0x10000 if c & 0x8000 else c
        return c if ins.op == "add" else -c
    return None


def induction_variables(f: Function, tree: RegionTree, wregs: dict[str, frozenset[int]]) -> dict[tuple, dict[int, int]]:
    """(func, header) -> {reg: step} for basic induction registers."""
    out = {}
    for lp in tree.loops:
        defs: dict[int, list] = {}
        clobbered = set()
        for lab in lp.body:
            for i in f.block(lab).instrs:
                for d in i.defs():
                    defs.setdefault(d, []).append((lab, i))
                if i.op == "call":
                    clobbered |= wregs[i.args[0]]
        ivs = {}
        for r, ds in defs.items():
            if len(ds) != 1 or r in clobbered:
                continue
            lab, i = ds[0]
            step = _affine_step(i, r)
            if step is None or step == 0:
                continue
            if tree.loop_of(lab) is not lp:
                continue
            if all(tree.dominates(lab, l) for l in lp.latches):
                ivs[r] = step
        out[(f.name, lp.header)] = ivs
    return out


def _sx(v: int) -> int:
    return v - 0x10000 if v & 0x8000 else v


def _abin(op, a, b):
    """Abstract binop on None (top) | ('c', k) | ('a', loop, c0, c1)."""
    if a is None or b is None:
        return None
    if a[0] == "c" and b[0] == "c":
        return ("c", _concrete_binop(op, a[1], b[1]))
    if op in ("add", "sub"):
        sgn = 1 if op == "add" else -1
        if a[0] == "a" and b[0] == "c":
            return _mk_aff(a[1], a[2] + sgn * _sx(b[1]), a[3])
        if a[0] == "c" and b[0] == "a" :
            return _mk_aff(b[1], _sx(a[1]) + sgn * b[2], sgn * b[3])
        if a[1] == b[1]:
            return _mk_aff(a[1], a[2] + sgn * b[2], a[3] + sgn * b[3])
        return None
    if op == "mul":
        if a[0] == "a" and b[0] == "c":
            return _mk_aff(a[1], a[2] * _sx(b[1]), a[3] * _sx(b[1]))
        if a[0] == "c" and b[0] == "a":
            return _mk_aff(b[1], b[2] * _sx(a[1]), b[3] * _sx(a[1]))
        return None
    if op == "shl" and a[0] == "a" and b[0] == "c" and b[1] < 16:
        k = 1 << b[1]
        return _mk_aff(a[1], a[2] * k, a[3] * k)
    return None


def _mk_aff(loop, c0, c1):
    if c1 == 0:
        return ("c", c0 & WORD_MASK)
    return ("a", loop, c0, c1)


def _concrete_binop(op: str, a: int, b: int) -> int:
    if op == "add":
        r = a + b
    elif op == "sub":
        r = a - b
    elif op == "mul":
        r = a * b
    elif op == "and":
        r = a & b
    elif op == "or":
        r = a | b
    elif op == "xor":
        r = a ^ b
    elif op == "shl":
        r = a << (b & 15)
    elif op == "shr":
        r = _sx(a) >> (b & 15)
    elif op == "cmp":
        r = 1 if _sx(a) < _sx(b) else 0
    else:
        raise IRError(op)
    return r & WORD_MASK


def compute_memory_tags(p: Program) -> Program:
    """Return a copy of p with every load/store carrying a MemoryTag."""
    q = p.copy()
    check_no_recursion(q)
    wregs = written_registers(q)
    objs = q.objects()
    for f in q.functions:
        tree = build_region_tree(build_cfg(f))
        ivs = induction_variables(f, tree, wregs)
        _tag_function(q, f, tree, ivs, wregs, objs)
    return q


def _tag_function(p, f, tree, ivs, wregs, objs):
    cfg = tree.cfg
    reach = cfg.reachable()
    order = [l for l in cfg.rpo()]
    inputs: dict[str, tuple | None] = {}
    top = tuple([None] * NUM_REGS)
    start = tuple([None] * NUM_REGS)
    loop_at = {lp.header: lp for lp in tree.loops}

    def transfer(state, blk, record=False):
        st = list(state)
        for i in blk.instrs:
            if record and i.is_mem:
                i.tag = _tag_for(p, f, i, st, objs)
            op = i.op
            if op == "const":
                st[i.args[0].n] = ("c", i.args[1])
            elif op == "mov":
                st[i.args[0].n] = st[i.args[1].n]
            elif op in BINOPS:
                b = i.args[2]
                bv = ("c", b) if isinstance(b, int) else st[b.n]
                st[i.args[0].n] = _abin(op, st[i.args[1].n], bv)
            elif op == "load":
                st[i.args[0].n] = None
            elif op == "call":
                for r in wregs[i.args[0]]:
                    st[r] = None
        return tuple(st)

    outs: dict[str, tuple] = {}
    changed = True
    while changed:
        changed = False
        for lab in order:
            if lab == cfg.entry:
                inp = start
            else:
                vals = []
                for pr in cfg.pred[lab]:
                    if pr not in reach or pr not in outs:
                        continue
                    vals.append(_edge(outs[pr], pr, lab, tree))
                if not vals:
                    continue
                inp = tuple(vals[0][k] if all(x[k] == vals[0][k] for x in vals) else None
                            for k in range(NUM_REGS))
            if lab in loop_at:
                key = (f.name, lab)
                inp = list(inp)
                for r in ivs.get(key, {}):
                    inp[r] = ("a", key + (r,), 0, 1)
                inp = tuple(inp)
            if inputs.get(lab) != inp:
                inputs[lab] = inp
                outs[lab] = transfer(inp, f.block(lab))
                changed = True
    for b in f.blocks:
        if b.label in inputs:
            transfer(inputs[b.label], b, record=True)
        else:
            for i in b.instrs:
                if i.is_mem:
                    i.tag = _tag_for(p, f, i, list(top), objs)
    return inputs, outs


def _edge(state, u, v, tree):
    """Drop affine facts of loops the edge leaves."""
    left = [ (tree.cfg.func.name, lp.header) for lp in tree.loops if u in lp.body and v not in lp.body]
    if not left:
        return state
    return tuple(None if (x is not None and x[0] == "a" and x[1][:2] in left) else x for x in state)


def _tag_for(p, f, i, st, objs) -> MemoryTag:
    a = i.addr
    obj = p.object_of(f.name, a.base)
    if objs[obj] == 1:
        return MemoryTag(obj)
    if a.index is None:
        return MemoryTag(obj)
    if isinstance(a.index, int):
        return MemoryTag(obj, "const", a.index)
    v = st[a.index.n]
    if v is not None and v[0] == "c":
        return MemoryTag(obj, "const", v[1])
    if v is not None and v[0] == "a":
        return MemoryTag(obj, "affine", v[2], v[3], v[1])
    return MemoryTag(obj, "opaque", token=i.uid)


def block_exit_values(p: Program, fname: str) -> dict[str, tuple]:
    """Abstract register values at each block end: None, ('c', k) or ('a', loop, c0, c1)."""
    q = p.copy()
    wregs = written_registers(q)
    f = q.func(fname)
    tree = build_region_tree(build_cfg(f))
    ivs = induction_variables(f, tree, wregs)
    _, outs = _tag_function(q, f, tree, ivs, wregs, q.objects())
    return outs


def ensure_tags(p: Program) -> Program:
    if all(i.tag is not None for i in p.mem_instrs()):
        return p
    return compute_memory_tags(p)
