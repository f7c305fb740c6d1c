import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flashvm.air import parse_program  # noqa: E402
from flashvm.mapping import load_model  # noqa: E402

# two stores then two reads of one scalar between saves
TWO_WRITES = """
global a : word[1]

func main() {
entry:
  checkpoint
  const r1, 5
  store a, r1
  add r1, r1, 1
  store a, r1
  load r2, a
  load r3, a
  add r4, r2, r3
  out r4
  checkpoint
  halt
}
"""

# a = a + 1 across a save: replay from the first save double-increments
INCREMENT = """
global a : word[1] = 0

func main() {
entry:
  checkpoint
  load r1, a
  add r1, r1, 1
  store a, r1
  checkpoint
  halt
}
"""

# read of a in the condition, a conditional increment, then an unconditional update
COND_READ = """
global a : word[1] = 3

func main() {
entry:
  checkpoint
  const r0, 0
  load r1, a
  cmp r2, r0, r1
  br r2, then, join
then:
  load r3, a
  add r3, r3, 1
  store a, r3
  jmp join
join:
  load r4, a
  add r4, r4, r4
  store a, r4
  checkpoint
  halt
}
"""

# running sum in memory updated inside a counted loop
LOOP_SUM = """
global sum : word[1]
global v : word[4] = 1, 2, 3, 4

func main() {
entry:
  checkpoint
  const r1, 0
  jmp loop
loop:
  load r2, sum
  load r3, v[r1]
  add r2, r2, r3
  store sum, r2
  add r1, r1, 1
  cmp r4, r1, 4
  br r4, loop, done
done:
  load r5, sum
  out r5
  checkpoint
  halt
}
"""


@pytest.fixture(scope="session")
def m16():
    return load_model("msp430fr5969-16mhz")


@pytest.fixture(scope="session")
def m8():
    return load_model("msp430fr5969-8mhz")


@pytest.fixture
def two_writes():
    return parse_program(TWO_WRITES)


@pytest.fixture
def increment():
    return parse_program(INCREMENT)


def front(p, placement=None):
    """Pipeline stages up to (not including) memory mapping."""
    from flashvm.air import compute_memory_tags
    from flashvm.normalize import normalize_all
    from flashvm.placement import extract_intervals, normalize_interval_boundaries, place_checkpoints
    if placement is not None:
        p = place_checkpoints(p, placement)
    p = normalize_interval_boundaries(p)
    ivs = extract_intervals(p)
    p, _ = normalize_all(compute_memory_tags(p))
    return p, ivs


def targets(p, op=None, base=None):
    return [i.target for i in p.mem_instrs()
            if (op is None or i.op == op) and (base is None or i.addr.base == base) and i.prov == "original"]
