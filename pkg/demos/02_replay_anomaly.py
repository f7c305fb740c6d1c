"""Show the double-increment anomaly and how versioning removes it.

A failure after `store a` but before the next save replays the interval.  When
`a` lives only in FRAM, the replayed load sees the already-incremented value.

    python3 demos/02_replay_anomaly.py
"""

from flashvm.air import parse_program, print_program
from flashvm.baselines import build_baseline
from flashvm.cli import run_pipeline
from flashvm.emulator import PowerSchedule, run_continuous, run_intermittent
from flashvm.mapping import load_model

SOURCE = """
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

m = load_model("msp430fr5969-16mhz")
naive = build_baseline(parse_program(SOURCE), "nonvolatile-manual-execute-unguarded")
fixed = run_pipeline(SOURCE, None, m)


def sweep(prog, layout):
    total = run_continuous(prog, layout, m).metrics.cycles
    out = {}
    for k in range(1, total + 1):
        a = run_intermittent(prog, layout, m, PowerSchedule(budgets=[k])).globals["a"][0]
        out.setdefault(a, []).append(k)
    return out


print("Everything in FRAM, no guard. Final a by first-cycle budget (cycles):")
for a, ks in sorted(sweep(naive.program, naive.layout).items()):
    print(f"  a = {a}: budgets {ks[0]}..{ks[-1]} ({len(ks)} cases)")

print("\nTransformed program:")
print(print_program(fixed.program))
print("Final a by first-cycle budget:")
for a, ks in sorted(sweep(fixed.program, fixed.layout).items()):
    print(f"  a = {a}: budgets {ks[0]}..{ks[-1]} ({len(ks)} cases)")
print("\nThe load reads the read-only copy and the store writes the other one;")
print("the save flips which copy is current, so a replay always reads the old value.")
