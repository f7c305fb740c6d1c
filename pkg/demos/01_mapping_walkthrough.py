"""Walk one small program through the pipeline and price its reads.

    python3 demos/01_mapping_walkthrough.py
"""

from flashvm.air import print_program
from flashvm.cli import run_pipeline
from flashvm.emulator import charge, run_continuous
from flashvm.mapping import compute_n_min, load_model

SOURCE = """
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

m = load_model("msp430fr5969-16mhz")
print("Input: one interval writes `a` twice, then reads it twice.\n")
r = run_pipeline(SOURCE, None, m)
print("After mapping (the ; @vol= annotations are the chosen memories):")
print(print_program(r.program))

loads = [i for i in r.program.mem_instrs() if i.op == "load"]
copies = [i for i in r.program.mem_instrs() if i.prov == "consolidation-copy"]
nv = 2 * m.nv_read[1]
vol = sum(charge(i, m)[1] for i in loads + copies)
print(f"Two reads straight from FRAM:          {nv:.3f} nJ")
print(f"Volatile copy + two reads from SRAM:   {vol:.3f} nJ")
print(f"Saving, relative to the cheaper cost:  {100 * (nv - vol) / vol:.2f}%")
for preset in ("msp430fr5969-16mhz", "msp430fr5969-8mhz"):
    print(f"Break-even read count at {preset}: n_min = {compute_n_min(load_model(preset))}")

res = run_continuous(r.program, r.layout, m)
print(f"\nContinuous run: outputs {res.outputs}, a = {res.globals['a']}, {res.metrics.energy_nJ:.2f} nJ")
print("\nLayout:")
print(r.layout.dump())
