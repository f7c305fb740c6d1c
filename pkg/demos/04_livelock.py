"""Find the energy budget where a long interval stops fitting in one power cycle.

crc16_long runs the whole checksum in one helper, so return-only placement gives
one interval of thousands of cycles.  Keeping most of its traffic in SRAM makes
that interval cheap enough to finish on a budget where the FRAM-only baseline
can never reach its next save.

    python3 demos/04_livelock.py
"""

from flashvm.cli import build_arm, corpus_program
from flashvm.emulator import PowerSchedule, run_intermittent
from flashvm.mapping import load_model

m = load_model("msp430fr5969-16mhz")
p = corpus_program("crc16_long")


def status(arm, budget):
    s = PowerSchedule(mode="energy", mean=budget, jitter=0.0)
    return run_intermittent(arm.program, arm.layout, m, s, arm.policy).metrics


def threshold(arm, lo=1.0, hi=20000.0):
    while hi - lo > 0.5:
        mid = (lo + hi) / 2
        lo, hi = (lo, mid) if status(arm, mid).status == "completed" else (mid, hi)
    return hi


arms = {n: build_arm(p, n, m) for n in ("nonvolatile-fr-execute", "flashvm-fr", "flashvm")}
th = {n: threshold(a) for n, a in arms.items()}
for n, t in th.items():
    print(f"{n:24} completes from {t:8.1f} nJ per power cycle")
budget = (th["nonvolatile-fr-execute"] + th["flashvm-fr"]) / 2
print(f"\nAt {budget:.1f} nJ per power cycle:")
for n, a in arms.items():
    mt = status(a, budget)
    print(f"  {n:24} {mt.status:10} failures={mt.failures} restores={mt.restores}")
