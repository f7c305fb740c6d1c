"""Compare flashvm against the baselines on the three corpus kernels.

Arms with the same checkpoint placement are the fair comparisons:
flashvm (loop-latch) vs *-ll-*, flashvm-fr vs *-fr-*, flashvm-idem vs *-idem-*.

    python3 demos/03_corpus_comparison.py [profile] [seeds]
"""

import sys

from flashvm.baselines import BASELINE_NAMES
from flashvm.cli import CORPUS, ExperimentSpec, run_experiment_matrix, summarize

profile = sys.argv[1] if len(sys.argv) > 1 else "min"
seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 5
rows = []
for bench in CORPUS:
    spec = ExperimentSpec(bench, arms=["flashvm", "flashvm-fr", "flashvm-idem", *BASELINE_NAMES],
                          schedule={"profile": profile}, seeds=list(range(seeds)))
    rows += run_experiment_matrix(spec)
print(f"profile {profile}, {seeds} seeds per arm\n")
print(summarize(rows))
bad = [r for r in rows if not r.get("equivalent")]
print(f"{len(rows) - len(bad)}/{len(rows)} runs matched the continuous result")
