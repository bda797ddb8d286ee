"""
Paying for the hints
====================

Every outcome costs pre-execute instructions. Unrolling amortises the loop
control, vectorising also packs several outcome bytes into one store.
Instrumenting only part of the iteration space trades hints for overhead.
"""

from boss_sim.frontend import run_sim
from boss_sim.instrument import InstrumentOptions, instrument
from boss_sim.oracle import execute
from boss_sim.predictors import make_predictor
from boss_sim.workloads import WorkloadSpec, build

w = build(WorkloadSpec("synthetic", trip=256, generations=1, placement="cold", filler=0))
base = execute(w.program).instruction_count


def extra(opts):
    return execute(instrument(w.fresh_structured(), w.target, opts).program).instruction_count - base


# %%
# Added instructions for one 256-trip generation.

for label, opts in [("plain", InstrumentOptions()),
                    ("unroll x4", InstrumentOptions(variant="unrolled", factor=4)),
                    ("vector x4", InstrumentOptions(variant="vectorized", factor=4)),
                    ("vector x8", InstrumentOptions(variant="vectorized", factor=8))]:
    print(f"{label:>10}: {extra(opts):5d} extra instructions")

# %%
# Partial coverage: outcomes for iterations n..m only.

w8 = build(WorkloadSpec("synthetic", trip=256, generations=8, placement="cold", filler=50, seed=4))
b = run_sim(w8.program, make_predictor("tage")).stats
print(f"\n{'range':>9} {'extra/gen':>10} {'tgt miss':>9} {'speedup':>8}")
for m in (15, 63, 127, 255):
    opts = InstrumentOptions(coverage=(0, m))
    cost = extra(opts)
    s = run_sim(instrument(w8.fresh_structured(), w8.target, opts).program, make_predictor("tage")).stats
    print(f"{f'0:{m}':>9} {cost:10d} {s.target_mispredicts:9d} {b.cycles / s.cycles:8.2f}")
print(f"{'baseline':>9} {0:10d} {b.target_mispredicts:9d} {1.0:8.2f}")
