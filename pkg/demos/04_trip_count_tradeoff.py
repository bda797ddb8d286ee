"""
When the pre-execute loop does not pay off
==========================================

Short loops over cached data give the pre-execute loop almost nothing to
hide: its own instructions cost about as much as the mispredictions they
remove. Long loops over missing data are the opposite case.
"""

from boss_sim.frontend import run_sim
from boss_sim.instrument import InstrumentOptions, instrument
from boss_sim.predictors import make_predictor
from boss_sim.workloads import WorkloadSpec, build

print(f"{'trip':>5} {'data':>5} {'bias':>5} {'base cyc':>9} {'inst cyc':>9} {'speedup':>8}")
for trip in (4, 16, 64, 256):
    for placement in ("hot", "cold"):
        for bias in (0.5, 0.9):
            gens = max(4, 1024 // trip)
            w = build(WorkloadSpec("synthetic", trip=trip, generations=gens, placement=placement,
                                   bias=bias, filler=0, seed=5))
            b = run_sim(w.program, make_predictor("tage")).stats.cycles
            s = run_sim(instrument(w.fresh_structured(), w.target).program, make_predictor("tage")).stats.cycles
            print(f"{trip:5d} {placement:>5} {bias:5.1f} {b:9d} {s:9d} {b / s:8.2f}")

# %%
# Placement matters too. With 40 independent instructions in front of the
# target loop, the earliest placement hoists the pre-execute loop above them.
# Right before the target loop, the first outcomes are still in flight when
# the target branch is fetched.

w = build(WorkloadSpec("synthetic", trip=16, generations=20, placement="cold", filler=40))
for where in ("earliest", "late"):
    s = run_sim(instrument(w.fresh_structured(), w.target, InstrumentOptions(placement=where)).program,
                make_predictor("tage")).stats
    print(f"{where:>9}: hits {s.boss_hits:4d} misses {s.boss_misses:4d} target mispredicts {s.target_mispredicts}")
