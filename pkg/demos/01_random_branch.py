"""
A branch nobody can predict
===========================

A loop loads a random bit per iteration and branches on it. History-based
predictors hover around a coin flip. A pre-execute loop computes every
outcome ahead of time and hands them to the front end through a BOSS
channel, so the target branch stops mispredicting.
"""

from boss_sim.frontend import run_sim
from boss_sim.instrument import instrument
from boss_sim.predictors import make_predictor
from boss_sim.workloads import WorkloadSpec, build

# 40 generations of a 256-trip loop, one cache line per element so loads miss
w = build(WorkloadSpec("synthetic", trip=256, generations=40, placement="cold", filler=50, seed=1))
print("target instances:", len(w.schedule), " taken fraction:", w.schedule.mean().round(3))

# the same program with a pre-execute loop in front of the target loop
inst = instrument(w.fresh_structured(), w.target)
print("instrumented:", inst.ok, " backslice loads:", len(inst.backslice.loads))

# %%
# Baseline vs instrumented, per predictor.

print(f"\n{'predictor':>12} {'base acc':>9} {'base cyc':>9} {'inst acc':>9} {'inst cyc':>9} {'speedup':>8}")
for kind in ("always_taken", "bimodal", "gshare", "tage"):
    b = run_sim(w.program, make_predictor(kind)).stats
    s = run_sim(inst.program, make_predictor(kind)).stats
    acc_b = 1 - b.target_mispredicts / b.target_instances
    acc_s = 1 - s.target_mispredicts / s.target_instances
    print(f"{kind:>12} {acc_b:9.3f} {b.cycles:9d} {acc_s:9.3f} {s.cycles:9d} {b.cycles / s.cycles:8.2f}")

# %%
# The hint path in numbers: hits are fetches that found an outcome waiting,
# misses found none and fell back to the predictor.

s = run_sim(inst.program, make_predictor("tage")).stats
print(f"\nhits {s.boss_hits}  misses {s.boss_misses}  wrong hints {s.wrong_hints}")
print(f"MPKI {s.mpki:.2f} over {s.committed} committed instructions (pre-execute included)")
