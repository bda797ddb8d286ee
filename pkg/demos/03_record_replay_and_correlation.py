"""
Hints without a pre-execute loop
================================

Two cheaper sources of outcomes. Record-and-replay stores each outcome as
the guess for the same iteration of the next generation, so hint quality
is the generation-to-generation agreement. A correlated source loop can
hand its own outcomes to a later target loop.
"""

from boss_sim.frontend import run_sim
from boss_sim.oracle import generation_agreement
from boss_sim.predictors import make_predictor
from boss_sim.workloads import (WorkloadSpec, build, build_correlated_instrumentation,
                                build_record_replay_instrumentation)

# %%
# Record-and-replay across a range of repeat probabilities.

print(f"{'repeat':>7} {'agreement':>10} {'hint acc':>9} {'base miss':>10} {'inst miss':>10}")
for p in (1.0, 0.93, 0.8, 0.6):
    w = build(WorkloadSpec("record_replay", trip=64, generations=60, repeat_prob=p))
    b = run_sim(w.program, make_predictor("tage")).stats
    s = run_sim(build_record_replay_instrumentation(w), make_predictor("tage")).stats
    acc = 1 - s.wrong_hints / s.path_hits
    print(f"{p:7.2f} {generation_agreement(w.schedule, 64):10.3f} {acc:9.3f} "
          f"{b.target_mispredicts:10d} {s.target_mispredicts:10d}")

# %%
# Correlated loops: the target follows the source with probability corr_prob.

print(f"\n{'corr':>5} {'hint acc':>9} {'base miss':>10} {'inst miss':>10}")
for p in (1.0, 0.9, 0.7):
    w = build(WorkloadSpec("correlated", trip=64, generations=20, corr_prob=p))
    prog = build_correlated_instrumentation(w)
    b = run_sim(w.program, make_predictor("tage")).stats
    s = run_sim(prog, make_predictor("tage")).stats
    acc = 1 - s.wrong_hints / s.path_hits
    print(f"{p:5.2f} {acc:9.3f} {b.pc_mispredicts(w.target_pc):10d} {s.pc_mispredicts(prog.labels['T']):10d}")
