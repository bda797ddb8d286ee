import pytest

from boss_sim.frontend import CoreConfig, SimStats, run_sim
from boss_sim.instrument import InstrumentOptions, instrument
from boss_sim.ir import assemble
from boss_sim.oracle import BRANCH, execute
from boss_sim.predictors import make_predictor
from boss_sim.workloads import WorkloadSpec, build

RANDOM_LOOP = """
.data 0x1000 {data}
    MOVI r4, 0x1000
.loop r1, 0, 64 target=T end=E
    LD r2, [r4+0]
    ADDI r4, r4, 8
T:
    BNZ r2, Skip
    ADDI r3, r3, 1
Skip:
.endloop
E:
    HALT
"""


def random_loop(seed=0):
    import numpy as np
    bits = np.random.default_rng(seed).integers(0, 2, 64)
    data = " ".join(f"{b} 0 0 0 0 0 0 0" for b in bits)
    return assemble(RANDOM_LOOP.format(data=data))


def test_commits_follow_oracle():
    prog = random_loop()
    res = run_sim(prog, make_predictor("gshare"), record_commits=True)
    tr = execute(prog)
    assert res.commits == [e.pc for e in tr.events]
    assert res.stats.committed == tr.instruction_count
    assert res.regs == tr.regs and res.memory == tr.memory


def test_branch_and_mispredict_counts():
    prog = random_loop(3)
    res = run_sim(prog, make_predictor("always_taken"))
    tr = execute(prog)
    branches = [e for e in tr.events if e.kind == BRANCH]
    not_taken = sum(1 for e in branches if not e.outcome)
    assert res.stats.branches == len(branches)
    # always-taken misses every not-taken branch, nothing else
    assert res.stats.mispredicts == not_taken
    assert res.stats.squashes == not_taken


def test_mpki_and_ipc_definitions():
    s = SimStats(cycles=400, committed=2000, mispredicts=7)
    assert s.mpki == pytest.approx(3.5)
    assert s.ipc == pytest.approx(5.0)
    assert SimStats().mpki == 0.0


def test_ipc_bounded_by_width():
    prog = assemble(".loop r1, 0, 500\n ADDI r2, r2, 1\n ADDI r3, r3, 2\n.endloop\nHALT\n")
    for w in (1, 2, 8):
        s = run_sim(prog, make_predictor("tage"), CoreConfig(width=w, window=max(w, 16))).stats
        assert s.ipc <= w + 1e-9


def test_narrower_core_is_slower():
    prog = random_loop()
    wide = run_sim(prog, make_predictor("tage"), CoreConfig(width=8)).stats.cycles
    narrow = run_sim(prog, make_predictor("tage"), CoreConfig(width=1, window=32)).stats.cycles
    assert narrow > wide


def test_deterministic_rerun():
    prog = random_loop()
    a = run_sim(prog, make_predictor("tage", seed=2)).stats
    b = run_sim(prog, make_predictor("tage", seed=2)).stats
    assert a.as_record() == b.as_record() and a.histogram == b.histogram


def test_histogram_counts_target_instances():
    prog = random_loop()
    s = run_sim(prog, make_predictor("bimodal")).stats
    t = prog.labels["T"]
    assert s.pc_instances(t) == 64
    assert s.pc_mispredicts(t) <= s.mispredicts
    lines = s.histogram_csv().splitlines()
    assert lines[0] == "pc,iter,mispredicts,instances" and len(lines) == 65


def test_key_values_format():
    s = run_sim(random_loop(), make_predictor("bimodal")).stats
    kv = dict(line.split("=") for line in s.key_values().splitlines())
    assert int(kv["committed"]) == s.committed and kv["terminated"] == "1"


def test_instrumented_loop_hits_every_instance():
    w = build(WorkloadSpec("synthetic", trip=32, generations=3, placement="cold"))
    res = instrument(w.fresh_structured(), w.target)
    s = run_sim(res.program, make_predictor("tage"), CoreConfig(debug=True)).stats
    t = res.program.labels["T"]
    assert s.pc_mispredicts(t) == 0 and s.wrong_hints == 0 and s.snapshot_mismatches == 0
    assert s.path_hits == 96


def test_boss_disabled_ignores_channel():
    w = build(WorkloadSpec("synthetic", trip=32, generations=3, placement="cold"))
    prog = instrument(w.fresh_structured(), w.target).program
    s = run_sim(prog, make_predictor("tage"), CoreConfig(boss_enabled=False)).stats
    assert s.boss_hits == 0 and s.boss_misses == 0


def test_boss_log_records_hits():
    w = build(WorkloadSpec("synthetic", trip=8, generations=2, placement="cold"))
    prog = instrument(w.fresh_structured(), w.target).program
    res = run_sim(prog, make_predictor("tage"))
    kinds = {e.kind for e in res.log}
    assert {"open", "write", "hit", "end_fetch", "end_commit"} <= kinds


def test_fault_marks_run_unterminated():
    prog = assemble("MOVI r1, 0x9000\nLD r2, [r1+0]\nHALT\n")
    assert not run_sim(prog, make_predictor("tage")).stats.terminated


def test_max_cycles_stops_runaway():
    prog = assemble("L:\n ADDI r1, r1, 1\n JMP L\n")
    s = run_sim(prog, make_predictor("tage"), CoreConfig(max_cycles=200)).stats
    assert not s.terminated and s.cycles <= 201


def test_wrong_path_pollution_only_changes_timing():
    prog = random_loop(5)
    a = run_sim(prog, make_predictor("bimodal"), CoreConfig(wrong_path_pollution=True), record_commits=True)
    b = run_sim(prog, make_predictor("bimodal"), record_commits=True)
    assert a.commits == b.commits


@pytest.mark.parametrize("kw", [{"width": 0}, {"width": 8, "window": 4}, {"resolve_delay": -1}])
def test_core_config_validation(kw):
    with pytest.raises(ValueError):
        CoreConfig(**kw)
