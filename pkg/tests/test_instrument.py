import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boss_sim.errors import InstrumentError
from boss_sim.frontend import CoreConfig, run_sim
from boss_sim.instrument import (InstrumentOptions, extract_backslice, instrument, locate_target,
                                 parse_range, parse_variant)
from boss_sim.oracle import BOSS_OUTCOME, BRANCH, execute, non_boss_events
from boss_sim.predictors import make_predictor
from boss_sim.structured import lower, parse_structured
from boss_sim.workloads import KINDS, WorkloadSpec, build


def hint_check(prog, target="T", ch=0):
    """Replay hint stores against the target's outcomes in the oracle trace.

    Returns ``(instances, covered, wrong, covered_iterations)``. A slot is used once and
    all slots reset at the End pc.
    """
    tr = execute(prog)
    assert tr.halted
    base = prog.mmio.outcome_addr(ch, 0)
    tpc = prog.labels[target]
    epc = prog.targets.get(tpc)
    table, k = {}, 0
    n = covered = wrong = 0
    iters = set()
    for e in tr.events:
        if e.kind == BOSS_OUTCOME and base <= e.addr < base + 256:
            vals = e.value if isinstance(e.value, tuple) else (e.value,)
            for j, v in enumerate(vals):
                table[(e.addr - base + j) % 256] = v
        elif e.pc == tpc and e.kind == BRANCH:
            n += 1
            s = k % 256
            if s in table:
                covered += 1
                iters.add(k)
                # a committed target instance frees its slot
                wrong += table.pop(s) != int(e.outcome)
            k += 1
        elif e.pc == epc:
            k = 0
            table.clear()
    return n, covered, wrong, iters


def same_behaviour(orig, inst):
    a, b = execute(orig), execute(inst)
    return non_boss_events(a, True) == non_boss_events(b, True) and a.memory == b.memory


VARIANTS = [InstrumentOptions(), InstrumentOptions(variant="unrolled", factor=4),
            InstrumentOptions(variant="unrolled", factor=3), InstrumentOptions(variant="vectorized", factor=4),
            InstrumentOptions(variant="vectorized", factor=8)]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("opts", VARIANTS, ids=lambda o: o.label)
def test_slice_faithful_on_workloads(kind, opts):
    trip = 4 if kind.startswith("kill") else 13
    w = build(WorkloadSpec(kind, trip=trip, generations=4))
    res = instrument(w.fresh_structured(), w.target, opts)
    assert res.ok, res.diagnostic
    n, covered, wrong, _ = hint_check(res.program)
    assert n == covered and wrong == 0
    assert same_behaviour(w.program, res.program)


@pytest.mark.parametrize("cov", [(0, 0), (2, 5), (4, 12), (10, 40)])
def test_coverage_writes_only_its_slots(cov):
    w = build(WorkloadSpec("synthetic", trip=13, generations=3))
    res = instrument(w.fresh_structured(), w.target, InstrumentOptions(coverage=cov))
    n, covered, wrong, iters = hint_check(res.program)
    hi = min(cov[1], 12)
    assert wrong == 0 and iters == set(range(cov[0], hi + 1))
    assert covered == 3 * (hi - cov[0] + 1)


LOOP = """
.region r2 0x1000 0x1200
.region r8 0x3000 0x3100
.data 0x1000 {data}
.data 0x3000 {zeros}
    MOVI r2, 0x1000
    MOVI r8, 0x3000
    MOVI r7, 8
    MOVI r9, {n}
.loop r1, 0, {end} target=T end=E
    MUL r5, r1, r7
    ADD r5, r5, r2
    LD r3, [r5+0]
{extra}
T:
    BNZ r3, Skip
    ADDI r4, r4, 1
Skip:
.endloop
E:
    HALT
"""


def loop_text(n=16, end=None, extra="", seed=0):
    bits = np.random.default_rng(seed).integers(0, 2, 64)
    data = " ".join(f"{b} 0 0 0 0 0 0 0" for b in bits)
    return LOOP.format(data=data, zeros=" ".join(["0"] * 256), n=n, end=n if end is None else end, extra=extra)


def test_store_to_other_region_is_fine():
    res = instrument(loop_text(extra="    MUL r6, r1, r7\n    ADD r6, r6, r8\n    ST [r6+0], r3"), "T")
    assert res.ok
    assert hint_check(res.program)[2] == 0


@pytest.mark.parametrize("extra,code", [
    ("    ST [r5+8], r3", "E_LOOP_CARRIED"),                        # same region as the slice load
    ("    MOVI r6, 0x3000\n    ST [r6+0], r3", "E_LOOP_CARRIED"),     # unbounded store address
    ("    ADD r3, r3, r10\n    ADDI r10, r3, 0", "E_LOOP_CARRIED"),  # accumulator feeds the branch
    ("    ADDI r1, r1, 0", "E_NOT_CANONICAL"),                      # induction written in the body
    ("    BNZ r4, Over\n    ADDI r3, r3, 1\nOver:", "E_SLICE_ESCAPES"),  # control-dependent slice
    (".loop r11, 0, 2\n    ADDI r3, r3, 1\n.endloop", "E_SLICE_ESCAPES"),
])
def test_rejections(extra, code):
    res = instrument(loop_text(extra=extra), "T")
    assert not res.ok and res.diagnostic.code == code
    # the rejected result is the untouched program
    assert res.program.instructions == lower(parse_structured(loop_text(extra=extra))).instructions


def test_missing_target():
    res = instrument(loop_text(), "Nope")
    assert res.diagnostic.code == "E_INSTRUMENT"


def test_nested_target_branch_rejected():
    text = ".loop r1, 0, 2 target=T\n .loop r2, 0, 2\nT:\n  BNZ r3, X\nX:\n .endloop\n.endloop\nHALT\n"
    assert instrument(text, "T").diagnostic.code == "E_NESTED_TARGET"


def test_channel_out_of_range():
    assert not instrument(loop_text(), "T", InstrumentOptions(channel=7)).ok


def test_backslice_contents():
    sp = parse_structured(loop_text(extra="    ADDI r12, r12, 1"))
    loop = locate_target(sp, "T")[0]
    sl = extract_backslice(loop, sp.regions)
    assert [i.op for i in sl.instructions] == ["MUL", "ADD", "LD"]
    assert sl.live_ins == {1, 7, 2} and len(sl.loads) == 1 and not sl.negate


# -- strip mining ------------------------------------------------------------

def big_loop(n, end_reg=False, seed=1):
    bits = np.random.default_rng(seed).integers(0, 2, n)
    lines = [".region r2 0x10000 0x20000"]
    raw = b"".join(int(b).to_bytes(8, "little") for b in bits)
    for i in range(0, len(raw), 64):
        lines.append(f".data {0x10000 + i:#x} " + " ".join(str(x) for x in raw[i:i + 64]))
    lines += ["    MOVI r2, 0x10000", "    MOVI r7, 8", f"    MOVI r9, {n}",
              f".loop r1, 0, {'r9' if end_reg else n} target=T end=E",
              "    MUL r5, r1, r7", "    ADD r5, r5, r2", "    LD r3, [r5+0]",
              "T:", "    BNZ r3, Skip", "    ADDI r4, r4, 1", "Skip:", ".endloop", "E:", "    HALT"]
    return "\n".join(lines) + "\n"


@pytest.mark.parametrize("n,end_reg,cap", [(600, False, 256), (600, True, 256), (100, False, 16), (37, True, 256)])
def test_strip_mine_differential(n, end_reg, cap):
    text = big_loop(n, end_reg)
    res = instrument(text, "T", InstrumentOptions(strip_cap=cap))
    assert res.ok
    instances, covered, wrong, _ = hint_check(res.program)
    assert instances == covered == n and wrong == 0
    assert same_behaviour(lower(parse_structured(text)), res.program)


@given(st.integers(1, 700), st.sampled_from([8, 64, 256]), st.sampled_from(VARIANTS))
@settings(max_examples=25, deadline=None)
def test_strip_mine_property(n, cap, opts):
    text = big_loop(n, end_reg=n % 2 == 0, seed=n)
    res = instrument(text, "T", InstrumentOptions(variant=opts.variant, factor=opts.factor, strip_cap=cap))
    assert res.ok
    instances, covered, wrong, _ = hint_check(res.program)
    assert instances == covered == n and wrong == 0


def test_coverage_on_long_loop_skips_strip_mining():
    res = instrument(big_loop(600), "T", InstrumentOptions(coverage=(200, 255)))
    assert res.ok
    _, covered, wrong, iters = hint_check(res.program)
    assert wrong == 0 and iters == set(range(200, 256))


def test_coverage_past_first_lap_rejected():
    # iteration 44 would read the slot written for iteration 300
    res = instrument(big_loop(600), "T", InstrumentOptions(coverage=(250, 300)))
    assert res.diagnostic.code == "E_INSTRUMENT"


def test_coverage_wider_than_channel_rejected():
    res = instrument(big_loop(600), "T", InstrumentOptions(coverage=(0, 256)))
    assert res.diagnostic.code == "E_INSTRUMENT"


def test_coverage_past_trip_is_empty():
    w = build(WorkloadSpec("synthetic", trip=13, generations=2))
    res = instrument(w.fresh_structured(), w.target, InstrumentOptions(coverage=(20, 30)))
    assert res.ok and hint_check(res.program)[1] == 0


def test_strip_mined_program_predicts_perfectly():
    res = instrument(big_loop(600), "T")
    s = run_sim(res.program, make_predictor("tage"), CoreConfig(debug=True)).stats
    assert s.pc_mispredicts(res.program.labels["T"]) == 0 and s.wrong_hints == 0


@pytest.mark.parametrize("n", [2, 10, 40])
def test_dynamic_trip_with_coverage_clamps_at_run_time(n):
    text = big_loop(n, end_reg=True)
    res = instrument(text, "T", InstrumentOptions(coverage=(3, 20)))
    assert res.ok
    _, covered, wrong, iters = hint_check(res.program)
    assert wrong == 0 and iters == set(range(3, min(20, n - 1) + 1))
    assert same_behaviour(lower(parse_structured(text)), res.program)


# -- overhead -------------------------------------------------------------------

def preexec_overhead(text, opts):
    base = execute(lower(parse_structured(text))).instruction_count
    return execute(instrument(text, "T", opts).program).instruction_count - base


def test_overhead_ordering_256():
    text = big_loop(256)
    plain = preexec_overhead(text, InstrumentOptions())
    unroll = preexec_overhead(text, InstrumentOptions(variant="unrolled", factor=4))
    vec = preexec_overhead(text, InstrumentOptions(variant="vectorized", factor=8))
    assert vec < unroll < plain


def test_overhead_grows_with_coverage():
    text = big_loop(256)
    sizes = [preexec_overhead(text, InstrumentOptions(coverage=(0, m))) for m in (15, 63, 127, 255)]
    assert sizes == sorted(sizes) and len(set(sizes)) == 4


# -- placement -------------------------------------------------------------------

def test_earliest_hoists_above_independent_code():
    w = build(WorkloadSpec("synthetic", trip=8, generations=2, filler=50))
    early = instrument(w.fresh_structured(), "T", InstrumentOptions(placement="earliest"))
    late = instrument(w.fresh_structured(), "T", InstrumentOptions(placement="late"))
    assert early.placement_index < late.placement_index
    assert same_behaviour(w.program, early.program) and same_behaviour(w.program, late.program)


# -- options ----------------------------------------------------------------------

@pytest.mark.parametrize("text,want", [("plain", ("plain", 1)), ("unroll:4", ("unrolled", 4)),
                                       ("unrolled(2)", ("unrolled", 2)), ("vec:8", ("vectorized", 8)),
                                       ("vectorized(16)", ("vectorized", 16))])
def test_parse_variant(text, want):
    assert parse_variant(text) == want


@pytest.mark.parametrize("text", ["plain:2", "unroll", "vec:x", "simd:4"])
def test_parse_variant_errors(text):
    with pytest.raises(ValueError):
        parse_variant(text)


def test_parse_range():
    assert parse_range("3:9") == (3, 9) and parse_range("0-4") == (0, 4)
    with pytest.raises(ValueError):
        parse_range("7")


@pytest.mark.parametrize("kw", [{"variant": "simd"}, {"variant": "unrolled", "factor": 1},
                                {"variant": "vectorized", "factor": 6}, {"coverage": (5, 2)},
                                {"strip_cap": 300}, {"placement": "middle"}])
def test_option_validation(kw):
    with pytest.raises(ValueError):
        InstrumentOptions(**kw)


def test_instrument_error_is_value_error():
    assert issubclass(InstrumentError, ValueError)
