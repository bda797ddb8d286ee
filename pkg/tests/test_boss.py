import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import boss_model
from boss_sim.boss import BossUnit, ChannelState, replay, storage_bytes
from boss_sim.ir import END_NONE

T, T2, E = 100, 104, 120


def opened(iterations=256):
    u = BossUnit(4, iterations)
    u.open_channel(0, [T], E)
    return u


# -- storage ---------------------------------------------------------------

def test_storage_budget_values():
    assert storage_bytes(4, 256) == 329
    assert storage_bytes(1, 256) == 83


def test_storage_by_hand_one_channel():
    # 256 slots * 2 bits = 64 B, two 8 B pcs, two 8-bit iteration counters, two gen bits
    assert storage_bytes(1, 256) == 64 + 16 + 2 + 1


@pytest.mark.parametrize("ch,it", [(0, 256), (4, 0), (-1, 8)])
def test_storage_rejects_nonpositive(ch, it):
    with pytest.raises(ValueError):
        storage_bytes(ch, it)


@given(st.integers(1, 16), st.integers(1, 1024))
def test_storage_monotone(ch, it):
    assert storage_bytes(ch + 1, it) > storage_bytes(ch, it)
    assert storage_bytes(ch, it + 1) >= storage_bytes(ch, it)


# -- configuration -----------------------------------------------------------

def test_config_word_opens_channel():
    u = BossUnit()
    u.config_write(2, (E << 32) | T)
    s = u.read_state(2)
    assert s.open and s.target_pcs == (T,) and s.end_pc == E
    assert u.is_target(T) and u.is_end(E)


def test_config_without_end():
    u = BossUnit()
    u.config_write(0, (END_NONE << 32) | T)
    assert u.read_state(0).end_pc is None
    assert not u.is_end(E)


def test_same_end_adds_target_up_to_four():
    u = BossUnit()
    for pc in (T, T2, 108, 112, 116):
        u.config_write(0, (E << 32) | pc)
    assert u.read_state(0).target_pcs == (T, T2, 108, 112)


def test_different_end_reopens_and_clears():
    u = opened()
    u.write_outcome(0, 0, True)
    u.config_write(0, (200 << 32) | T2)
    s = u.read_state(0)
    assert s.target_pcs == (T2,) and s.end_pc == 200 and not any(s.valid)


def test_minus_one_closes():
    u = opened()
    epoch = u.epoch
    u.config_write(0, -1)
    assert not u.read_state(0).open and not u.enabled and u.epoch == epoch + 1
    assert u.consume_prediction(T) is None


def test_write_to_closed_channel_is_logged_and_dropped():
    u = BossUnit()
    u.write_outcome(1, 3, True)
    assert u.log[-1].kind == "write_ignored"
    assert not any(u.read_state(1).valid)


def test_bad_channel_index():
    with pytest.raises(IndexError):
        BossUnit(2).open_channel(2, [T], E)


# -- consume / commit ----------------------------------------------------------

def test_hit_then_commit_invalidates():
    u = opened()
    u.write_outcome(0, 0, True)
    u.write_outcome(0, 1, False)
    assert u.consume_prediction(T) is True
    assert u.consume_prediction(T) is False
    assert u.consume_prediction(T) is None        # slot 2 never written
    u.notify_commit(T)
    assert u.read_state(0).valid[0] == 0 and u.read_state(0).valid[1] == 1


def test_slots_rotate():
    u = opened(iterations=8)
    u.write_outcome(0, 9, True)                  # slot 1
    u.consume_prediction(T)
    assert u.consume_prediction(T) is True


def test_end_fetch_flips_consumer_generation():
    u = opened()
    u.consume_prediction(T)
    u.notify_end_fetch(E)
    s = u.read_state(0)
    assert (s.consumer_iter, s.consumer_gen) == (0, 1)
    assert s.iter_stack == ((1, 0),)


def test_producer_writes_after_end_commit_use_next_generation():
    u = opened()
    u.notify_end_fetch(E)
    u.write_outcome(0, 0, True)                  # still generation 0 on the producer side
    assert u.consume_prediction(T) is None
    u.notify_squash([("branch", T)])
    u.notify_commit(E)
    u.write_outcome(0, 0, True)
    assert u.consume_prediction(T) is True


def test_early_exit_leftovers_are_discarded():
    u = opened()
    for s in range(4):
        u.write_outcome(0, s, True)
    for _ in range(2):                           # loop leaves after two iterations
        u.consume_prediction(T)
        u.notify_commit(T)
    u.notify_end_fetch(E)
    u.notify_commit(E)
    assert not any(u.read_state(0).valid)
    assert any(e.kind == "discard" and e.detail == 2 for e in u.log)


def test_second_end_in_flight_desyncs_until_commit():
    u = opened()
    u.notify_end_fetch(E)
    u.notify_end_fetch(E)
    assert u.read_state(0).desync
    u.write_outcome(0, 0, True)
    assert u.consume_prediction(T) is None
    u.notify_squash([("branch", T), ("end", E)])
    assert not u.read_state(0).desync


def test_squash_end_with_empty_stack_sets_lost_until_end_commit():
    u = opened()
    u.notify_end_fetch(E)
    u.notify_commit(E)                           # frame retired
    u.notify_squash([("end", E)])
    assert u.read_state(0).desync
    u.notify_end_fetch(E)
    u.notify_commit(E)
    assert not u.read_state(0).desync


def test_unknown_squash_kind():
    with pytest.raises(ValueError):
        opened().notify_squash([("load", 3)])


# -- log and replay --------------------------------------------------------------

def _random_drive(u, rng, n):
    for _ in range(n):
        r = rng.random()
        if r < 0.3:
            u.write_outcome(0, rng.randrange(8), rng.random() < 0.5)
        elif r < 0.55:
            u.consume_prediction(T)
        elif r < 0.65:
            u.notify_end_fetch(E)
        elif r < 0.8:
            u.notify_squash([("branch", T)] if rng.random() < 0.7 else [("end", E)])
        elif r < 0.95:
            u.notify_commit(T if rng.random() < 0.8 else E)
        else:
            u.config_write(0, (E << 32) | rng.choice((T, T2)))
        u.now += 1


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60)
def test_replay_reproduces_state(seed):
    u = opened(iterations=16)
    _random_drive(u, random.Random(seed), 200)
    r = replay(u.log, 4, 16)
    for ch in range(4):
        assert r.read_state(ch) == u.read_state(ch)


def test_log_lines_have_six_fields():
    u = opened()
    u.write_outcome(0, 0, True)
    u.consume_prediction(T)
    lines = u.dump_log().splitlines()
    assert lines and all(len(line.split()) == 6 for line in lines)


def test_read_state_is_a_snapshot():
    u = opened()
    s = u.read_state(0)
    u.write_outcome(0, 0, True)
    assert isinstance(s, ChannelState) and s.valid[0] == 0


# -- invariants under random pipelines ------------------------------------------------

@given(st.integers(0, 2**32 - 1))
@settings(max_examples=300, deadline=None)
def test_pipeline_invariants(seed):
    v = boss_model.Violations()
    boss_model.run_case(random.Random(seed), v, 256)
    assert v.total == 0, v.notes


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_pipeline_invariants_small_table(seed):
    v = boss_model.Violations()
    boss_model.run_case(random.Random(seed), v, 16)
    assert v.total == 0, v.notes


def test_model_catches_missing_discard(monkeypatch):
    orig = BossUnit.notify_commit

    def no_discard(self, pc):
        if pc in self._ends:
            for ch in self._ends[pc]:
                c = self.channels[ch]
                c.pgen ^= 1
                c.commit_iter = 0
                if c.stack:
                    c.stack.pop(0)
                c.lost = False
            return
        orig(self, pc)

    monkeypatch.setattr(BossUnit, "notify_commit", no_discard)
    v = boss_model.run_cases(400, seed=3)
    assert v.wrong_value > 0


def test_model_catches_missing_squash_undo(monkeypatch):
    monkeypatch.setattr(BossUnit, "notify_squash", lambda self, events: None)
    v = boss_model.run_cases(50, seed=4)
    assert v.squash_mismatch > 0
