import numpy as np
import pytest

from boss_sim.predictors import make_predictor

KINDS = ["always_taken", "bimodal", "gshare", "tage"]


def run(pred, pcs, outcomes):
    wrong = 0
    for pc, t in zip(pcs, outcomes):
        wrong += pred.predict(pc) != bool(t)
        pred.update(pc, bool(t))
    return wrong


@pytest.mark.parametrize("kind", KINDS)
def test_deterministic(kind):
    rng = np.random.default_rng(1)
    pcs = rng.integers(0, 64, 3000)
    outs = rng.random(3000) < 0.6
    a, b = make_predictor(kind, seed=5), make_predictor(kind, seed=5)
    assert run(a, pcs, outs) == run(b, pcs, outs)
    assert a.fingerprint() == b.fingerprint()


@pytest.mark.parametrize("kind", ["bimodal", "gshare", "tage"])
def test_learns_biased_branch(kind):
    p = make_predictor(kind)
    wrong = run(p, [12] * 1000, [1] * 1000)
    # gshare pays roughly one miss per history bit while the history fills
    assert wrong <= 16


@pytest.mark.parametrize("kind", ["gshare", "tage"])
def test_learns_alternating_pattern(kind):
    p = make_predictor(kind)
    outs = [i % 2 for i in range(4000)]
    run(p, [12] * 2000, outs[:2000])
    assert run(p, [12] * 2000, outs[2000:]) < 40


def test_bimodal_cannot_learn_alternation():
    p = make_predictor("bimodal")
    assert run(p, [12] * 2000, [i % 2 for i in range(2000)]) > 800


@pytest.mark.parametrize("kind", KINDS)
def test_random_outcomes_near_half(kind):
    rng = np.random.default_rng(7)
    outs = rng.random(5000) < 0.5
    rate = run(make_predictor(kind), [40] * 5000, outs) / 5000
    assert 0.44 < rate < 0.56


def test_sizes_must_be_powers_of_two():
    with pytest.raises(ValueError):
        make_predictor("bimodal", entries=1000)
    with pytest.raises(ValueError):
        make_predictor("tage", base_entries=3000)


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_predictor("perceptron")


def test_aliases():
    assert make_predictor("TAGE-lite").kind == "tage"
    assert make_predictor("taken").kind == "always_taken"


def test_fingerprint_tracks_state():
    p = make_predictor("bimodal")
    f0 = p.fingerprint()
    p.update(3, False)
    assert p.fingerprint() != f0
