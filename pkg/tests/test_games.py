import numpy as np
import pytest

import oracles
from fairmech.errors import SizeCapError, StructuralError
from fairmech.fixtures import corpus, random_instance
from fairmech.games import (
    CoalitionalGame, best_game, is_submodular, is_supermodular, marg_game, shapley_exact,
    shapley_sampled, shapley_weights,
)
from fairmech.matching import OptCache
from fairmech.sampling import SamplingConfig


def test_fixture_worths(fstar):
    s, t = fstar
    g = best_game(s, t)
    assert g.worth(()) == 0
    assert g.worth({"r1"}) == 26 and g.worth({"r2"}) == 26
    assert g.worth({"r1", "r2"}) == 51
    m = marg_game(s, t)
    assert m.worth({"r1"}) == 25 and m.worth({"r2"}) == 25
    assert m.worth({"r1", "r2"}) == 51


def test_fixture_shapley(fstar):
    s, t = fstar
    assert shapley_exact(best_game(s, t)).values == {"r1": 25.5, "r2": 25.5}
    assert shapley_exact(marg_game(s, t)).values == {"r1": 25.5, "r2": 25.5}


def test_dual_relation():
    for s, t in corpus(seed=3, size=20):
        c = OptCache(s, t)
        b, m = best_game(s, t, c), marg_game(s, t, c)
        full = (1 << s.n) - 1
        for mask in range(1 << s.n):
            assert m.worth_mask(mask) == pytest.approx(b.worth_mask(full) - b.worth_mask(full ^ mask))


def test_shapley_matches_permutation_oracle():
    rng = np.random.default_rng(31)
    for _ in range(25):
        s, t = random_instance(rng, max_agents=4, max_goods=5)
        g = best_game(s, t)
        ref = oracles.shapley_by_permutations(s.agents, g.worth)
        got = shapley_exact(g)
        for a in s.agents:
            assert got[a] == pytest.approx(ref[a], abs=1e-9)


def test_best_and_marg_shapley_coincide():
    for s, t in corpus(seed=13, size=30):
        c = OptCache(s, t)
        b = shapley_exact(best_game(s, t, c))
        m = shapley_exact(marg_game(s, t, c))
        for a in s.agents:
            assert b[a] == pytest.approx(m[a], abs=1e-9)
        assert b.total() == pytest.approx(c.value((1 << s.n) - 1), abs=1e-9)


def test_modularity():
    for s, t in corpus(seed=23, size=30, max_agents=4):
        assert is_submodular(best_game(s, t))
        assert is_supermodular(marg_game(s, t))


def test_additive_game_is_modular():
    w = {"a": 1.0, "b": 2.5, "c": -1.0}
    g = CoalitionalGame.from_function(w, lambda C: sum(w[p] for p in C))
    assert is_submodular(g) and is_supermodular(g)
    assert shapley_exact(g).values == pytest.approx(w)


def test_best_dominates_marg():
    for s, t in corpus(seed=29, size=20):
        c = OptCache(s, t)
        b, m = best_game(s, t, c), marg_game(s, t, c)
        for mask in range(1 << s.n):
            assert m.worth_mask(mask) <= b.worth_mask(mask) + 1e-9


def test_dummy_and_symmetry():
    g = CoalitionalGame.from_function("xyz", lambda C: 10.0 if {"x", "y"} <= C else 0.0)
    v = shapley_exact(g)
    assert v["z"] == 0
    assert v["x"] == v["y"] == 5


def test_weights_sum_to_one_per_player():
    from math import comb
    for n in range(1, 12):
        w = shapley_weights(n)
        assert sum(comb(n - 1, k - 1) * w[k] for k in range(1, n + 1)) == pytest.approx(1.0)


def test_caps():
    g = CoalitionalGame([f"p{k}" for k in range(21)], lambda m: 0.0)
    with pytest.raises(SizeCapError):
        shapley_exact(g)
    g6 = CoalitionalGame([f"p{k}" for k in range(6)], lambda m: 0.0)
    with pytest.raises(SizeCapError):
        is_submodular(g6)
    with pytest.raises(StructuralError):
        g6.worth({"nobody"})


def test_sampled_close_and_deterministic(fstar):
    s, t = fstar
    g = best_game(s, t)
    cfg = SamplingConfig(m=400, repetitions=5, seed=7)
    a = shapley_sampled(g, cfg)
    assert a.values == shapley_sampled(g, cfg, workers=3).values
    # two players: each order gives 26 or 25 to r1
    assert 25 <= a["r1"] <= 26
    assert a.total() == pytest.approx(51)


def test_sampled_efficiency_every_repetition():
    rng = np.random.default_rng(2)
    s, t = random_instance(rng, max_agents=4, min_agents=4)
    g = best_game(s, t)
    cfg = SamplingConfig(m=50, repetitions=1, seed=1)
    assert shapley_sampled(g, cfg).total() == pytest.approx(g.worth(s.agents))
