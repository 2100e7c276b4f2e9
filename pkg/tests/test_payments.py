import math

import numpy as np
import pytest

import oracles
from fairmech.audit import check_no_punishment, random_allocation, random_declaration
from fairmech.errors import ContractViolation, SizeCapError, StructuralError
from fairmech.fixtures import OVERSTATE_R1, S_HAT, SIGMA_STAR, corpus, random_instance
from fairmech.games import best_game, marg_game, shapley_exact
from fairmech.matching import OptCache, enumerate_optima, solve_optimal
from fairmech.model import Allocation, Scenario, TypeVector, VerifiedView, verify
from fairmech.payments import (
    ExactRule, divide_all, divide_owner, divide_proj, make_rule, pay_exact, pay_normalized,
    pay_sampled, run_mechanism, utility_of,
)
from fairmech.sampling import SamplingConfig


def _exact_at(s, t, pi):
    return pay_exact(s, pi, t, verify(t, pi))


def test_fixture_exact(fstar):
    s, t = fstar
    rep = _exact_at(s, t, SIGMA_STAR)
    assert rep.utilities == {"r1": 25.5, "r2": 25.5}
    assert rep.budget() == 0
    assert rep.payments == {"r1": 0.5, "r2": -0.5}


def test_fixture_other_optimum(fstar):
    s, t = fstar
    rep = _exact_at(s, t, S_HAT)
    assert rep.utilities == {"r1": 25.5, "r2": 25.5}
    assert rep.payments == {"r1": -0.5, "r2": 0.5}


def test_single_agent_gets_its_value():
    s = Scenario(["a"], ["x", "y"], {"a": 1})
    t = TypeVector({"a": {"x": 3, "y": 5}})
    pi, view, rep = run_mechanism(s, t, t, ExactRule())
    assert rep.payments == {"a": 0.0}
    assert rep.utilities == {"a": 5.0}


def test_matches_coalition_sum_definition():
    rng = np.random.default_rng(41)
    for _ in range(40):
        s, t = random_instance(rng, max_agents=3, max_goods=5)
        w = random_declaration(s, t, rng)
        pi = solve_optimal(s, w) if rng.random() < 0.5 else random_allocation(s, rng)
        view = verify(t, pi)
        xi = pay_exact(s, pi, w, view).diagnostics["xi"]
        ref = oracles.xi_by_definition(s, pi, w, t)
        for a in s.agents:
            assert xi[a] == pytest.approx(ref[a], abs=1e-9)


def test_truthful_utility_is_shapley_of_best():
    for s, t in corpus(seed=51, size=30):
        pi = solve_optimal(s, t)
        u = _exact_at(s, t, pi).utilities
        sv = shapley_exact(best_game(s, t))
        for a in s.agents:
            assert u[a] == pytest.approx(sv[a], abs=1e-9)


def test_budget_balance_at_truth():
    for s, t in corpus(seed=61, size=40):
        pi = solve_optimal(s, t)
        assert abs(_exact_at(s, t, pi).budget()) <= 1e-9


def test_group_bounds_and_individual_rationality():
    for s, t in corpus(seed=71, size=30):
        pi = solve_optimal(s, t)
        u = _exact_at(s, t, pi).utilities
        c = OptCache(s, t)
        b, m = best_game(s, t, c), marg_game(s, t, c)
        for mask in range(1 << s.n):
            tot = math.fsum(u[a] for a in s.coalition_of(mask))
            assert m.worth_mask(mask) - 1e-9 <= tot <= b.worth_mask(mask) + 1e-9
        assert all(x >= -1e-9 for x in u.values())


def test_allocation_independence():
    for s, t in corpus(seed=81, size=30, max_goods=5):
        ref = None
        for pi in enumerate_optima(s, t, limit=50):
            u = _exact_at(s, t, pi).utilities
            if ref is None:
                ref = u
            for a in s.agents:
                assert u[a] == pytest.approx(ref[a], abs=1e-9)


def test_ignores_scores_of_unallocated_goods(fstar):
    s, t = fstar
    pi = SIGMA_STAR
    view = verify(t, pi)
    w2 = t.with_scores("r1", {"p3": 100, "p6": 4}).with_scores("r2", {"p3": 50})
    assert pay_exact(s, pi, t, view).payments == pay_exact(s, pi, w2, view).payments


def test_no_punishment_bit_identical():
    rng = np.random.default_rng(91)
    for _ in range(40):
        s, t = random_instance(rng)
        w = random_declaration(s, t, rng)
        pi = random_allocation(s, rng)
        view = verify(t, pi)
        p = pay_exact(s, pi, w, view).payments
        for a in s.agents:
            q = pay_exact(s, pi, w.with_agent(a, t.row(a)), view).payments
            assert np.float64(p[a]).tobytes() == np.float64(q[a]).tobytes()


def test_literal_variant_breaks_no_punishment():
    s, t = corpus(seed=2024, size=2)[1]
    res = check_no_punishment(s, t, ExactRule(literal=True), trials=20)
    assert not res.passed
    assert check_no_punishment(s, t, ExactRule(), trials=20).passed


def test_literal_agrees_at_truth(fstar):
    s, t = fstar
    rep = pay_exact(s, SIGMA_STAR, t, verify(t, SIGMA_STAR), literal=True)
    assert rep.utilities == {"r1": 25.5, "r2": 25.5}


def test_backends_give_identical_payments():
    for s, t in corpus(seed=5, size=15):
        pi = solve_optimal(s, t)
        view = verify(t, pi)
        a = pay_exact(s, pi, t, view).payments
        b = pay_exact(s, pi, t, view, backend="ssp").payments
        for k in a:
            assert a[k] == pytest.approx(b[k], abs=1e-9)


def test_contract_errors(fstar):
    s, t = fstar
    view = verify(t, S_HAT)
    with pytest.raises(ContractViolation):
        pay_exact(s, SIGMA_STAR, t, view)
    with pytest.raises(ContractViolation):
        view.score("r1", "p2")
    big = Scenario([f"a{k}" for k in range(19)], ["g"], {f"a{k}": 1 for k in range(19)})
    tb = TypeVector({a: {} for a in big.agents})
    with pytest.raises(SizeCapError):
        pay_exact(big, Allocation(), tb, verify(tb, Allocation()))


# --- sampled and normalized ------------------------------------------------

def test_sampled_fixture_close(fstar):
    s, t = fstar
    cfg = SamplingConfig.from_accuracy(2, seed=3)
    assert (cfg.m, cfg.repetitions) == (800, 13)
    rep = pay_sampled(s, SIGMA_STAR, t, verify(t, SIGMA_STAR), cfg)
    for a in s.agents:
        assert abs(rep.utilities[a] - 25.5) <= 0.1 * 25.5
    assert rep.sampling["seed"] == 3


def test_sampled_deterministic_across_workers():
    rng = np.random.default_rng(1)
    s, t = random_instance(rng, max_agents=4, min_agents=4)
    pi = solve_optimal(s, t)
    view = verify(t, pi)
    cfg = SamplingConfig(m=300, repetitions=5, seed=11)
    a = pay_sampled(s, pi, t, view, cfg).payments
    b = pay_sampled(s, pi, t, view, cfg, workers=3).payments
    assert a == b


def test_sampled_ignores_unallocated_and_truth_substitution():
    rng = np.random.default_rng(12)
    cfg = SamplingConfig(m=64, repetitions=3, seed=2)
    for _ in range(10):
        s, t = random_instance(rng)
        w = random_declaration(s, t, rng)
        pi = random_allocation(s, rng)
        view = verify(t, pi)
        p = pay_sampled(s, pi, w, view, cfg).payments
        for a in s.agents:
            q = pay_sampled(s, pi, w.with_agent(a, t.row(a)), view, cfg).payments
            assert np.float64(p[a]).tobytes() == np.float64(q[a]).tobytes()


def test_sampled_mean_is_unbiased():
    rng = np.random.default_rng(7)
    s, t = random_instance(rng, max_agents=4, min_agents=4, max_goods=6, min_goods=4)
    pi = solve_optimal(s, t)
    view = verify(t, pi)
    target = _exact_at(s, t, pi).utilities
    runs = np.array([[pay_sampled(s, pi, t, view, SamplingConfig(m=1, repetitions=1, seed=k)).utilities[a]
                      for a in s.agents] for k in range(1000)])
    mean, se = runs.mean(axis=0), runs.std(axis=0, ddof=1) / math.sqrt(len(runs))
    for j, a in enumerate(s.agents):
        assert abs(mean[j] - target[a]) <= 3 * se[j] + 1e-9


def test_normalized_budget_balance():
    cfg = SamplingConfig(m=40, repetitions=3, seed=5)
    for s, t in corpus(seed=17, size=30):
        pi = solve_optimal(s, t)
        rep = pay_normalized(s, pi, t, verify(t, pi), cfg)
        assert abs(rep.budget()) <= 1e-9


def test_normalized_degenerate_ratio():
    s = Scenario(["a", "b"], ["x"], {"a": 1, "b": 1})
    t = TypeVector({"a": {"x": 0}, "b": {}})
    pi = solve_optimal(s, t)
    rep = pay_normalized(s, pi, t, verify(t, pi), SamplingConfig(m=10, repetitions=1))
    assert rep.diagnostics["R"] == 1.0
    assert rep.payments == {"a": 0.0, "b": 0.0}


def test_reverse_sign_flips(fstar):
    s, t = fstar
    view = verify(t, SIGMA_STAR)
    cfg = SamplingConfig(m=100, repetitions=3, seed=1)
    a = pay_normalized(s, SIGMA_STAR, t, view, cfg).payments
    b = pay_normalized(s, SIGMA_STAR, t, view, cfg, reverse_sign=True).payments
    assert all(a[k] == -b[k] for k in a)


# --- baselines ---------------------------------------------------------------

def test_proj(fstar):
    s, t = fstar
    assert divide_proj(SIGMA_STAR, verify(t, SIGMA_STAR)) == {"r1": 25, "r2": 26}
    assert divide_proj(S_HAT, verify(t, S_HAT)) == {"r1": 26, "r2": 25}


def test_owner(fstar):
    s, t = fstar
    assert divide_owner(S_HAT, verify(t, S_HAT))["r2"] == 33
    d = t.with_scores("r1", OVERSTATE_R1)
    documented = Allocation({"r1": {"p1", "p2", "p3"}, "r2": {"p5", "p7", "p8"}})
    assert documented in enumerate_optima(s, d)
    assert divide_owner(documented, verify(t, documented))["r1"] == 28


def test_owner_single_author_equals_proj():
    s = Scenario(["a", "b"], ["x", "y", "z"], {"a": 2, "b": 1})
    t = TypeVector({"a": {"x": 4, "y": 2}, "b": {"z": 7}})
    pi = solve_optimal(s, t)
    view = verify(t, pi)
    assert divide_owner(pi, view) == divide_proj(pi, view)


def test_owner_needs_an_author():
    s = Scenario(["a"], ["x"], {"a": 1})
    t = TypeVector({"a": {"x": 0}})
    pi = Allocation({"a": {"x"}})
    with pytest.raises(StructuralError):
        divide_owner(pi, verify(t, pi))


def test_all(fstar):
    s, t = fstar
    view = verify(t, SIGMA_STAR)
    sh = divide_all(SIGMA_STAR, view, t)
    assert sh["r1"] == pytest.approx(40 / 81 * 25)
    assert sh["r2"] == pytest.approx(41 / 81 * 26)
    var = divide_all(SIGMA_STAR, view, t, variant=True)
    assert var["r1"] == pytest.approx(40 / 81 * 51)
    assert sum(var.values()) == pytest.approx(51)
    with pytest.raises(StructuralError):
        divide_all(SIGMA_STAR, view, TypeVector({"r1": {}, "r2": {}}))


def test_division_rules_as_payments(fstar):
    s, t = fstar
    pi, view, rep = run_mechanism(s, t, t, make_rule("proj"))
    assert rep.payments == {"r1": 0.0, "r2": 0.0}
    assert utility_of(rep, view, pi) == rep.utilities
    with pytest.raises(ValueError):
        make_rule("sampled")
    with pytest.raises(ValueError):
        make_rule("nope")
