import json

import numpy as np
import pytest

from fairmech import io
from fairmech.audit import (
    CHECKS, DeviationSpace, check_budget_balance, check_envy_freeness, check_fairness,
    check_implementability, check_no_punishment, check_pareto, check_sampler_accuracy,
    check_truthfulness, named_deviations, run_checks, sampler_bound,
)
from fairmech.errors import SizeCapError
from fairmech.fixtures import OVERSTATE_R1, UNDERSTATE_R1, vqr8_restricted
from fairmech.payments import make_rule, run_mechanism
from fairmech.sampling import SamplingConfig

NAMED = named_deviations({"r1": [UNDERSTATE_R1, OVERSTATE_R1]})


def _space():
    return DeviationSpace(named=NAMED)


def test_exact_passes_everything_but_literal_strict(fstar):
    s, t = fstar
    rule = make_rule("exact")
    results = run_checks(s, t, rule, [c for c in CHECKS if c != "sampler"], trials=20, space=_space())
    assert all(r.passed for r in results), [r.check for r in results if not r.passed]
    assert not check_fairness(s, t, rule, strict="value").passed
    assert check_fairness(s, t, rule, strict="off").passed


def test_literal_strict_counterexample(fstar):
    s, t = fstar
    r = check_fairness(s, t, make_rule("exact"), strict="value")
    cex = r.counterexample
    assert cex["utilities_at_alternative"] == [25.5, 25.5]
    with pytest.raises(ValueError):
        check_fairness(s, t, make_rule("exact"), strict="bogus")


def test_proj_fails_truthfulness_by_understating(fstar):
    s, t = fstar
    r = check_truthfulness(s, t, make_rule("proj"), _space())
    assert not r.passed
    cex = r.counterexample
    assert cex["agent"] == "r1" and cex["deviation"] == {"p2": 2.0, "p3": 2.0}
    assert (cex["truthful_utility"], cex["deviating_utility"]) == (25, 26)


def test_owner_fails_truthfulness_by_overstating(fstar):
    s, t = fstar
    r = check_truthfulness(s, t, make_rule("owner"), _space())
    assert not r.passed
    assert r.counterexample["deviation"] == {"p2": 9.0, "p3": 9.0}
    assert r.counterexample["deviating_utility"] > r.counterexample["truthful_utility"]


def test_grid_alone_finds_proj_manipulation(fstar):
    s, t = fstar
    assert not check_truthfulness(s, t, make_rule("proj")).passed


def test_counterexample_replays(fstar):
    s, t = fstar
    rule = make_rule("proj")
    cex = check_truthfulness(s, t, rule, _space()).counterexample
    doc = json.loads(json.dumps(cex["scenario"]))
    f = io.from_dict(doc)
    _, _, rep = run_mechanism(f.scenario, f.declared, f.true, rule)
    assert rep.utilities[cex["agent"]] == cex["deviating_utility"]


def test_baseline_catalogue(fstar):
    s, t = fstar
    verdicts = {}
    for name in ("proj", "owner", "all"):
        rs = run_checks(s, t, make_rule(name), ["truthfulness", "budget", "fairness", "envy", "pareto",
                                                  "implementability", "no-punishment"],
                        trials=20, space=_space())
        verdicts[name] = {r.check: r.passed for r in rs}
    assert verdicts["proj"] == {"truthfulness": False, "budget": True, "fairness": False, "envy": True,
                                "pareto": True, "implementability": True, "no-punishment": True}
    assert not verdicts["owner"]["truthfulness"] and not verdicts["owner"]["fairness"]
    for c in ("truthfulness", "budget", "fairness", "implementability", "no-punishment"):
        assert not verdicts["all"][c], c


def test_restricted_fixture():
    s, t = vqr8_restricted()
    exact = make_rule("exact")
    assert check_fairness(s, t, exact).passed
    assert check_envy_freeness(s, t, exact).passed
    assert check_pareto(s, t, exact).passed
    assert not check_fairness(s, t, exact, strict="value").passed
    proj = make_rule("proj")
    assert check_pareto(s, t, proj).passed


def test_budget_tolerance_for_sampled(fstar):
    s, t = fstar
    cfg = SamplingConfig(m=50, repetitions=3, seed=1)
    r = check_budget_balance(s, t, make_rule("sampled", cfg))
    assert r.tolerance == pytest.approx(0.1 * 51 + 1e-9)
    assert r.passed
    assert check_budget_balance(s, t, make_rule("normalized", cfg)).passed


def test_implementability_and_no_punishment_for_sampled(fstar):
    s, t = fstar
    rule = make_rule("sampled", SamplingConfig(m=30, repetitions=3, seed=4))
    assert check_implementability(s, t, rule, trials=10).passed
    assert check_no_punishment(s, t, rule, trials=10).passed


def test_sampler_accuracy_default(fstar):
    s, t = fstar
    r = check_sampler_accuracy(s, t, SamplingConfig.from_accuracy(2, seed=0), trials=40)
    assert r.passed
    assert r.details["failure_rate"] <= r.details["bound"]


def test_sampler_detects_a_starved_config():
    # four agents with very unequal contributions; one sample cannot be
    # within 10% on every agent most of the time
    from fairmech.model import Scenario, TypeVector
    s = Scenario(["a", "b", "c", "d"], ["x", "y", "z"], {a: 1 for a in "abcd"})
    t = TypeVector({"a": {"x": 10, "y": 9}, "b": {"x": 9, "y": 1, "z": 3},
                    "c": {"y": 8, "z": 5}, "d": {"z": 4, "x": 2}})
    r = check_sampler_accuracy(s, t, SamplingConfig(m=1, repetitions=1, seed=0), trials=60)
    assert not r.passed
    assert r.counterexample["first_failure"] is not None


def test_sampler_bound():
    assert sampler_bound(0.25, 200) == pytest.approx(0.25 + 3 * np.sqrt(0.25 * 0.75 / 200))


def test_deviation_space():
    from fairmech.model import TypeVector
    t = TypeVector({"a": {"x": 2, "y": 0}})
    sp = DeviationSpace()
    g = dict(sp.grid(t, "a", ["x", "y", "z"]))
    assert g["x"] == [-1, 0, 1, 2, 3, 5]
    assert g["y"] == [-1, 0, 1, 3]
    assert "z" not in g
    devs = sp.deviations(t, "a", ["x", "y", "z"])
    assert devs[0] == {"x": 2, "y": 0}
    assert len(devs) == 1 + 24
    small = DeviationSpace(max_combinations=5, seed=3)
    d1, d2 = small.deviations(t, "a", ["x", "y"]), small.deviations(t, "a", ["x", "y"])
    assert d1 == d2 and len(d1) == 6


def test_exhaustive_cap():
    from fairmech.model import Scenario, TypeVector
    s = Scenario(["a", "b", "c"], [f"g{k}" for k in range(12)], {"a": 4, "b": 4, "c": 4})
    t = TypeVector({a: {} for a in s.agents})
    with pytest.raises(SizeCapError):
        check_pareto(s, t, make_rule("exact"))


def test_unknown_check(fstar):
    s, t = fstar
    with pytest.raises(ValueError):
        run_checks(s, t, make_rule("exact"), ["nope"])


def test_result_serialisation(fstar):
    s, t = fstar
    d = check_budget_balance(s, t, make_rule("exact")).to_dict()
    assert d["verdict"] == "pass" and d["counterexample"] is None
    json.dumps(d)
