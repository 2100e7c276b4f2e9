"""Mechanised property checks for allocation + payment rules.

Each check returns an AuditResult. Failures carry a replayable
counterexample: the scenario, the score vectors involved and the seed.
The truthfulness check searches a finite deviation grid, so a pass is
evidence, not proof.
"""
from __future__ import annotations

import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import io
from .errors import SizeCapError
from .games import best_game, shapley_exact
from .matching import OptCache, count_feasible, feasible_allocations, solve_optimal
from .model import Allocation, Scenario, TypeVector, value, verify
from .payments import Rule, SamplingConfig, pay_sampled
from .sampling import derive_seed

TOL = 1e-9
MAX_ENUMERATED = 200_000
SAMPLER_CAP = 10


@dataclass
class AuditResult:
    check: str
    passed: bool
    trials: int
    tolerance: float
    counterexample: dict | None = None
    details: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "verdict": self.verdict,
            "trials": self.trials,
            "tolerance": self.tolerance,
            "counterexample": self.counterexample,
            "details": self.details,
        }


def _alloc(s, pi: Allocation):
    return {a: list(s.ordered_goods(pi.bundle(a))) for a in s.agents if pi.bundle(a)}


def _cex(s, t, declared=None, seed=None, **extra):
    out = {"scenario": io.scenario_record(s, declared if declared is not None else t, t), "seed": seed}
    out.update(extra)
    return out


def _utilities(s, t, rule, d):
    """Run the mechanism on declarations d; returns (allocation, report)."""
    pi = solve_optimal(s, d)
    return pi, rule(s, pi, d, verify(t, pi))


# --- deviation grid --------------------------------------------------------

@dataclass(frozen=True)
class DeviationSpace:
    """Finite subset of an agent's possible declarations.

    For each good the agent scores at least 0, candidate values are the
    true score, true score + each offset, and `extra`, clipped at -1.
    Named deviations (agent, {good: value}) are tried first.
    """

    offsets: tuple = (-3, -1, 1, 3)
    extra: tuple = (0,)
    max_combinations: int = 2000
    named: tuple = ()
    seed: int = 0

    def grid(self, t: TypeVector, agent, goods) -> list:
        out = []
        for g in goods:
            x = t.score(agent, g)
            if x < 0:
                continue
            vals = {x} | {max(-1.0, x + o) for o in self.offsets} | {max(-1.0, float(e)) for e in self.extra}
            out.append((g, sorted(vals)))
        return out

    def size(self, t, agent, goods) -> int:
        return math.prod(len(v) for _, v in self.grid(t, agent, goods))

    def deviations(self, t: TypeVector, agent, goods, agent_index: int = 0) -> list:
        """Rows for `agent`: named ones, the truthful row, then grid points."""
        row = dict(t.row(agent))
        out = []
        for who, upd in self.named:
            if who == agent:
                r = dict(row)
                r.update({g: float(x) for g, x in upd.items()})
                out.append(r)
        out.append(dict(row))
        grid = self.grid(t, agent, goods)
        if not grid:
            return out
        names = [g for g, _ in grid]
        choices = [v for _, v in grid]
        total = math.prod(len(v) for v in choices)
        if total <= self.max_combinations:
            combos = itertools.product(*choices)
        else:
            rng = np.random.default_rng(derive_seed(self.seed, agent_index))
            picks = sorted(set(int(k) for k in rng.choice(total, size=self.max_combinations, replace=False)))
            combos = (_decode(k, choices) for k in picks)
        for combo in combos:
            r = dict(row)
            r.update(zip(names, combo))
            out.append(r)
        return out

    def random_row(self, t: TypeVector, agent, goods, rng) -> dict:
        r = dict(t.row(agent))
        for g, vals in self.grid(t, agent, goods):
            r[g] = vals[int(rng.integers(len(vals)))]
        return r


def _decode(k, choices):
    out = []
    for vals in reversed(choices):
        k, j = divmod(k, len(vals))
        out.append(vals[j])
    return tuple(reversed(out))


def _changed(t, agent, row):
    base = t.row(agent)
    keys = set(base) | set(row)
    return {g: row.get(g, -1.0) for g in sorted(keys) if row.get(g, -1.0) != base.get(g, -1.0)}


def check_truthfulness(s: Scenario, t: TypeVector, rule: Rule, space: DeviationSpace | None = None, *,
                       opponents: int = 2, opponent_deviations: int = 200, seed: int = 0,
                       tol: float = TOL) -> AuditResult:
    """No agent gains by switching from its true row to any grid row,
    with the others truthful, and against a few sampled non-truthful
    opponent profiles."""
    space = space or DeviationSpace(seed=seed)
    trials = 0
    for k, i in enumerate(s.agents):
        devs = space.deviations(t, i, s.goods, k)
        profiles = [("truthful", t)]
        for o in range(opponents):
            if s.n < 2:
                break
            rng = np.random.default_rng(derive_seed(seed, k, o))
            w = t
            for j in s.agents:
                if j != i:
                    w = w.with_agent(j, space.random_row(t, j, s.goods, rng))
            profiles.append((f"opponents#{o}", w))
        for label, w in profiles:
            pi0, rep0 = _utilities(s, t, rule, w)
            u0 = rep0.utilities[i]
            cand = devs
            if label != "truthful" and len(devs) > opponent_deviations:
                rng = np.random.default_rng(derive_seed(seed, k, 1000 + len(label)))
                idx = sorted(rng.choice(len(devs), opponent_deviations, replace=False))
                cand = [devs[x] for x in idx]
            for row in cand:
                if row == dict(t.row(i)):
                    continue
                d = w.with_agent(i, row)
                pi1, rep1 = _utilities(s, t, rule, d)
                trials += 1
                if rep1.utilities[i] > u0 + tol:
                    return AuditResult("truthfulness", False, trials, tol, _cex(
                        s, t, d, seed, agent=i, profile=label, deviation=_changed(t, i, row),
                        truthful_utility=u0, deviating_utility=rep1.utilities[i],
                        truthful_allocation=_alloc(s, pi0), deviating_allocation=_alloc(s, pi1),
                        opponents=io.scores_to_dict(s, w)))
    return AuditResult("truthfulness", True, trials, tol)


def check_budget_balance(s: Scenario, t: TypeVector, rule: Rule) -> AuditResult:
    pi, rep = _utilities(s, t, rule, t)
    opt = value(pi, t)
    tol = rule.budget_tolerance(opt)
    total = rep.budget()
    ok = abs(total) <= tol
    details = {"sum": total, "opt": opt}
    cex = None if ok else _cex(s, t, None, getattr(getattr(rule, "cfg", None), "seed", None),
                               sum=total, payments=dict(rep.payments), allocation=_alloc(s, pi))
    return AuditResult("budget", ok, 1, tol, cex, details)


# --- exhaustive welfare checks -----------------------------------------------

_TABLES: OrderedDict = OrderedDict()


def _table(s, t, rule):
    """Utilities of every feasible allocation at truthful declarations."""
    key = (rule, s, t.key())
    hit = _TABLES.get(key)
    if hit is not None:
        return hit
    total = count_feasible(s)
    if total > MAX_ENUMERATED:
        raise SizeCapError(f"{total} feasible allocations; exhaustive checks are capped at {MAX_ENUMERATED}")
    allocs, utils, vals = [], [], []
    for pi in feasible_allocations(s):
        rep = rule(s, pi, t, verify(t, pi))
        allocs.append(pi)
        utils.append([rep.utilities[a] for a in s.agents])
        vals.append(value(pi, t))
    star = solve_optimal(s, t)
    rep = rule(s, star, t, verify(t, star))
    hit = (allocs, np.array(utils).reshape(len(allocs), s.n), np.array(vals), star,
           np.array([rep.utilities[a] for a in s.agents]))
    _TABLES[key] = hit
    if len(_TABLES) > 4:
        _TABLES.popitem(last=False)
    return hit


def check_fairness(s: Scenario, t: TypeVector, rule: Rule, tol: float = TOL,
                   strict: str = "image") -> AuditResult:
    """Every agent weakly prefers A(t) to every feasible allocation.

    Strict part: with strict="image", an allocation whose allocated goods
    cannot support an optimum must strictly hurt somebody. With
    strict="value" the premise is the allocation's own value being
    sub-optimal; that version is false for the exact rule (an allocation
    can waste a good yet leave an optimum inside its image, and the
    payments only look at the image). strict="off" skips it.
    """
    if strict not in ("image", "value", "off"):
        raise ValueError(f"unknown strict mode {strict!r}")
    allocs, U, vals, star, ustar = _table(s, t, rule)
    opt = value(star, t)
    if strict == "image":
        cache = OptCache(s, t)
        full = (1 << s.n) - 1
        vals = np.array([cache.value(full, cache.goods_mask(pi.img)) for pi in allocs])
    for k, pi in enumerate(allocs):
        worse = U[k] > ustar + tol
        if worse.any():
            i = s.agents[int(np.argmax(worse))]
            return AuditResult("fairness", False, k + 1, tol, _cex(
                s, t, agent=i, optimal_allocation=_alloc(s, star), alternative=_alloc(s, pi),
                utility_at_optimum=float(ustar[s.agent_index(i)]), utility_at_alternative=float(U[k, s.agent_index(i)])))
        if strict != "off" and vals[k] < opt - tol and not (ustar > U[k] + tol).any():
            return AuditResult("fairness", False, k + 1, tol, _cex(
                s, t, reason=f"sub-optimal allocation hurts nobody (strict={strict})", optimal_allocation=_alloc(s, star),
                alternative=_alloc(s, pi), utilities_at_alternative=U[k].tolist()))
    return AuditResult("fairness", True, len(allocs), tol)


def check_envy_freeness(s: Scenario, t: TypeVector, rule: Rule, tol: float = TOL) -> AuditResult:
    allocs, U, _, star, ustar = _table(s, t, rule)
    trials = 0
    for k, pi in enumerate(allocs):
        for a, i in enumerate(s.agents):
            for j in s.agents:
                if pi.bundle(i) != star.bundle(j):
                    continue
                trials += 1
                if U[k, a] > ustar[a] + tol:
                    return AuditResult("envy", False, trials, tol, _cex(
                        s, t, agent=i, envied=j, optimal_allocation=_alloc(s, star), alternative=_alloc(s, pi),
                        utility_at_optimum=float(ustar[a]), utility_with_bundle=float(U[k, a])))
    return AuditResult("envy", True, trials, tol)


def check_pareto(s: Scenario, t: TypeVector, rule: Rule, tol: float = TOL) -> AuditResult:
    allocs, U, _, star, ustar = _table(s, t, rule)
    for k, pi in enumerate(allocs):
        if (U[k] >= ustar - tol).all() and (U[k] > ustar + tol).any():
            return AuditResult("pareto", False, k + 1, tol, _cex(
                s, t, optimal_allocation=_alloc(s, star), dominating=_alloc(s, pi),
                utilities_at_optimum=ustar.tolist(), utilities_dominating=U[k].tolist()))
    return AuditResult("pareto", True, len(allocs), tol)


# --- randomized invariance checks ---------------------------------------------

def random_allocation(s: Scenario, rng) -> Allocation:
    caps = {a: s.capacity[a] for a in s.agents}
    pairs = []
    for g in s.goods:
        opts = [None] + [a for a in s.agents if caps[a]]
        a = opts[int(rng.integers(len(opts)))]
        if a is not None:
            caps[a] -= 1
            pairs.append((a, g))
    return Allocation.from_pairs(pairs)


def random_declaration(s: Scenario, t: TypeVector, rng, low=-1, high=12) -> TypeVector:
    """t with each entry independently replaced, with probability 1/2."""
    rows = {}
    for a in s.agents:
        r = dict(t.row(a))
        for g in s.goods:
            if rng.random() < 0.5:
                r[g] = float(rng.integers(low, high + 1))
        rows[a] = r
    return TypeVector(rows)


def _trial_case(s, t, rng, trial):
    w = random_declaration(s, t, rng)
    pi = solve_optimal(s, w) if trial % 2 == 0 else random_allocation(s, rng)
    return w, pi


def _same(x: float, y: float) -> bool:
    return np.float64(x).tobytes() == np.float64(y).tobytes()


def check_implementability(s: Scenario, t: TypeVector, rule: Rule, trials: int = 100,
                           seed: int = 0) -> AuditResult:
    """Payments ignore declared scores on goods that were not allocated."""
    for k in range(trials):
        rng = np.random.default_rng(derive_seed(seed, k))
        w, pi = _trial_case(s, t, rng, k)
        view = verify(t, pi)
        outside = [g for g in s.goods if g not in pi.img]
        rows = {}
        for a in s.agents:
            r = dict(w.row(a))
            for g in outside:
                if rng.random() < 0.5:
                    r[g] = float(rng.integers(-1, 13))
            rows[a] = r
        w2 = TypeVector(rows)
        p1 = rule(s, pi, w, view).payments
        p2 = rule(s, pi, w2, view).payments
        bad = [a for a in s.agents if not _same(p1[a], p2[a])]
        if bad:
            return AuditResult("implementability", False, k + 1, 0.0, _cex(
                s, t, w, seed, trial=k, allocation=_alloc(s, pi), perturbed=io.scores_to_dict(s, w2),
                payments=dict(p1), payments_perturbed=dict(p2)))
    return AuditResult("implementability", True, trials, 0.0)


def check_no_punishment(s: Scenario, t: TypeVector, rule: Rule, trials: int = 100,
                        seed: int = 0) -> AuditResult:
    """An agent's payment does not change when its declaration is replaced by the truth."""
    for k in range(trials):
        rng = np.random.default_rng(derive_seed(seed, k))
        w, pi = _trial_case(s, t, rng, k)
        view = verify(t, pi)
        p = rule(s, pi, w, view).payments
        for i in s.agents:
            p2 = rule(s, pi, w.with_agent(i, t.row(i)), view).payments
            if not _same(p[i], p2[i]):
                return AuditResult("no-punishment", False, k + 1, 0.0, _cex(
                    s, t, w, seed, trial=k, agent=i, allocation=_alloc(s, pi),
                    payment=p[i], payment_if_truthful=p2[i]))
    return AuditResult("no-punishment", True, trials, 0.0)


def sampler_bound(delta: float, trials: int) -> float:
    return delta + 3 * math.sqrt(delta * (1 - delta) / trials)


def check_sampler_accuracy(s: Scenario, t: TypeVector, cfg: SamplingConfig, trials: int = 200,
                           workers: int = 1) -> AuditResult:
    """Frequency of runs missing the exact Shapley vector by more than
    epsilon (relative, any agent) stays within delta plus 3 sigma."""
    if s.n > SAMPLER_CAP:
        raise SizeCapError(f"sampler check needs exact Shapley; limited to {SAMPLER_CAP} agents")
    exact = shapley_exact(best_game(s, t))
    target = np.array([exact[a] for a in s.agents])
    pi = solve_optimal(s, t)
    view = verify(t, pi)
    fails, first, worst = 0, None, 0.0
    for k in range(trials):
        run = replace(cfg, seed=derive_seed(cfg.seed, k))
        u = np.array([pay_sampled(s, pi, t, view, run, workers=workers).utilities[a] for a in s.agents])
        err = np.abs(u - target)
        rel = float(np.max(err / np.maximum(np.abs(target), 1e-300)))
        worst = max(worst, rel)
        if (err > cfg.epsilon * np.abs(target) + TOL).any():
            fails += 1
            if first is None:
                first = {"trial": k, "seed": run.seed, "utilities": u.tolist()}
    rate = fails / trials
    bound = sampler_bound(cfg.delta, trials)
    ok = rate <= bound
    details = {"failure_rate": rate, "bound": bound, "max_relative_error": worst,
               "shapley": target.tolist(), "config": cfg.as_dict()}
    cex = None if ok else _cex(s, t, None, cfg.seed, first_failure=first, failure_rate=rate)
    return AuditResult("sampler", ok, trials, cfg.epsilon, cex, details)


CHECKS = ("truthfulness", "budget", "fairness", "envy", "pareto", "implementability",
          "no-punishment", "sampler")


def run_checks(s: Scenario, t: TypeVector, rule: Rule, checks, seed: int = 0, trials: int = 100,
               space: DeviationSpace | None = None, cfg: SamplingConfig | None = None) -> list:
    out = []
    for name in checks:
        if name == "truthfulness":
            out.append(check_truthfulness(s, t, rule, space or DeviationSpace(seed=seed), seed=seed))
        elif name == "budget":
            out.append(check_budget_balance(s, t, rule))
        elif name == "fairness":
            out.append(check_fairness(s, t, rule))
        elif name == "envy":
            out.append(check_envy_freeness(s, t, rule))
        elif name == "pareto":
            out.append(check_pareto(s, t, rule))
        elif name == "implementability":
            out.append(check_implementability(s, t, rule, trials, seed))
        elif name == "no-punishment":
            out.append(check_no_punishment(s, t, rule, trials, seed))
        elif name == "sampler":
            c = cfg or getattr(rule, "cfg", None) or SamplingConfig.from_accuracy(s.n, seed=seed)
            out.append(check_sampler_accuracy(s, t, c, trials))
        else:
            raise ValueError(f"unknown check {name!r}; choose from {', '.join(CHECKS)}")
    return out


def named_deviations(pairs: Mapping) -> tuple:
    """{agent: [{good: value}, ...]} -> the tuple DeviationSpace.named expects."""
    return tuple((a, dict(u)) for a, ups in pairs.items() for u in ups)
