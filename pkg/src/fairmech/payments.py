"""Payment rules: exact and sampled Shapley-based rules plus simple baselines.

Every rule sees the scenario, the allocation, the declared scores and the
verifier's view; never the hidden true scores. A rule returns payments,
and utilities follow quasi-linearly: verified bundle value plus payment.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractViolation, SizeCapError, StructuralError
from .games import shapley_from_tables
from .matching import OptCache, solve_optimal
from .model import Allocation, Scenario, TypeVector, VerifiedView, restrict, verify
from .sampling import SamplingConfig, estimate, lookup

EXACT_CAP = 18
LITERAL_CAP = 10

__all__ = [
    "EXACT_CAP", "PaymentReport", "SamplingConfig", "pay_exact", "pay_sampled", "pay_normalized",
    "divide_proj", "divide_owner", "divide_all", "utility_of", "make_rule", "RULE_NAMES",
]


@dataclass(frozen=True)
class PaymentReport:
    rule: str
    payments: Mapping[str, float]
    utilities: Mapping[str, float]
    allocation: Allocation
    sampling: Mapping | None = None
    diagnostics: Mapping = field(default_factory=dict)

    def budget(self) -> float:
        return math.fsum(self.payments.values())


def _check(s: Scenario, pi: Allocation, w: TypeVector, view: VerifiedView):
    pi.check(s)
    w.check(s)
    if view.goods != pi.img:
        raise ContractViolation("view does not cover exactly the allocated goods")
    missing = [a for a in s.agents if a not in view.agents]
    if missing:
        raise ContractViolation(f"view lacks agents {missing}")


def _report(rule, s, pi, view, payments, sampling=None, **diag) -> PaymentReport:
    pay = {a: float(payments[a]) for a in s.agents}
    util = {a: view.bundle_value(a, pi) + pay[a] for a in s.agents}
    return PaymentReport(rule, pay, util, pi, sampling, diag)


def utility_of(report: PaymentReport, view: VerifiedView, pi: Allocation) -> dict:
    return {a: view.bundle_value(a, pi) + p for a, p in report.payments.items()}


class _Oracle:
    """Coalition values restricted to the verified goods.

    second(C) = opt over img(pi) with the declared scores.
    first(C, i) = the same optimum with agent i's row replaced by its
    verified row. When i's declaration matches the verifier on img(pi)
    both share one cache, which is what makes the replacement invisible
    bit for bit.
    """

    def __init__(self, s, pi, w, view, cache_for: Callable[[TypeVector], OptCache]):
        self.s = s
        self.view = view
        self.img = s.ordered_goods(pi.img)
        self.base = cache_for(w)
        self.gmask = self.base.goods_mask(self.img)
        self.own = {}
        for a in s.agents:
            if view.agrees_with(a, w):
                self.own[a] = self.base
            else:
                self.own[a] = cache_for(w.with_agent(a, {g: view.score(a, g) for g in self.img}))

    def second(self, mask):
        return self.base.value(mask, self.gmask)

    def first(self, i, mask):
        return self.own[self.s.agents[i]].value(mask, self.gmask)


def _fresh(s, backend):
    return lambda w: OptCache(s, w, backend)


def pay_exact(s: Scenario, pi: Allocation, w: TypeVector, view: VerifiedView, *,
              literal: bool = False, backend: str = "scipy",
              cache_for: Callable[[TypeVector], OptCache] | None = None) -> PaymentReport:
    """Exact Shapley-style payments over the verified goods.

    xi_i = sum over C containing i of weight(|C|) * (first(C, i) - second(C - i)),
    payment = xi_i - v_i(pi). With literal=True the first term is instead
    evaluated on one canonical optimum of C under the declared scores, with
    i's share re-scored by the verifier; see README for why that variant
    is not the default.
    """
    _check(s, pi, w, view)
    n = s.n
    if n > EXACT_CAP:
        raise SizeCapError(f"{n} agents exceeds the exact-rule cap of {EXACT_CAP}; use pay_sampled")
    if literal and n > LITERAL_CAP:
        raise SizeCapError(f"literal variant limited to {LITERAL_CAP} agents")
    orc = _Oracle(s, pi, w, view, cache_for or _fresh(s, backend))
    second = orc.base.table(orc.gmask)

    if literal:
        first_tab = _literal_first(s, orc, w, backend)

        def first(i):
            return first_tab[i]
    else:
        def first(i):
            own = orc.own[s.agents[i]]
            return second if own is orc.base else own.table(orc.gmask, include=i)

    xi = shapley_from_tables(n, first, second)
    v = [view.bundle_value(a, pi) for a in s.agents]
    pay = {a: float(xi[k] - v[k]) for k, a in enumerate(s.agents)}
    return _report("exact-literal" if literal else "exact", s, pi, view, pay,
                   xi={a: float(xi[k]) for k, a in enumerate(s.agents)})


def _literal_first(s, orc, w, backend):
    n = s.n
    size = 1 << n
    tabs = np.zeros((n, size))
    for mask in range(1, size):
        members = s.coalition_of(mask)
        sub = restrict(s, members, orc.img)
        wc = TypeVector({a: {g: w.score(a, g) for g in orc.img} for a in members})
        pc = solve_optimal(sub, wc, backend)
        for i, a in enumerate(s.agents):
            if mask >> i & 1:
                tabs[i, mask] = math.fsum(
                    [orc.view.bundle_value(a, pc)] + [w.bundle_value(b, pc.bundle(b)) for b in members if b != a])
    return tabs


def _marginal_w(orc: _Oracle):
    liars = [i for i, a in enumerate(orc.s.agents) if orc.own[a] is not orc.base]

    def fn(prefix, prev, who):
        out = lookup(orc.second, prefix)
        for i in liars:
            sel = who == i
            if sel.any():
                out[sel] = lookup(lambda m, i=i: orc.first(i, m), prefix[sel])
        return out - lookup(orc.second, prev)

    return fn


def _sampling_meta(cfg: SamplingConfig):
    return cfg.as_dict()


def pay_sampled(s: Scenario, pi: Allocation, w: TypeVector, view: VerifiedView, cfg: SamplingConfig,
                *, workers: int = 1, backend: str = "scipy",
                cache_for: Callable[[TypeVector], OptCache] | None = None) -> PaymentReport:
    """Median-of-means permutation estimate of the exact rule's xi."""
    _check(s, pi, w, view)
    orc = _Oracle(s, pi, w, view, cache_for or _fresh(s, backend))
    ((xi, _),) = estimate(s.n, cfg, [_marginal_w(orc)], workers=workers)
    v = [view.bundle_value(a, pi) for a in s.agents]
    pay = {a: float(xi[k] - v[k]) for k, a in enumerate(s.agents)}
    return _report("sampled", s, pi, view, pay, sampling=_sampling_meta(cfg),
                   xi={a: float(xi[k]) for k, a in enumerate(s.agents)})


def pay_normalized(s: Scenario, pi: Allocation, w: TypeVector, view: VerifiedView, cfg: SamplingConfig,
                   *, reverse_sign: bool = False, workers: int = 1, backend: str = "scipy",
                   cache_for: Callable[[TypeVector], OptCache] | None = None) -> PaymentReport:
    """Sampled rule rescaled so the estimates under verified scores sum to the
    verified optimum; budget balanced at truth.

    p_i = xi_i(w) * R - v_i(pi) with R = opt(img, v) / sum_i xi_i(v).
    reverse_sign=True returns v_i(pi) - xi_i(w) * R instead.
    """
    _check(s, pi, w, view)
    cache_for = cache_for or _fresh(s, backend)
    orc = _Oracle(s, pi, w, view, cache_for)
    vcache = cache_for(_verified_types(s, view, orc.img))

    def vval(m):
        return vcache.value(m, orc.gmask)

    def marg_v(prefix, prev, who):
        return lookup(vval, prefix) - lookup(vval, prev)

    (xi_w, _), (xi_v, _) = estimate(s.n, cfg, [_marginal_w(orc), marg_v], workers=workers)
    opt_v = vcache.value((1 << s.n) - 1, orc.gmask)
    denom = float(np.sum(xi_v))
    R = 1.0 if denom == 0 else opt_v / denom
    v = [view.bundle_value(a, pi) for a in s.agents]
    if reverse_sign:
        pay = {a: float(v[k] - xi_w[k] * R) for k, a in enumerate(s.agents)}
    else:
        pay = {a: float(xi_w[k] * R - v[k]) for k, a in enumerate(s.agents)}
    return _report("normalized-reverse-sign" if reverse_sign else "normalized", s, pi, view, pay,
                   sampling=_sampling_meta(cfg), R=R, opt_verified=opt_v,
                   xi={a: float(xi_w[k]) for k, a in enumerate(s.agents)},
                   xi_verified={a: float(xi_v[k]) for k, a in enumerate(s.agents)})


def _verified_types(s, view, img) -> TypeVector:
    return TypeVector({a: {g: view.score(a, g) for g in img} for a in s.agents})


# --- baseline division rules ---------------------------------------------

def divide_proj(pi: Allocation, view: VerifiedView) -> dict:
    """Each agent keeps the verified score of its own bundle."""
    return {a: view.bundle_value(a, pi) for a in view.agents}


def authorship_from(view: VerifiedView) -> dict:
    """good -> agents with a positive verified score for it."""
    return {g: {a for a in view.agents if view.score(a, g) > 0} for g in view.goods}


def divide_owner(pi: Allocation, view: VerifiedView, authorship: Mapping | None = None) -> dict:
    """Each allocated good's verified score is split evenly among its authors."""
    authorship = authorship_from(view) if authorship is None else authorship
    out = {a: 0.0 for a in view.agents}
    for a, goods in pi.bundles.items():
        for g in goods:
            authors = authorship.get(g) or ()
            if not authors:
                raise StructuralError(f"allocated good {g!r} has no authors")
            share = view.score(a, g) / len(authors)
            for b in authors:
                out[b] += share
    return out


def divide_all(pi: Allocation, view: VerifiedView, d: TypeVector, variant: bool = False) -> dict:
    """Share proportional to declared overall production.

    The factor multiplying the share is the agent's own verified bundle
    total; with variant=True it is the allocation's whole verified value,
    which makes the shares sum to that value.
    """
    prod = {a: math.fsum(x for x in d.row(a).values() if x > 0) for a in view.agents}
    total = math.fsum(prod.values())
    if total == 0:
        raise StructuralError("no agent declares any positive score")
    whole = view.value(pi)
    return {a: prod[a] / total * (whole if variant else view.bundle_value(a, pi)) for a in view.agents}


# --- rules as callables --------------------------------------------------

RULE_NAMES = ("exact", "sampled", "normalized", "proj", "owner", "all")


class _CacheLRU:
    """Reuse OptCaches across calls that see the same score vector."""

    def __init__(self, s, backend, size=32):
        self.s, self.backend, self.size = s, backend, size
        self._d: OrderedDict = OrderedDict()

    def __call__(self, w):
        k = w.key()
        c = self._d.get(k)
        if c is None:
            c = OptCache(self.s, w, self.backend)
            self._d[k] = c
            if len(self._d) > self.size:
                self._d.popitem(last=False)
        else:
            self._d.move_to_end(k)
        return c


class Rule:
    """A payment rule usable by the mechanism and the audit harness."""

    name = "rule"

    def __call__(self, s, pi, w, view) -> PaymentReport:
        raise NotImplementedError

    def budget_tolerance(self, opt: float) -> float:
        return 1e-9

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"


class ExactRule(Rule):
    def __init__(self, literal=False, backend="scipy"):
        self.literal = literal
        self.backend = backend
        self.name = "exact-literal" if literal else "exact"
        self._lru = None

    def _caches(self, s):
        if self._lru is None or self._lru.s != s:
            self._lru = _CacheLRU(s, self.backend)
        return self._lru

    def __call__(self, s, pi, w, view):
        return pay_exact(s, pi, w, view, literal=self.literal, backend=self.backend,
                         cache_for=self._caches(s))


class SampledRule(Rule):
    def __init__(self, cfg: SamplingConfig, workers=1, backend="scipy"):
        self.cfg, self.workers, self.backend = cfg, workers, backend
        self.name = "sampled"

    def budget_tolerance(self, opt):
        return self.cfg.epsilon * abs(opt) + 1e-9

    def __call__(self, s, pi, w, view):
        return pay_sampled(s, pi, w, view, self.cfg, workers=self.workers, backend=self.backend)


class NormalizedRule(Rule):
    def __init__(self, cfg: SamplingConfig, reverse_sign=False, workers=1, backend="scipy"):
        self.cfg, self.reverse_sign, self.workers, self.backend = cfg, reverse_sign, workers, backend
        self.name = "normalized-reverse-sign" if reverse_sign else "normalized"

    def __call__(self, s, pi, w, view):
        return pay_normalized(s, pi, w, view, self.cfg, reverse_sign=self.reverse_sign,
                              workers=self.workers, backend=self.backend)


class DivisionRule(Rule):
    """Wraps a division rule as payments p_i = share_i - v_i(pi)."""

    def __init__(self, kind: str, variant=False):
        if kind not in ("proj", "owner", "all"):
            raise ValueError(kind)
        self.kind, self.variant = kind, variant
        self.name = kind + ("-variant" if variant and kind == "all" else "")

    def shares(self, pi, w, view):
        if self.kind == "proj":
            return divide_proj(pi, view)
        if self.kind == "owner":
            return divide_owner(pi, view)
        return divide_all(pi, view, w, variant=self.variant)

    def __call__(self, s, pi, w, view):
        _check(s, pi, w, view)
        sh = self.shares(pi, w, view)
        pay = {a: sh[a] - view.bundle_value(a, pi) for a in s.agents}
        return _report(self.name, s, pi, view, pay, shares={a: float(sh[a]) for a in s.agents})


def make_rule(name: str, cfg: SamplingConfig | None = None, *, variant_all=False, reverse_sign=False,
              literal=False, workers=1, backend="scipy") -> Rule:
    if name == "exact":
        return ExactRule(literal=literal, backend=backend)
    if name in ("sampled", "normalized"):
        if cfg is None:
            raise ValueError(f"rule {name!r} needs a SamplingConfig")
        if name == "sampled":
            return SampledRule(cfg, workers, backend)
        return NormalizedRule(cfg, reverse_sign, workers, backend)
    if name in ("proj", "owner", "all"):
        return DivisionRule(name, variant=variant_all)
    raise ValueError(f"unknown rule {name!r}; choose from {', '.join(RULE_NAMES)}")


def run_mechanism(s: Scenario, declared: TypeVector, true: TypeVector, rule: Rule,
                  backend: str = "scipy"):
    """Allocate on declarations, verify, pay. Returns (allocation, view, report)."""
    pi = solve_optimal(s, declared, backend)
    view = verify(true, pi)
    return pi, view, rule(s, pi, declared, view)
