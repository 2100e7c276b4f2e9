"""Domain types: scenarios, score vectors, allocations and the verifier.

Every type here is immutable after construction. Scores default to -1
(the "not authored" sentinel) when an agent has no entry for a good.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractViolation, StructuralError

SENTINEL = -1.0


def _frozen(d):
    return MappingProxyType(dict(d))


@dataclass(frozen=True, eq=False)
class Scenario:
    """Agents with capacities and a list of indivisible goods.

    Orderings are significant: they drive tie-breaking everywhere.
    """

    agents: tuple
    goods: tuple
    capacity: Mapping[str, int]

    def __init__(self, agents: Iterable[str], goods: Iterable[str], capacity: Mapping[str, int]):
        agents = tuple(agents)
        goods = tuple(goods)
        if len(set(agents)) != len(agents):
            raise StructuralError("duplicate agent id")
        if len(set(goods)) != len(goods):
            raise StructuralError("duplicate good id")
        cap = {}
        for a in agents:
            if a not in capacity:
                raise StructuralError(f"no capacity for agent {a!r}")
            c = capacity[a]
            if isinstance(c, bool) or int(c) != c or c < 1:
                raise StructuralError(f"capacity of {a!r} must be a positive integer, got {c!r}")
            cap[a] = int(c)
        extra = set(capacity) - set(agents)
        if extra:
            raise StructuralError(f"capacity given for unknown agents {sorted(extra)}")
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "goods", goods)
        object.__setattr__(self, "capacity", _frozen(cap))
        object.__setattr__(self, "_aidx", {a: k for k, a in enumerate(agents)})
        object.__setattr__(self, "_gidx", {g: k for k, g in enumerate(goods)})

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.agents, self.goods, dict(self.capacity)) == (
            other.agents, other.goods, dict(other.capacity))

    def __hash__(self):
        return hash((self.agents, self.goods, tuple(self.capacity[a] for a in self.agents)))

    def __repr__(self):
        caps = ", ".join(f"{a}:{self.capacity[a]}" for a in self.agents)
        return f"Scenario(agents=[{caps}], goods={list(self.goods)})"

    @property
    def n(self) -> int:
        return len(self.agents)

    def agent_index(self, agent: str) -> int:
        try:
            return self._aidx[agent]
        except KeyError:
            raise StructuralError(f"unknown agent {agent!r}") from None

    def good_index(self, good: str) -> int:
        try:
            return self._gidx[good]
        except KeyError:
            raise StructuralError(f"unknown good {good!r}") from None

    def has_agent(self, agent) -> bool:
        return agent in self._aidx

    def has_good(self, good) -> bool:
        return good in self._gidx

    def mask_of(self, coalition: Iterable[str]) -> int:
        m = 0
        for a in coalition:
            m |= 1 << self.agent_index(a)
        return m

    def coalition_of(self, mask: int) -> tuple:
        return tuple(a for k, a in enumerate(self.agents) if mask >> k & 1)

    def ordered_goods(self, goods: Iterable[str]) -> tuple:
        gs = set(goods)
        for g in gs:
            self.good_index(g)
        return tuple(g for g in self.goods if g in gs)


class TypeVector:
    """Per-agent additive scores over goods.

    Stored sparsely; entries equal to the sentinel are dropped so that two
    vectors compare equal iff they score every (agent, good) pair alike.
    """

    __slots__ = ("_scores", "_key", "_mats", "_checked")

    def __init__(self, scores: Mapping[str, Mapping[str, float]]):
        self._scores = _frozen({a: self._clean_row(a, row) for a, row in scores.items()})
        self._key = None
        self._mats = {}
        self._checked = None

    @staticmethod
    def _clean_row(agent, row):
        r = {}
        for g, x in row.items():
            x = float(x)
            if not math.isfinite(x):
                raise StructuralError(f"score {agent}/{g} is not finite")
            if x != SENTINEL:
                r[g] = x
        return _frozen(r)

    @property
    def agents(self):
        return tuple(self._scores)

    def row(self, agent) -> Mapping[str, float]:
        try:
            return self._scores[agent]
        except KeyError:
            raise StructuralError(f"no scores for agent {agent!r}") from None

    def score(self, agent, good) -> float:
        return self.row(agent).get(good, SENTINEL)

    def bundle_value(self, agent, goods: Iterable[str]) -> float:
        row = self.row(agent)
        return math.fsum(row.get(g, SENTINEL) for g in goods)

    def with_agent(self, agent, row: Mapping[str, float]) -> "TypeVector":
        """Copy with agent's whole row replaced."""
        self.row(agent)
        d = dict(self._scores)
        d[agent] = self._clean_row(agent, row)
        out = TypeVector.__new__(TypeVector)
        out._scores = _frozen(d)
        out._key = None
        out._mats = {}
        out._checked = None
        return out

    def with_scores(self, agent, updates: Mapping[str, float]) -> "TypeVector":
        """Copy with some of agent's entries overwritten."""
        r = dict(self.row(agent))
        r.update(updates)
        return self.with_agent(agent, r)

    def matrix(self, agents: Iterable[str], goods: Iterable[str]) -> np.ndarray:
        """Dense scores; the result is cached and must not be modified."""
        agents = tuple(agents)
        goods = tuple(goods)
        hit = self._mats.get((agents, goods))
        if hit is not None:
            return hit
        out = np.full((len(agents), len(goods)), SENTINEL)
        for k, a in enumerate(agents):
            row = self.row(a)
            for j, g in enumerate(goods):
                x = row.get(g)
                if x is not None:
                    out[k, j] = x
        out.setflags(write=False)
        if len(self._mats) < 8:
            self._mats[(agents, goods)] = out
        return out

    def check(self, s: Scenario) -> "TypeVector":
        if self._checked is s:
            return self
        missing = [a for a in s.agents if a not in self._scores]
        if missing:
            raise StructuralError(f"type vector lacks agents {missing}")
        for a, row in self._scores.items():
            s.agent_index(a)
            for g in row:
                s.good_index(g)
        self._checked = s
        return self

    def key(self):
        if self._key is None:
            self._key = tuple(sorted((a, tuple(sorted(r.items()))) for a, r in self._scores.items()))
        return self._key

    def as_dict(self):
        return {a: dict(r) for a, r in self._scores.items()}

    def __eq__(self, other):
        if not isinstance(other, TypeVector):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"TypeVector({self.as_dict()!r})"


class Allocation:
    """Disjoint bundles of goods per agent. Empty bundles are not stored."""

    __slots__ = ("_bundles",)

    def __init__(self, bundles: Mapping[str, Iterable[str]] | None = None):
        b = {}
        seen = set()
        for a, goods in (bundles or {}).items():
            fs = frozenset(goods)
            if seen & fs:
                raise StructuralError(f"goods {sorted(seen & fs)} allocated twice")
            seen |= fs
            if fs:
                b[a] = fs
        self._bundles = _frozen(b)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple]) -> "Allocation":
        b: dict = {}
        for a, g in pairs:
            b.setdefault(a, set()).add(g)
        return cls(b)

    @property
    def bundles(self) -> Mapping[str, frozenset]:
        return self._bundles

    def bundle(self, agent) -> frozenset:
        return self._bundles.get(agent, frozenset())

    @property
    def img(self) -> frozenset:
        out = frozenset()
        for fs in self._bundles.values():
            out |= fs
        return out

    @property
    def dom(self) -> frozenset:
        return frozenset(self._bundles)

    def owner(self, good):
        for a, fs in self._bundles.items():
            if good in fs:
                return a
        return None

    def check(self, s: Scenario) -> "Allocation":
        for a, fs in self._bundles.items():
            s.agent_index(a)
            for g in fs:
                s.good_index(g)
            if len(fs) > s.capacity[a]:
                raise StructuralError(f"agent {a!r} holds {len(fs)} goods, capacity {s.capacity[a]}")
        return self

    def pairs(self, s: Scenario) -> tuple:
        """Sorted (agent index, good index) pairs."""
        return tuple(sorted((s.agent_index(a), s.good_index(g))
                            for a, fs in self._bundles.items() for g in fs))

    def ordered(self, s: Scenario) -> dict:
        """agent -> goods list, both in scenario order; for serialisation."""
        return {a: list(s.ordered_goods(self.bundle(a))) for a in s.agents}

    def __eq__(self, other):
        if not isinstance(other, Allocation):
            return NotImplemented
        return dict(self._bundles) == dict(other._bundles)

    def __hash__(self):
        return hash(frozenset(self._bundles.items()))

    def __repr__(self):
        inner = ", ".join(f"{a}: {sorted(fs)}" for a, fs in sorted(self._bundles.items()))
        return "Allocation({" + inner + "})"


def value(alloc: Allocation, w: TypeVector) -> float:
    """Total declared (or true) value of an allocation."""
    return math.fsum(w.bundle_value(a, fs) for a, fs in alloc.bundles.items())


def restrict(s: Scenario, coalition: Iterable[str], goods: Iterable[str]) -> Scenario:
    coalition = set(coalition)
    for a in coalition:
        s.agent_index(a)
    agents = [a for a in s.agents if a in coalition]
    return Scenario(agents, s.ordered_goods(goods), {a: s.capacity[a] for a in agents})


# --- one-good reduction -------------------------------------------------

def clone_id(agent: str, k: int) -> str:
    return f"{agent}#{k}"


@dataclass(frozen=True)
class OneGoodScenario:
    base: Scenario
    scenario: Scenario          # the clone scenario, every capacity 1
    clone_map: Mapping[str, str] = field(repr=False)

    def clones(self, agent) -> tuple:
        return tuple(clone_id(agent, k) for k in range(1, self.base.capacity[agent] + 1))


def to_one_good(s: Scenario, w: TypeVector):
    w.check(s)
    clones = []
    cmap = {}
    rows = {}
    for a in s.agents:
        for k in range(1, s.capacity[a] + 1):
            c = clone_id(a, k)
            clones.append(c)
            cmap[c] = a
            rows[c] = w.row(a)
    s1 = Scenario(clones, s.goods, {c: 1 for c in clones})
    return OneGoodScenario(s, s1, _frozen(cmap)), TypeVector(rows)


def from_one_good(alloc1: Allocation, m: OneGoodScenario) -> Allocation:
    b: dict = {}
    for c, fs in alloc1.bundles.items():
        if c not in m.clone_map:
            raise StructuralError(f"unknown clone {c!r}")
        if len(fs) > 1:
            raise StructuralError(f"clone {c!r} holds more than one good")
        b.setdefault(m.clone_map[c], set()).update(fs)
    return Allocation(b).check(m.base)


# --- verifier -----------------------------------------------------------

class VerifiedView:
    """True scores disclosed for the allocated goods only."""

    __slots__ = ("_goods", "_scores")

    def __init__(self, goods: Iterable[str], scores: Mapping[str, Mapping[str, float]]):
        self._goods = frozenset(goods)
        sc = {}
        for a, row in scores.items():
            if set(row) != self._goods:
                raise ContractViolation(f"view row of {a!r} must cover exactly the verified goods")
            sc[a] = _frozen({g: float(x) for g, x in row.items()})
        self._scores = _frozen(sc)

    @property
    def goods(self) -> frozenset:
        return self._goods

    @property
    def agents(self):
        return tuple(self._scores)

    def score(self, agent, good) -> float:
        if good not in self._goods:
            raise ContractViolation(f"good {good!r} was not verified")
        try:
            return self._scores[agent][good]
        except KeyError:
            raise StructuralError(f"unknown agent {agent!r}") from None

    def bundle_value(self, agent, alloc: Allocation) -> float:
        return math.fsum(self.score(agent, g) for g in alloc.bundle(agent))

    def value(self, alloc: Allocation) -> float:
        return math.fsum(self.bundle_value(a, alloc) for a in alloc.bundles)

    def as_types(self) -> TypeVector:
        """The verified scores as a vector; only meaningful on the verified goods."""
        return TypeVector({a: dict(r) for a, r in self._scores.items()})

    def matrix(self, agents, goods) -> np.ndarray:
        agents, goods = list(agents), list(goods)
        out = np.empty((len(agents), len(goods)))
        for k, a in enumerate(agents):
            for j, g in enumerate(goods):
                out[k, j] = self.score(a, g)
        return out

    def agrees_with(self, agent, w: TypeVector) -> bool:
        """True when agent's declared row matches the verified one on the verified goods."""
        row = self._scores[agent]
        return all(w.score(agent, g) == x for g, x in row.items())


def verify(t: TypeVector, alloc: Allocation) -> VerifiedView:
    goods = alloc.img
    return VerifiedView(goods, {a: {g: t.score(a, g) for g in goods} for a in t.agents})
