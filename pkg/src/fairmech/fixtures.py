"""Reference instances: the two-researcher "vqr8" fixture and a random generator."""
from __future__ import annotations

import numpy as np

from .model import Allocation, Scenario, TypeVector

VQR8_TRUE = {
    "r1": {"p1": 10, "p2": 7, "p3": 7, "p4": 8, "p5": 8},
    "r2": {"p4": 8, "p5": 8, "p6": 7, "p7": 8, "p8": 10},
}


def vqr8():
    """Two agents of capacity 3 over eight goods; returns (scenario, true scores)."""
    s = Scenario(["r1", "r2"], [f"p{k}" for k in range(1, 9)], {"r1": 3, "r2": 3})
    return s, TypeVector(VQR8_TRUE)


# the two optima singled out for the fixture
SIGMA_STAR = Allocation({"r1": {"p1", "p2", "p4"}, "r2": {"p5", "p7", "p8"}})
S_HAT = Allocation({"r1": {"p1", "p4", "p5"}, "r2": {"p6", "p7", "p8"}})

# r1 understates p2, p3: the shared goods then go to r1
UNDERSTATE_R1 = {"p2": 2, "p3": 2}
# r1 overstates p2, p3 to keep the shared goods away from itself
OVERSTATE_R1 = {"p2": 9, "p3": 9}


def vqr8_restricted():
    """Capacity 1 each over {p1, p4, p7}: small enough to enumerate everything."""
    goods = ["p1", "p4", "p7"]
    s = Scenario(["r1", "r2"], goods, {"r1": 1, "r2": 1})
    t = TypeVector({a: {g: x for g, x in row.items() if g in goods} for a, row in VQR8_TRUE.items()})
    return s, t


def random_instance(rng: np.random.Generator, max_agents=4, max_capacity=2, max_goods=6,
                    low=-1, high=10, min_agents=1, min_goods=1):
    """Random scenario with integer scores uniform on [low, high]."""
    n = int(rng.integers(min_agents, max_agents + 1))
    m = int(rng.integers(min_goods, max_goods + 1))
    agents = [f"a{k}" for k in range(1, n + 1)]
    goods = [f"g{k}" for k in range(1, m + 1)]
    caps = {a: int(rng.integers(1, max_capacity + 1)) for a in agents}
    scores = rng.integers(low, high + 1, size=(n, m))
    t = TypeVector({a: {g: int(scores[i, j]) for j, g in enumerate(goods)}
                    for i, a in enumerate(agents)})
    return Scenario(agents, goods, caps), t


def corpus(seed=2024, size=100, **kw):
    """The seeded list of random instances used by the property suites."""
    rng = np.random.default_rng(seed)
    return [random_instance(rng, **kw) for _ in range(size)]
