"""Coalitional games over allocation scenarios and their Shapley values."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import SizeCapError, StructuralError
from .matching import OptCache
from .model import Scenario, TypeVector
from .sampling import SamplingConfig, estimate, lookup

SHAPLEY_CAP = 20
MODULARITY_CAP = 5


class CoalitionalGame:
    """Players plus a worth function on coalitions, memoised by bitmask."""

    def __init__(self, players: Iterable[str], worth_mask: Callable[[int], float]):
        self.players = tuple(players)
        self._index = {p: k for k, p in enumerate(self.players)}
        self._fn = worth_mask
        self._memo: dict = {0: 0.0}

    @property
    def n(self):
        return len(self.players)

    def mask_of(self, coalition: Iterable[str]) -> int:
        m = 0
        for p in coalition:
            try:
                m |= 1 << self._index[p]
            except KeyError:
                raise StructuralError(f"unknown player {p!r}") from None
        return m

    def worth_mask(self, mask: int) -> float:
        v = self._memo.get(mask)
        if v is None:
            v = float(self._fn(mask))
            self._memo[mask] = v
        return v

    def worth(self, coalition: Iterable[str]) -> float:
        return self.worth_mask(self.mask_of(coalition))

    def table(self) -> np.ndarray:
        """Worth of every coalition, indexed by bitmask."""
        return np.array([self.worth_mask(m) for m in range(1 << self.n)], dtype=float)

    @classmethod
    def from_function(cls, players, fn: Callable[[frozenset], float]):
        players = tuple(players)

        def by_mask(mask):
            return fn(frozenset(p for k, p in enumerate(players) if mask >> k & 1))

        return cls(players, by_mask)


@dataclass(frozen=True)
class ShapleyVector:
    values: Mapping[str, float]

    def __getitem__(self, p):
        return self.values[p]

    def total(self) -> float:
        return float(sum(self.values.values()))

    def as_tuple(self, order=None):
        order = order or tuple(self.values)
        return tuple(self.values[p] for p in order)


def best_game(s: Scenario, w: TypeVector, cache: OptCache | None = None) -> CoalitionalGame:
    """worth(C) = what C could achieve on its own with all the goods."""
    cache = cache or OptCache(s, w)
    return CoalitionalGame(s.agents, cache.value)


def marg_game(s: Scenario, w: TypeVector, cache: OptCache | None = None) -> CoalitionalGame:
    """worth(C) = drop in the grand optimum when C leaves."""
    cache = cache or OptCache(s, w)
    full = (1 << s.n) - 1
    opt = cache.value(full)
    return CoalitionalGame(s.agents, lambda m: opt - cache.value(full ^ m))


def shapley_weights(n: int) -> np.ndarray:
    """weights[k] = (n-k)!(k-1)!/n! for a coalition of size k >= 1.

    Written as 1 / (n * C(n-1, k-1)) so nothing overflows.
    """
    w = np.zeros(n + 1)
    for k in range(1, n + 1):
        w[k] = 1.0 / (n * comb(n - 1, k - 1))
    return w


@lru_cache(maxsize=None)
def popcounts(n: int) -> np.ndarray:
    masks = np.arange(1 << n, dtype=np.int64)
    pc = np.zeros(1 << n, dtype=np.int64)
    for k in range(n):
        pc += (masks >> k) & 1
    return pc


@lru_cache(maxsize=32)
def _layout(n: int):
    """Per player: masks containing it, the same masks without it, weights."""
    masks = np.arange(1 << n, dtype=np.int64)
    wts = shapley_weights(n)[popcounts(n)]
    out = []
    for i in range(n):
        bit = 1 << i
        sel = masks[(masks & bit) != 0]
        out.append((sel, sel ^ bit, wts[sel]))
    return out


def shapley_from_tables(n: int, plus: Callable[[int], np.ndarray], minus: np.ndarray) -> np.ndarray:
    """Sum of weight(|C|) * (plus_i[C] - minus[C - i]) over C containing i.

    `plus(i)` returns the table of first terms for player i (indexed by
    mask). np.sum's pairwise reduction keeps the result independent of
    how the tables were filled.
    """
    if n == 0:
        return np.zeros(0)
    out = np.empty(n)
    for i, (sel, without, wts) in enumerate(_layout(n)):
        out[i] = np.sum(wts * (plus(i)[sel] - minus[without]))
    return out


def shapley_exact(g: CoalitionalGame, cap: int = SHAPLEY_CAP) -> ShapleyVector:
    if g.n > cap:
        raise SizeCapError(
            f"exact Shapley over {g.n} players exceeds the cap of {cap}; use the sampled estimator")
    tab = g.table()
    vals = shapley_from_tables(g.n, lambda i: tab, tab)
    return ShapleyVector(dict(zip(g.players, vals.tolist())))


def _pair_gaps(g: CoalitionalGame):
    if g.n > MODULARITY_CAP:
        raise SizeCapError(f"exhaustive modularity test limited to {MODULARITY_CAP} players")
    tab = g.table()
    m = np.arange(1 << g.n)
    R, T = np.meshgrid(m, m, indexing="ij")
    # phi(R|T) + phi(R&T) - phi(R) - phi(T)
    return tab[R | T] + tab[R & T] - tab[R] - tab[T]


def is_supermodular(g: CoalitionalGame, tol: float = 1e-9) -> bool:
    return bool(np.all(_pair_gaps(g) >= -tol))


def is_submodular(g: CoalitionalGame, tol: float = 1e-9) -> bool:
    return bool(np.all(_pair_gaps(g) <= tol))


def shapley_sampled(g: CoalitionalGame, cfg: SamplingConfig, workers: int = 1) -> ShapleyVector:
    """Permutation estimate with the median over cfg.repetitions."""
    def marg(prefix, prev, who):
        return lookup(g.worth_mask, prefix) - lookup(g.worth_mask, prev)

    ((est, _),) = estimate(g.n, cfg, [marg], workers=workers)
    return ShapleyVector(dict(zip(g.players, est.tolist())))
