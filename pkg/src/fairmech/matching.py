"""Optimal capacity-constrained allocation and a memoised coalition oracle.

Capacities are handled by cloning each agent into unit-capacity copies,
which turns the problem into a rectangular max-weight bipartite matching.
Non-positive scores are zeroed first: leaving a slot empty is always
feasible, so a good with non-positive gain is never worth allocating.
"""
from __future__ import annotations

import math
from typing import Iterable, Iterator

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import SizeCapError, StructuralError
from .model import Allocation, Scenario, TypeVector

BACKENDS = ("scipy", "ssp")

# enumerate_optima / feasible_allocations guards
MAX_ENUM_CLONES = 8
MAX_ENUM_GOODS = 8
MAX_FEASIBLE = 2_000_000


def _tol(x: float) -> float:
    return 1e-9 * max(1.0, abs(x))


def positive_weights(w: TypeVector, agents, goods) -> np.ndarray:
    m = w.matrix(agents, goods)
    return np.where(m > 0, m, 0.0)


def ssp_assignment(weights: np.ndarray):
    """Max-weight matching of a rows x cols matrix, not necessarily perfect.

    Successive shortest paths on the residual graph with Bellman-Ford;
    stops as soon as the cheapest augmenting path no longer pays. Pure
    Python, kept as an independent reference for the scipy backend.
    Returns (rows, cols) of the matched pairs with positive weight.
    """
    nr, nc = weights.shape
    match_r = [-1] * nr
    match_c = [-1] * nc
    wt = weights.tolist()
    while True:
        # dist over rows via the residual graph: source -> free row -> col -> ...
        # col nodes are reached from a row through an unmatched edge (cost -w),
        # rows from a col through its matched edge (cost +w).
        INF = math.inf
        dr = [0.0 if match_r[i] < 0 else INF for i in range(nr)]
        dc = [INF] * nc
        prev_c = [-1] * nc
        changed = True
        while changed:
            changed = False
            for i in range(nr):
                di = dr[i]
                if di == INF:
                    continue
                row = wt[i]
                for j in range(nc):
                    if row[j] <= 0 or match_r[i] == j:
                        continue
                    nd = di - row[j]
                    if nd < dc[j] - 1e-12:
                        dc[j] = nd
                        prev_c[j] = i
                        changed = True
            for j in range(nc):
                i = match_c[j]
                if i >= 0 and dc[j] < INF:
                    nd = dc[j] + wt[i][j]
                    if nd < dr[i] - 1e-12:
                        dr[i] = nd
                        changed = True
        best, bj = 0.0, -1
        for j in range(nc):
            if match_c[j] < 0 and dc[j] < best - 1e-12:
                best, bj = dc[j], j
        if bj < 0:
            break
        j = bj
        while j >= 0:
            i = prev_c[j]
            nxt = match_r[i]
            match_r[i] = j
            match_c[j] = i
            j = nxt
    rows = [i for i in range(nr) if match_r[i] >= 0]
    return np.array(rows, dtype=int), np.array([match_r[i] for i in rows], dtype=int)


def _match(clones: np.ndarray, backend: str):
    if clones.size == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    if backend == "scipy":
        return linear_sum_assignment(clones, maximize=True)
    if backend == "ssp":
        return ssp_assignment(clones)
    raise ValueError(f"unknown backend {backend!r}")


def _assign(P: np.ndarray, caps: np.ndarray, backend: str):
    """Solve on an agent x good matrix of non-negative gains.

    Returns (value, set of (agent row, good col) pairs with positive gain).
    """
    ncols = P.shape[1]
    reps = np.minimum(caps, ncols)
    owner = np.repeat(np.arange(P.shape[0]), reps)
    clones = P[owner]
    r, c = _match(clones, backend)
    keep = clones[r, c] > 0
    r, c = r[keep], c[keep]
    val = float(clones[r, c].sum())
    return val, {(int(owner[i]), int(j)) for i, j in zip(r, c)}


def solve_optimal(s: Scenario, w: TypeVector, backend: str = "scipy") -> Allocation:
    """An optimal allocation, canonical among all optima.

    Among optimal allocations the one returned is lexicographically
    smallest as a sorted list of (agent index, good index) pairs. Pairs
    are decided greedily in that order; a pair is kept iff some optimum
    extends the choices so far plus the pair. A witness optimum avoids
    re-solving for pairs it already contains.
    """
    w.check(s)
    if not s.agents or not s.goods:
        return Allocation()
    P = positive_weights(w, s.agents, s.goods)
    caps = np.array([s.capacity[a] for a in s.agents])
    opt, witness = _assign(P, caps, backend)
    tol = _tol(opt)
    P = P.copy()
    chosen = []
    acc = 0.0
    for a in range(P.shape[0]):
        for g in range(P.shape[1]):
            if caps[a] == 0:
                break
            x = P[a, g]
            if x <= 0:
                continue
            if (a, g) in witness:
                ok = True
            else:
                P2 = P.copy()
                P2[:, g] = 0.0
                c2 = caps.copy()
                c2[a] -= 1
                rest, sol = _assign(P2, c2, backend)
                ok = acc + x + rest >= opt - tol
                if ok:
                    witness = set(chosen) | {(a, g)} | sol
            if ok:
                chosen.append((a, g))
                acc += x
                P[:, g] = 0.0
                caps[a] -= 1
            else:
                P[a, g] = 0.0
    return Allocation.from_pairs((s.agents[a], s.goods[g]) for a, g in chosen)


class OptCache:
    """Memoised opt(C, G') for one scenario and one score vector.

    Keys are (coalition bitmask, goods bitmask) over the scenario orderings.
    Writes are idempotent, so concurrent use from threads is harmless.
    """

    def __init__(self, s: Scenario, w: TypeVector, backend: str = "scipy"):
        if s.n > 64:
            raise SizeCapError("coalition bitmasks support at most 64 agents")
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}")
        w.check(s)
        self.scenario = s
        self.w = w
        self.backend = backend
        self._P = positive_weights(w, s.agents, s.goods)
        self._caps = np.array([s.capacity[a] for a in s.agents], dtype=np.int64)
        self._values: dict = {}
        self._clones: dict = {}
        self.all_goods = (1 << len(s.goods)) - 1
        self.solves = 0

    def goods_mask(self, goods: Iterable[str]) -> int:
        m = 0
        for g in goods:
            m |= 1 << self.scenario.good_index(g)
        return m

    def _clone_matrix(self, gmask: int):
        hit = self._clones.get(gmask)
        if hit is None:
            cols = [j for j in range(len(self.scenario.goods)) if gmask >> j & 1]
            sub = self._P[:, cols]
            reps = np.minimum(self._caps, len(cols))
            owner = np.repeat(np.arange(self.scenario.n), reps)
            bits = np.left_shift(np.uint64(1), owner.astype(np.uint64))
            hit = (np.ascontiguousarray(sub[owner]), bits)
            self._clones[gmask] = hit
        return hit

    def _solve(self, clones, bits, mask) -> float:
        sub = clones[(bits & np.uint64(mask)) != 0]
        if sub.shape[0] == 0:
            return 0.0
        if sub.shape[0] == 1:
            return float(sub.max())
        r, c = _match(sub, self.backend)
        self.solves += 1
        return float(sub[r, c].sum())

    def value(self, mask: int, gmask: int | None = None) -> float:
        if gmask is None:
            gmask = self.all_goods
        key = (mask, gmask)
        v = self._values.get(key)
        if v is None:
            if mask == 0 or gmask == 0:
                v = 0.0
            else:
                clones, bits = self._clone_matrix(gmask)
                v = self._solve(clones, bits, mask)
            self._values[key] = v
        return v

    def table(self, gmask: int | None = None, include: int | None = None) -> np.ndarray:
        """opt for every coalition bitmask, as an array of length 2^n.

        With include=i only coalitions containing agent i are solved; the
        other entries are left at 0.
        """
        if gmask is None:
            gmask = self.all_goods
        n = self.scenario.n
        size = 1 << n
        out = np.zeros(size)
        if gmask == 0:
            return out
        clones, bits = self._clone_matrix(gmask)
        vals = self._values
        need = 1 << include if include is not None else 0
        for mask in range(1, size):
            if mask & need != need:
                continue
            key = (mask, gmask)
            v = vals.get(key)
            if v is None:
                v = self._solve(clones, bits, mask)
                vals[key] = v
            out[mask] = v
        return out

    def values(self, masks, gmask: int | None = None) -> np.ndarray:
        return np.array([self.value(int(m), gmask) for m in masks], dtype=float)

    def __len__(self):
        return len(self._values)


def opt_value(s: Scenario, coalition: Iterable[str], goods: Iterable[str], w: TypeVector,
              cache: OptCache | None = None) -> float:
    if cache is None:
        cache = OptCache(s, w)
    elif cache.scenario != s or cache.w != w:
        raise StructuralError("cache was built for a different scenario or score vector")
    return cache.value(s.mask_of(coalition), cache.goods_mask(goods))


# --- enumeration ----------------------------------------------------------

def _enum_guard(s: Scenario):
    clones = sum(min(s.capacity[a], len(s.goods)) for a in s.agents)
    if clones > MAX_ENUM_CLONES or len(s.goods) > MAX_ENUM_GOODS:
        raise SizeCapError(
            f"enumeration limited to {MAX_ENUM_CLONES} clones and {MAX_ENUM_GOODS} goods "
            f"(got {clones} clones, {len(s.goods)} goods)")


def enumerate_optima(s: Scenario, w: TypeVector, limit: int | None = None) -> list:
    """Every optimal allocation, including ones that hand out zero-valued goods."""
    w.check(s)
    _enum_guard(s)
    W = w.matrix(s.agents, s.goods)
    n, m = W.shape
    opt = OptCache(s, w).value((1 << n) - 1)
    tol = 1e-9
    # best possible gain from goods j.. onward
    gain = np.where(W > 0, W, 0.0).max(axis=0) if n else np.zeros(m)
    tail = np.concatenate([np.cumsum(gain[::-1])[::-1], [0.0]]) if m else np.zeros(1)
    caps = [s.capacity[a] for a in s.agents]
    out = []
    cur: list = []

    def rec(j, acc):
        if limit is not None and len(out) >= limit:
            return
        if acc + tail[j] < opt - tol:
            return
        if j == m:
            if acc >= opt - tol:
                out.append(Allocation.from_pairs((s.agents[a], s.goods[g]) for a, g in cur))
            return
        for a in range(n):
            if caps[a] and W[a, j] >= 0:
                caps[a] -= 1
                cur.append((a, j))
                rec(j + 1, acc + W[a, j])
                cur.pop()
                caps[a] += 1
        rec(j + 1, acc)

    rec(0, 0.0)
    return out


def count_feasible(s: Scenario, goods=None) -> int:
    """Number of feasible allocations over `goods` (default: all goods)."""
    goods = s.goods if goods is None else s.ordered_goods(goods)
    caps = tuple(s.capacity[a] for a in s.agents)
    memo: dict = {}

    def rec(j, caps):
        if j == len(goods):
            return 1
        key = (j, caps)
        if key not in memo:
            tot = rec(j + 1, caps)
            for k, c in enumerate(caps):
                if c:
                    tot += rec(j + 1, caps[:k] + (c - 1,) + caps[k + 1:])
            memo[key] = tot
        return memo[key]

    return rec(0, caps)


def feasible_allocations(s: Scenario, goods=None) -> Iterator[Allocation]:
    """Every feasible allocation (brute force, for tiny instances)."""
    goods = s.goods if goods is None else s.ordered_goods(goods)
    total = count_feasible(s, goods)
    if total > MAX_FEASIBLE:
        raise SizeCapError(f"{total} feasible allocations exceeds the cap of {MAX_FEASIBLE}")
    caps = [s.capacity[a] for a in s.agents]
    cur: list = []

    def rec(j):
        if j == len(goods):
            yield Allocation.from_pairs(cur)
            return
        yield from rec(j + 1)
        for k, a in enumerate(s.agents):
            if caps[k]:
                caps[k] -= 1
                cur.append((a, goods[j]))
                yield from rec(j + 1)
                cur.pop()
                caps[k] += 1

    yield from rec(0)
