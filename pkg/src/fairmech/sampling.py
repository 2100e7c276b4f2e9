"""Seeded permutation sampling for Shapley-style estimates.

Each repetition gets its own Philox stream keyed by (seed, repetition);
sample k of a repetition is the k-th block of n uniforms in that stream,
argsorted into a permutation. Repetitions are therefore independent of
each other and of how they are scheduled.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

CHUNK = 4096
U64 = np.uint64


@dataclass(frozen=True)
class SamplingConfig:
    m: int
    repetitions: int
    seed: int = 0
    epsilon: float = 0.1
    delta: float = 0.25

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be a positive integer")
        if int(self.repetitions) != self.repetitions or self.repetitions < 1 or self.repetitions % 2 == 0:
            raise ValueError("repetitions must be a positive odd integer")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    @classmethod
    def from_accuracy(cls, n_agents: int, epsilon: float = 0.1, delta: float = 0.25, seed: int = 0,
                      m: int | None = None, repetitions: int | None = None) -> "SamplingConfig":
        """Defaults m = ceil(4 n (n-1) / eps^2), reps = smallest odd >= 8 ln(1/delta)."""
        if not 0 < epsilon:
            raise ValueError("epsilon must be positive")
        if not 0 < delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if m is None:
            m = max(1, math.ceil(4 * n_agents * (n_agents - 1) / epsilon**2))
        if repetitions is None:
            repetitions = max(1, math.ceil(8 * math.log(1 / delta)))
            if repetitions % 2 == 0:
                repetitions += 1
        return cls(int(m), int(repetitions), int(seed), float(epsilon), float(delta))

    def as_dict(self):
        return asdict(self)


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def rep_generator(seed: int, rep: int) -> np.random.Generator:
    key = np.random.SeedSequence([seed, rep]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def permutations(gen: np.random.Generator, n: int, count: int) -> np.ndarray:
    return gen.random((count, n)).argsort(axis=1, kind="stable")


def lookup(fn: Callable[[int], float], masks: np.ndarray) -> np.ndarray:
    """Evaluate fn once per distinct mask and broadcast back."""
    u, inv = np.unique(masks, return_inverse=True)
    vals = np.fromiter((fn(int(x)) for x in u), dtype=float, count=len(u))
    return vals[inv.ravel()]


# marginal(with_i, without_i, agent) -> marginal values, all flat arrays
Marginal = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def run_repetition(n: int, m: int, seed: int, rep: int, marginals: Sequence[Marginal]) -> list:
    """Mean marginal contribution per agent for each estimator, one repetition.

    Every sampled permutation ends with the grand coalition, so its worth
    is always among the evaluated coalitions.
    """
    gen = rep_generator(seed, rep)
    sums = [np.zeros(n) for _ in marginals]
    done = 0
    while done < m:
        c = min(CHUNK, m - done)
        perms = permutations(gen, n, c)
        bits = np.left_shift(U64(1), perms.astype(U64))
        prefix = np.cumsum(bits, axis=1, dtype=U64)
        prev = prefix - bits
        who = perms.ravel()
        for acc, fn in zip(sums, marginals):
            acc += np.bincount(who, weights=fn(prefix.ravel(), prev.ravel(), who), minlength=n)
        done += c
    return [acc / m for acc in sums]


def estimate(n: int, cfg: SamplingConfig, marginals: Sequence[Marginal], workers: int = 1):
    """Componentwise median over repetitions, for each estimator.

    Returns (medians, per-repetition arrays).
    """
    def one(r):
        return run_repetition(n, cfg.m, cfg.seed, r, marginals)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            per_rep = list(ex.map(one, range(cfg.repetitions)))
    else:
        per_rep = [one(r) for r in range(cfg.repetitions)]
    out = []
    for k in range(len(marginals)):
        stack = np.stack([pr[k] for pr in per_rep])
        out.append((np.median(stack, axis=0), stack))
    return out
