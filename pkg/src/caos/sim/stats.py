"""Statistical oracles for the obfuscation analysis.

Three quantities matter for how long the obfuscation client must run:

  * the probability that some store position has not been overwritten
    after r uniform single-position writes (inclusion-exclusion over the
    missed positions);
  * the expected number of uniform writes to cover all N positions (the
    coupon-collector mean N*H_N);
  * how fast the buffer's eviction stream forgets its initial contents,
    modeled as a two-partition card shuffle: each round moves a random
    card of the buffer partition U into the store partition V and a random
    V card into the vacated place. Its relaxation is bounded by a
    top-to-random shuffle, tracked here through the classic bottom-card
    coupling.

Exact values use rational arithmetic where feasible; Monte Carlo routines
take a caller-provided rng so every figure is reproducible from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

_EXACT_N_LIMIT = 64


def p_survive(N: int, r: int) -> float:
    """P(at least one of N positions untouched after r uniform overwrites).

    Inclusion-exclusion: sum_{i=1..N} (-1)^(i+1) C(N,i) ((N-i)/N)^r.
    Exact rational evaluation up to N=64; compensated float summation above
    (the alternating terms are large and cancel).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if r < 0:
        raise ValueError("r must be >= 0")
    return float(p_survive_exact(N, r)) if N <= _EXACT_N_LIMIT else _p_survive_fsum(N, r)


def p_survive_exact(N: int, r: int) -> Fraction:
    total = Fraction(0)
    for i in range(1, N + 1):
        term = Fraction(math.comb(N, i)) * Fraction(N - i, N) ** r
        total += term if i % 2 == 1 else -term
    return total


def _p_survive_fsum(N: int, r: int) -> float:
    terms = []
    for i in range(1, N + 1):
        t = math.comb(N, i) * ((N - i) / N) ** r
        terms.append(t if i % 2 == 1 else -t)
    return min(1.0, max(0.0, math.fsum(terms)))


def survival_by_enumeration(N: int, r: int) -> Fraction:
    """Brute-force oracle: walk all N^r overwrite sequences and count those
    leaving at least one position untouched. Exponential; small N, r only."""
    if r == 0:
        return Fraction(1)
    hit = 0
    for seq in product(range(N), repeat=r):
        if len(set(seq)) < N:
            hit += 1
    return Fraction(hit, N**r)


def harmonic(n: int) -> Fraction:
    return sum((Fraction(1, k) for k in range(1, n + 1)), Fraction(0))


def coupon_collector_mean(N: int) -> float:
    """Exact expected rounds to overwrite every position: N * H_N."""
    return float(N * harmonic(N))


def eq_coverage_bound(N: int) -> float:
    """The 1 + N log N figure quoted for full coverage; reported alongside
    the exact mean, which exceeds it by roughly gamma*N for natural log."""
    return 1 + N * math.log(N)


def eq_buffer_bound(n: int, s: int) -> float:
    """The 1 + (n-s) log (n-s) + s figure quoted for buffer randomization."""
    m = n - s
    return 1 + (m * math.log(m) if m > 0 else 0.0) + s


def obfuscation_rounds_bound(n: int, s: int, N: int) -> int:
    """Round budget combining buffer randomization and store coverage:
    ceil(2 + s + (n-s)ln(n-s) + N ln N)."""
    m = n - s
    return math.ceil(2 + s + (m * math.log(m) if m > 0 else 0.0) + N * math.log(N))


@dataclass
class OverwriteStats:
    N: int
    trials: int
    mean: float
    variance: float
    exact_mean: float
    reported_bound: float
    survive_fraction: dict[int, float] = field(default_factory=dict)


def simulate_overwrite_rounds(N: int, trials: int, rng,
                              survive_at: tuple[int, ...] = ()) -> OverwriteStats:
    """Coupon-collector Monte Carlo: rounds until every position was drawn.

    Also estimates, for each r in survive_at, the fraction of trials still
    missing a position after r rounds — the empirical counterpart of
    p_survive(N, r).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    counts = []
    survive_hits = {r: 0 for r in survive_at}
    for _ in range(trials):
        seen = bytearray(N)
        remaining = N
        rounds = 0
        while remaining:
            p = rng.randrange(N)
            rounds += 1
            if not seen[p]:
                seen[p] = 1
                remaining -= 1
        counts.append(rounds)
        for r in survive_at:
            if rounds > r:
                survive_hits[r] += 1
    mean = math.fsum(counts) / trials
    var = math.fsum((c - mean) ** 2 for c in counts) / (trials - 1) if trials > 1 else 0.0
    return OverwriteStats(
        N=N,
        trials=trials,
        mean=mean,
        variance=var,
        exact_mean=coupon_collector_mean(N),
        reported_bound=eq_coverage_bound(N),
        survive_fraction={r: survive_hits[r] / trials for r in survive_at},
    )


# -- two-partition buffer shuffle ---------------------------------------------


def obs_shuffle_evictions(n: int, s: int, rounds: int, rng) -> list[int]:
    """Run the buffer shuffle for `rounds` rounds; return the evicted card ids.

    Deck of n cards, U = the first s (the buffer), V = the rest (the store).
    One round swaps a uniform U card with a uniform V card; the U card that
    left is that round's eviction.
    """
    if not 1 <= s < n:
        raise ValueError("need 1 <= s < n")
    deck = list(range(n))
    out = []
    for _ in range(rounds):
        i = rng.randrange(s)
        j = s + rng.randrange(n - s)
        out.append(deck[i])
        deck[i], deck[j] = deck[j], deck[i]
    return out


def tracked_card_rounds(n: int, s: int, rng) -> int:
    """Rounds for the deck's bottom card to reach the top in the coupled
    top-to-random variant of the shuffle.

    In that variant the top card of U goes to a uniform position of V and
    the top card of V enters at the bottom of U. Only the tracked card's
    depth matters: each round the removal lifts it one step and an insertion
    above it (probability (d-1)/m after the removal) pushes it back, then it
    traverses the s-slot buffer queue.
    """
    m = n - s
    if m < 1:
        raise ValueError("need s < n")
    rounds = 0
    d = m
    while d > 1:
        rounds += 1
        if rng.randrange(m) >= d - 1:
            d -= 1
    return rounds + s


def tv_distance(counts_a: dict[int, int], counts_b: dict[int, int]) -> float:
    """Total variation distance between two empirical distributions."""
    tot_a = sum(counts_a.values())
    tot_b = sum(counts_b.values())
    keys = set(counts_a) | set(counts_b)
    return 0.5 * sum(
        abs(counts_a.get(k, 0) / tot_a - counts_b.get(k, 0) / tot_b) for k in keys
    )


@dataclass
class MixingReport:
    n: int
    s: int
    rounds: int
    trials: int
    window: tuple[int, int, int]  # window edges [w0, w1), [w1, w2)
    tv_between_windows: float
    eviction_counts: dict[str, dict[int, int]]
    tracked_trials: int = 0
    tracked_mean: float = 0.0
    tracked_std: float = 0.0
    tracked_bound: float = 0.0


def simulate_obs_shuffle(n: int, s: int, rounds: int, trials: int, rng,
                         tracked_trials: int = 0) -> MixingReport:
    """Mixing measurements for the buffer shuffle.

    Pools the evicted-card ids of all trials over two successive round
    windows [rounds, 2*rounds) and [2*rounds, 3*rounds) and reports the
    total-variation distance between the two empirical distributions: once
    the chain has relaxed, successive windows draw from the same
    distribution. Optionally also samples the tracked-card coupling and
    compares its mean against the 1 + (n-s)log(n-s) + s figure.
    """
    w1 = {i: 0 for i in range(n)}
    w2 = {i: 0 for i in range(n)}
    for _ in range(trials):
        evts = obs_shuffle_evictions(n, s, 3 * rounds, rng)
        for e in evts[rounds : 2 * rounds]:
            w1[e] += 1
        for e in evts[2 * rounds : 3 * rounds]:
            w2[e] += 1

    tracked = [tracked_card_rounds(n, s, rng) for _ in range(tracked_trials)]
    t_mean = math.fsum(tracked) / len(tracked) if tracked else 0.0
    t_std = (
        math.sqrt(math.fsum((t - t_mean) ** 2 for t in tracked) / (len(tracked) - 1))
        if len(tracked) > 1 else 0.0
    )
    return MixingReport(
        n=n, s=s, rounds=rounds, trials=trials,
        window=(rounds, 2 * rounds, 3 * rounds),
        tv_between_windows=tv_distance(w1, w2),
        eviction_counts={"window1": w1, "window2": w2},
        tracked_trials=tracked_trials,
        tracked_mean=t_mean,
        tracked_std=t_std,
        tracked_bound=eq_buffer_bound(n, s),
    )
