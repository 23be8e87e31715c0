"""Empirical data and access-pattern privacy game.

One experiment: initialize a store and an obfuscation buffer, then for each
of q queries run the obfuscation client r rounds and perform one challenged
access on block B_b (b hidden). The adversary sees the initial layout of
store and buffer plus the position trace of every access, and guesses b;
its advantage is |P[guess=1 | b=0] - P[guess=1 | b=1]| estimated over many
trials with a binomial confidence interval.

The challenger runs on the plain in-memory session: the trace consists of
positions only, so sealing is irrelevant here, and the game needs millions
of obfuscation rounds. Accesses run sequentially, hence without lock
conflicts; the protocol logic is the same code the sealed stack drives.

Built-in adversaries:
  * frequency counter — scores challenge positions against the challenged
    blocks' initial positions;
  * duplication-chain linker — grows, for every block id, the set of
    positions reachable through observed read/write pairs, and scores
    challenge positions by normalized membership;
  * random guesser — the null baseline.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from ..client import OP_READ, run_attempt, rw_attempt, init_store
from ..core import HybridClock, Role
from ..errors import ConfigError
from ..oc import ObfuscationBuffer, init_oc, oc_attempt, update_buffer
from .stats import obfuscation_rounds_bound
from .world import PlainSession, SimClock


@dataclass(frozen=True)
class GameConfig:
    n: int = 8
    N: int = 32
    s: int = 4
    r: int = 0          # obfuscation rounds per query
    q: int = 16         # queries per trial
    trials: int = 2000  # trials per arm
    C: int = 2
    block_size: int = 8
    client_count: int = 2  # the read-write client and the obfuscation client

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("game needs at least two blocks")
        if self.q < 1 or self.r < 0:
            raise ConfigError("need q >= 1 and r >= 0")


@dataclass
class TrialEnv:
    """Everything the adversary observes in one experiment run."""

    initial_positions: dict[int, tuple[int, ...]]  # bid -> positions after setup
    initial_buffer: tuple[int, ...]                # bids buffered after OC init
    trace: list[tuple[str, int, int, int]]         # (phase, query, p1, p2) per access
    challenges: list[tuple[int, int]]              # (B0, B1) per query
    challenge_patterns: list[list[tuple[int, int]]]  # per query: patterns of its attempts


def _run_trial(cfg: GameConfig, b: int, seed: int) -> TrialEnv:
    rng = random.Random(seed)
    clock = SimClock()
    hlc = HybridClock(clock)
    session = PlainSession(cfg.N, cfg.block_size)

    payloads = [bytes([bid % 256]) * cfg.block_size for bid in range(cfg.n)]
    rw_map = init_store(payloads, cfg.N, cfg.C, cfg.client_count,
                        hlc, rng, session, client_id=0)
    oc_map = rw_map.clone()
    oc_map.client_id = 1
    oc_map.role = Role.OBFUSCATION
    oc_hlc = HybridClock(clock)
    buf = init_oc(session, oc_map, cfg.s, oc_hlc, rng)

    layout: dict[int, list[int]] = {bid: [] for bid in range(cfg.n)}
    for p, blk in enumerate(session.slots):
        if not blk.is_free:
            layout[blk.bid].append(p)

    trace: list[tuple[str, int, int, int]] = []
    challenges: list[tuple[int, int]] = []
    challenge_patterns: list[list[tuple[int, int]]] = []

    for j in range(cfg.q):
        clock.advance(1)
        for _ in range(cfg.r):
            res = run_attempt(
                oc_attempt(buf, oc_map, oc_hlc, rng, transactional=False), session
            )
            assert res.ok
            trace.append(("oc", j, res.pattern.reads[0], res.pattern.reads[1]))

        b0, b1 = 0, 1  # fixed challenge pair: strongest frequency signal
        challenges.append((b0, b1))
        bid = b1 if b else b0
        patterns = []
        for _ in range(64):
            res = run_attempt(
                rw_attempt(bid, OP_READ, None, rw_map, hlc, rng, transactional=False),
                session,
            )
            patterns.append((res.pattern.reads[0], res.pattern.reads[1]))
            trace.append(("challenge", j, res.pattern.reads[0], res.pattern.reads[1]))
            if res.ok:
                break
        else:
            raise ConfigError("challenge access did not complete")
        challenge_patterns.append(patterns)

    return TrialEnv(
        initial_positions={bid: tuple(ps) for bid, ps in layout.items()},
        initial_buffer=tuple(sorted(buf.bids())),
        trace=trace,
        challenges=challenges,
        challenge_patterns=challenge_patterns,
    )


class RandomGuessAdversary:
    name = "random-guess"

    def guess(self, env: TrialEnv, rng) -> int:
        return rng.getrandbits(1)


class FrequencyAdversary:
    """Counts challenge positions that coincide with the challenged blocks'
    initial positions. With no obfuscation rounds the requested position is
    always drawn from a set seeded by the initial layout."""

    name = "frequency"

    def guess(self, env: TrialEnv, rng) -> int:
        score = [0, 0]
        for (b0, b1), patterns in zip(env.challenges, env.challenge_patterns):
            init0 = set(env.initial_positions[b0])
            init1 = set(env.initial_positions[b1])
            for p1, p2 in patterns:
                score[0] += (p1 in init0) + (p2 in init0)
                score[1] += (p1 in init1) + (p2 in init1)
        if score[0] == score[1]:
            return rng.getrandbits(1)
        return 0 if score[0] > score[1] else 1


class ChainLinkAdversary:
    """Follows duplication links: every observed access couples its two
    positions, since the requested block may have been copied onto the
    other. Challenge positions are scored by normalized membership in each
    challenged block's reachable-position set."""

    name = "chain-linker"

    def guess(self, env: TrialEnv, rng) -> int:
        cand: dict[int, int] = {
            bid: self._mask(ps) for bid, ps in env.initial_positions.items()
        }
        score = [0.0, 0.0]
        # replay the trace in order, growing the link sets; score each
        # challenge pattern against the sets as they stood when it happened
        for phase, j, p1, p2 in env.trace:
            if phase == "challenge":
                b0, b1 = env.challenges[j]
                bits = (1 << p1) | (1 << p2)
                for k, bb in enumerate((b0, b1)):
                    m = cand[bb]
                    known = m.bit_count()
                    if known:
                        score[k] += (m & bits).bit_count() / known
            self._link(cand, p1, p2)
        if abs(score[0] - score[1]) < 1e-12:
            return rng.getrandbits(1)
        return 0 if score[0] > score[1] else 1

    @staticmethod
    def _mask(positions) -> int:
        m = 0
        for p in positions:
            m |= 1 << p
        return m

    @staticmethod
    def _link(cand: dict[int, int], p1: int, p2: int) -> None:
        b1 = 1 << p1
        b2 = 1 << p2
        both = b1 | b2
        for bid, mask in cand.items():
            if mask & both:
                cand[bid] = mask | both


BUILTIN_ADVERSARIES = (FrequencyAdversary, ChainLinkAdversary, RandomGuessAdversary)


@dataclass
class AdvantageReport:
    adversary: str
    trials: int
    p_guess1_b0: float
    p_guess1_b1: float
    advantage: float
    ci95: float  # half-width of the 95% interval on the advantage estimate

    def summary(self) -> str:
        return (
            f"{self.adversary}: advantage {self.advantage:.4f} "
            f"(95% CI +/- {self.ci95:.4f}, {self.trials} trials/arm)"
        )


def _advantage(guess1_counts: tuple[int, int], trials: int, name: str) -> AdvantageReport:
    p0 = guess1_counts[0] / trials
    p1 = guess1_counts[1] / trials
    ci = 1.96 * math.sqrt(p0 * (1 - p0) / trials + p1 * (1 - p1) / trials)
    return AdvantageReport(name, trials, p0, p1, abs(p0 - p1), ci)


def run_game(cfg: GameConfig, adversary, seed: int = 0) -> AdvantageReport:
    """Estimate one adversary's advantage over cfg.trials trials per arm."""
    return run_game_multi(cfg, [adversary], seed)[adversary.name]


def run_game_multi(cfg: GameConfig, adversaries, seed: int = 0) -> dict[str, AdvantageReport]:
    """Estimate several adversaries' advantage on shared challenger runs.

    All built-in adversaries use the same challenge plan (fixed block pair,
    read operations), so each simulated experiment can be scored by every
    adversary; this halves the dominating simulation cost.
    """
    counts = {a.name: [0, 0] for a in adversaries}
    root = random.Random(seed)
    for b in (0, 1):
        for t in range(cfg.trials):
            trial_seed = root.randrange(2**63)
            env = _run_trial(cfg, b, trial_seed)
            for adv in adversaries:
                grng = random.Random(f"{trial_seed}:{adv.name}")
                if adv.guess(env, grng) == 1:
                    counts[adv.name][b] += 1
    return {
        name: _advantage(tuple(c), cfg.trials, name) for name, c in counts.items()
    }
