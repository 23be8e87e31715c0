"""Deterministic in-memory laboratory: interleaved multi-client simulation,
invariant checkers, the empirical privacy game, and the statistical oracles
behind the mixing and coverage claims."""
