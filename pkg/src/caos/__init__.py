"""CAOS: a concurrent-access obfuscated store.

A position-addressed encrypted block server with two-position locking,
read-write/read-only client logic with independent per-client maps, an
obfuscation client that rewrites random positions from a local buffer, and
a deterministic simulation lab for the protocol's invariants and its
statistical obfuscation claims.
"""

__version__ = "0.1.0"
