"""Obfuscation client: buffer maintenance and the rewrite round.

The obfuscation client reads two uniformly random positions per round and
writes back blocks drawn from a local buffer instead of the blocks it just
read (when the duplication guard allows). A block written this way entered
the buffer in some earlier round, so the position pair the server observes
is not linked to the pair the block originally came from — this is what
severs the duplication chains regular accesses leave behind.

Buffer policy per incoming block: if there is room and the block is a real
one whose id is not yet buffered, a copy is added; then, if the buffer is
full, one buffered block other than the copy that just entered is chosen
uniformly and evicted onto the incoming block's position. An incoming block
whose id is already buffered evicts nothing. Together these rules make the
buffer behave exactly like the two-partition card shuffle the mixing
analysis in caos.sim.stats models: a new arrival displaces one resident,
a repeat arrival changes nothing.

On the wire a round is indistinguishable from a regular access: one read
request, one write request, two sealed blocks each way.
"""

from __future__ import annotations

from .core import AccessPattern, BlockPlain, ClientMap
from .errors import CapacityError, ConfigError
from .client import Attempt, duplicate_block, run_attempt, sync


class ObfuscationBuffer:
    """Bounded set of buffered blocks, at most one per block id, never free."""

    __slots__ = ("capacity", "entries")

    def __init__(self, capacity: int, entries=()):
        self.capacity = capacity
        self.entries: list[BlockPlain] = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def bids(self) -> set[int]:
        return {b.bid for b in self.entries}

    def has_bid(self, bid: int) -> bool:
        return any(b.bid == bid for b in self.entries)

    def clone(self) -> "ObfuscationBuffer":
        return ObfuscationBuffer(self.capacity, (b.copy() for b in self.entries))

    def adopt(self, other: "ObfuscationBuffer") -> None:
        self.entries = other.entries


def update_buffer(blk: BlockPlain, p: int, buf: ObfuscationBuffer, cmap: ClientMap,
                  rng, fill_only: bool = False) -> BlockPlain:
    """Feed one fetched block through the buffer; returns the outgoing block.

    The outgoing block is `blk` itself, rewritten in place to a buffered
    block's copy when an eviction succeeded. `fill_only` restricts the call
    to the add step (used while the buffer is first being filled).
    """
    # drop buffered copies the map has since learned to be superseded; they
    # may not be written back, and holding them would only block their block
    # id from re-entering at the current version
    buf.entries = [
        e for e in buf.entries if e.ts >= cmap.entry(e.bid).ts
    ]

    added = None
    if not buf.full and not blk.is_free and not buf.has_bid(blk.bid):
        added = blk.copy()
        buf.entries.append(added)

    if fill_only or not buf.full:
        return blk

    if added is not None:
        candidates = [e for e in buf.entries if e is not added]
    elif not blk.is_free and buf.has_bid(blk.bid):
        # repeat arrival: the buffered set stays as it is, nothing leaves
        return blk
    else:
        candidates = buf.entries

    buf_blk = candidates[rng.randrange(len(candidates))]
    if duplicate_block(buf_blk, blk, p, cmap):
        buf.entries.remove(buf_blk)
    return blk


def oc_attempt(buf: ObfuscationBuffer, cmap: ClientMap, clock, rng,
               fill_only: bool = False, transactional: bool = True):
    """One obfuscation round as a request generator (see client.rw_attempt)."""
    p1 = rng.randrange(cmap.N)
    p2 = rng.randrange(cmap.N)
    while p2 == p1:
        p2 = rng.randrange(cmap.N)

    resp = yield ("read", p1, p2)
    if resp[0] == "locked":
        return Attempt(retry=True, reason="locked")
    _, token, b1, b2 = resp

    work = cmap.clone() if transactional else cmap
    wbuf = buf.clone() if transactional else buf
    sync(b1, p1, work, clock)
    sync(b2, p2, work, clock)
    out1 = update_buffer(b1, p1, wbuf, work, rng, fill_only)
    out2 = update_buffer(b2, p2, wbuf, work, rng, fill_only)

    resp = yield ("write", token, p1, out1, p2, out2)
    if resp[0] == "stale":
        return Attempt(retry=True, reason="stale")

    return Attempt(
        ok=True,
        pattern=AccessPattern(reads=[p1, p2], writes=[p1, p2]),
        map_commit=work if transactional else None,
        buf_commit=wbuf if transactional else None,
    )


def access_oc(buf: ObfuscationBuffer, session, cmap: ClientMap, clock, rng,
              retry_cap: int = 16) -> AccessPattern:
    """One committed obfuscation round; retries on lock conflicts/timeouts."""
    for _ in range(retry_cap):
        res = run_attempt(oc_attempt(buf, cmap, clock, rng), session)
        if res.map_commit is not None:
            cmap.adopt(res.map_commit)
        if res.buf_commit is not None:
            buf.adopt(res.buf_commit)
        if res.ok:
            return res.pattern
    raise CapacityError(f"obfuscation round gave up after {retry_cap} attempts")


def init_oc(session, cmap: ClientMap, s: int, clock, rng,
            round_cap: int | None = None) -> ObfuscationBuffer:
    """Fill a fresh buffer with s distinct blocks via ordinary read rounds.

    Rounds look exactly like later obfuscation rounds on the wire (blocks
    are written back unchanged, re-sealed), so the client is
    indistinguishable from round one. Needs 2 <= s <= n.
    """
    if s < 2:
        raise ConfigError(f"buffer size {s} below minimum 2")
    if s > cmap.n:
        raise CapacityError(f"buffer size {s} exceeds block count {cmap.n}")
    buf = ObfuscationBuffer(s)
    cap = round_cap if round_cap is not None else 64 + 32 * cmap.n
    rounds = 0
    while len(buf) < s:
        rounds += 1
        if rounds > cap:
            raise CapacityError(f"buffer fill did not reach {s} blocks in {cap} rounds")
        res = run_attempt(oc_attempt(buf, cmap, clock, rng, fill_only=True), session)
        if res.map_commit is not None:
            cmap.adopt(res.map_commit)
        if res.buf_commit is not None:
            buf.adopt(res.buf_commit)
    return buf
