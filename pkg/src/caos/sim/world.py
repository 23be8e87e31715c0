"""Simulation world: virtual time, in-memory stores, and client runners.

Concurrency here is modeled, not executed. Client accesses are message-level
generators (see caos.client); a single-threaded scheduler decides which
client's next request is delivered, so read and write halves of different
clients interleave arbitrarily while every run stays replayable from its
seed. Lock timeouts are driven by an explicit virtual clock.

Two store flavors:
  * a sealed store (a real StoreServer over in-memory slots, real AEAD) for
    protocol fuzzing — checkers decrypt slots with the store key;
  * a plain session holding decrypted blocks with no locking, for the
    privacy game where only position traces matter and millions of rounds
    must run quickly; accesses there are sequential, so locks could never
    be contended anyway.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .. import codec
from ..client import (
    OP_READ, OP_WRITE, Attempt, BlockSession, rw_attempt, run_attempt,
)
from ..core import BlockPlain, ClientMap, HybridClock, Role
from ..errors import CaosError
from ..oc import ObfuscationBuffer, init_oc, oc_attempt
from ..server import memory_server
from .. import client as client_mod
from .. import wire


class SimClock:
    """Virtual milliseconds shared by the whole world."""

    __slots__ = ("now_ms",)

    def __init__(self, start: int = 1_000):
        self.now_ms = start

    def advance(self, ms: int) -> None:
        self.now_ms += ms

    def __call__(self) -> int:
        return self.now_ms


class PlainSession:
    """Lock-free block-level session over plaintext slots (game fast path)."""

    def __init__(self, N: int, block_size: int):
        self.N = N
        self.block_size = block_size
        self.slots: list[BlockPlain | None] = [None] * N
        self.log: list[tuple[str, int, int]] = []

    def bulk_init(self, blocks) -> None:
        assert len(blocks) == self.N
        self.slots = [b.copy() for b in blocks]

    def read_pair(self, p1: int, p2: int):
        self.log.append(("R", p1, p2))
        return 0, self.slots[p1].copy(), self.slots[p2].copy()

    def write_pair(self, token: int, p1: int, b1: BlockPlain, p2: int, b2: BlockPlain) -> None:
        self.log.append(("W", p1, p2))
        self.slots[p1] = b1.copy()
        self.slots[p2] = b2.copy()

    def block_at(self, p: int) -> BlockPlain:
        return self.slots[p]


@dataclass
class SimStats:
    accesses: int = 0
    reads_ok: int = 0
    writes_ok: int = 0
    retries: int = 0
    locked: int = 0
    stale: int = 0
    wrong_block: int = 0


class SimClient:
    """One simulated client: map, clock, rng, optional buffer, live attempt."""

    def __init__(self, client_id: int, role: Role, cmap: ClientMap, key: bytes,
                 block_size: int, clock: SimClock, seed: int):
        self.client_id = client_id
        self.role = role
        self.cmap = cmap
        self.key = key
        self.block_size = block_size
        self.rng = random.Random(seed)
        self.hlc = HybridClock(clock)
        self.buf: ObfuscationBuffer | None = None
        self.stats = SimStats()
        # in-flight state
        self._gen = None
        self._pending = None  # request waiting to be delivered
        self._access = None  # (op, bid, data, attempt_no, cap)

    @property
    def idle(self) -> bool:
        return self._gen is None

    def seal(self, block: BlockPlain) -> bytes:
        return codec.seal(self.key, block, self.block_size, self.rng)

    def open(self, sealed: bytes) -> BlockPlain:
        return codec.open_sealed(self.key, sealed, self.block_size)


class SealedWorld:
    """Full-protocol world: StoreServer over memory slots, sealed blocks.

    Drives client attempt generators one message at a time. `step_client`
    delivers exactly one request for the given client (starting a new access
    if it is idle) and returns the completed Attempt when the access's
    current attempt finished, else None.
    """

    def __init__(self, n: int, N: int, C: int, roles: list[Role], block_size: int,
                 seed: int, lock_timeout_ms: int = 5000):
        if roles.count(Role.READ_WRITE) != 1:
            raise CaosError("exactly one read-write client required")
        self.n, self.N, self.C = n, N, C
        self.block_size = block_size
        self.clock = SimClock()
        self.server = memory_server(
            N, codec.sealed_size(block_size),
            lock_timeout_ms=lock_timeout_ms, now_fn=self.clock,
        )
        self.seed = seed
        root = random.Random(seed)
        self.key = codec.keygen()
        self.clients: list[SimClient] = []

        # initialize through the real path: RW client builds and uploads
        init_rng = random.Random(root.randrange(2**63))
        payload_rng = random.Random(root.randrange(2**63))
        payloads = [payload_rng.randbytes(block_size) for _ in range(n)]
        boot_clock = HybridClock(self.clock)
        rw_map = client_mod.init_store(
            payloads, N, C, client_count=len(roles), clock=boot_clock,
            rng=init_rng, session=self._blocking_session(init_rng),
        )
        self.init_ts = rw_map.entries[0].ts
        self.initial_payloads = payloads

        for cid, role in enumerate(roles):
            cmap = rw_map.clone()
            cmap.client_id = cid
            cmap.role = role
            c = SimClient(cid, role, cmap, self.key, block_size, self.clock,
                          seed=root.randrange(2**63))
            c.hlc.last = boot_clock.last
            self.clients.append(c)

        for c in self.clients:
            if c.role == Role.OBFUSCATION:
                s = max(2, min(4, n))
                c.buf = init_oc(self._blocking_session(c.rng), c.cmap, s, c.hlc, c.rng)

    def _blocking_session(self, rng) -> BlockSession:
        return BlockSession(self.server.handle, self.key, self.block_size, rng)

    # -- message-level driving ------------------------------------------------

    def start_access(self, c: SimClient, op: str, bid: int | None = None,
                     data: bytes | None = None) -> None:
        assert c.idle
        if c.role == Role.OBFUSCATION:
            c._gen = oc_attempt(c.buf, c.cmap, c.hlc, c.rng)
        else:
            c._gen = rw_attempt(bid, op, data, c.cmap, c.hlc, c.rng)
        c._access = {"op": op, "bid": bid, "data": data, "attempt": 1}
        c._pending = next(c._gen)

    def _deliver(self, c: SimClient, req) -> tuple:
        if req[0] == "read":
            resp = self.server.handle(wire.ReadReq(req[1], req[2]))
            if isinstance(resp, wire.ReadResp):
                return ("ok", resp.token, c.open(resp.sealed1), c.open(resp.sealed2))
            if resp.code == wire.ErrCode.LOCKED:
                return ("locked",)
            raise CaosError(f"unexpected read reply {resp!r}")
        _, token, p1, b1, p2, b2 = req
        resp = self.server.handle(wire.WriteReq(token, p1, c.seal(b1), p2, c.seal(b2)))
        if isinstance(resp, wire.WriteAck):
            return ("ok",)
        if resp.code == wire.ErrCode.STALE_TOKEN:
            return ("stale",)
        raise CaosError(f"unexpected write reply {resp!r}")

    def step_client(self, c: SimClient) -> Attempt | None:
        """Deliver one pending request for c; returns the Attempt if it ended."""
        assert not c.idle, "client has no access in flight"
        resp = self._deliver(c, c._pending)
        try:
            c._pending = c._gen.send(resp)
            return None
        except StopIteration as stop:
            res: Attempt = stop.value
            c._gen = None
            c._pending = None
            return res

    def finish_attempt(self, c: SimClient, res: Attempt) -> Attempt | None:
        """Commit/record one finished attempt; restart if it asked to retry.

        Returns the attempt when the whole access completed (successfully or
        by exhausting retries -> raises), None when a retry was started.
        """
        acc = c._access
        if res.map_commit is not None:
            c.cmap.adopt(res.map_commit)
        if res.buf_commit is not None:
            c.buf.adopt(res.buf_commit)
        if res.reason == "locked":
            c.stats.locked += 1
        elif res.reason == "stale":
            c.stats.stale += 1
        elif res.reason == "wrong-block":
            c.stats.wrong_block += 1
        if res.ok:
            c.stats.accesses += 1
            if acc["op"] == OP_READ and c.role != Role.OBFUSCATION:
                c.stats.reads_ok += 1
            elif acc["op"] == OP_WRITE:
                c.stats.writes_ok += 1
            c._access = None
            return res
        c.stats.retries += 1
        acc["attempt"] += 1
        hunting = acc["bid"] is not None and not c.cmap.entry(acc["bid"]).psns
        acc["cap"] = max(acc.get("cap", 64), 8 * self.N if hunting else 64)
        if acc["attempt"] > acc["cap"]:
            raise CaosError(
                f"client {c.client_id} exhausted retries on bid {acc['bid']} (seed {self.seed})"
            )
        if c.role == Role.OBFUSCATION:
            c._gen = oc_attempt(c.buf, c.cmap, c.hlc, c.rng)
        else:
            c._gen = rw_attempt(acc["bid"], acc["op"], acc["data"], c.cmap, c.hlc, c.rng)
        c._pending = next(c._gen)
        return None

    # -- god's-eye view for checkers -------------------------------------------

    def decrypted_slots(self) -> list[BlockPlain]:
        return [
            codec.open_sealed(self.key, self.server.slots.read_slot(p), self.block_size)
            for p in range(self.N)
        ]

    @property
    def quiescent(self) -> bool:
        return all(c.idle for c in self.clients) and not self.server.locks.live_tokens(self.clock())
