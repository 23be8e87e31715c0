"""Regular-client access engine.

One access reads two positions (the requested block's and a random one),
reconciles the local map from the fetched metadata, optionally replaces the
requested block's payload, tries to duplicate the requested block onto the
random position, and writes both slots back re-encrypted. The requested and
random positions travel in random order, so the pair leaks nothing about
which one the client wanted.

Map changes are staged on a clone and committed only when the write lands:
a write rejected for a stale lock token must leave no trace in the local
map, or the consolidation accounting (cns) would drift from what other
clients can observe.

The per-attempt logic is written as a message-level generator (yielding
read/write requests) so the deterministic simulator can interleave many
clients at message granularity while the blocking driver used by the CLI
and the TCP session runs the very same code.
"""

from __future__ import annotations

import socket
from bisect import insort
from dataclasses import dataclass, field

from . import codec, wire
from .core import (
    FREE_BID, AccessPattern, BlockPlain, ClientMap, MapEntry, Role, free_block,
)
from .errors import (
    AccessError, CapacityError, CaosError, ConfigError, LockedError,
    MapLookupError, ProtocolError, ServerError, StaleTokenError,
)

OP_READ = "read"
OP_WRITE = "write"

_BULK_CHUNK_BYTES = 4 * 1024 * 1024


# -- core operations ---------------------------------------------------------


def select_position(cmap: ClientMap, bid: int | None, rng) -> int:
    """Uniform position for `bid` from the map, or uniform over the store."""
    if bid is None:
        return rng.randrange(cmap.N)
    psns = cmap.entry(bid).psns
    assert psns, f"bid {bid} has no known positions"
    return psns[rng.randrange(len(psns))]


def sync(block: BlockPlain, p: int, cmap: ClientMap, clock) -> BlockPlain:
    """Reconcile the local map with a block just fetched from position p.

    Mutates both the block and the map:
      * a copy older than the map's newest timestamp is reclaimed: the
        position is dropped from the map and the block is marked free;
      * a copy newer than the map invalidates every remembered position;
      * a position the map did not associate with this block id is moved
        under it, bumping the block's consolidation count;
      * a fully consolidated copy gets its position recorded as verified.

    A free block normally touches nothing; if some entry still lists its
    position, that listing is stale and is dropped.
    """
    if block.is_free:
        owner = cmap.owner_of(p)
        if owner is not None:
            cmap.entries[owner].drop_position(p)
        return block

    entry = cmap.entry(block.bid)

    if block.ts < entry.ts:
        # superseded copy: reclaim the position
        entry.drop_position(p)
        block.bid = FREE_BID
        block.ts = clock.next()
        block.cns = 1
        return block

    if block.cns < cmap.client_count:
        if block.ts > entry.ts:
            entry.psns.clear()
            entry.vf.clear()
            entry.ts = block.ts
        if p not in entry.psns:
            owner = cmap.owner_of(p)
            if owner is not None:
                cmap.entries[owner].drop_position(p)
            insort(entry.psns, p)
            if block.cns + 1 > cmap.client_count:
                cmap.cns_clamped += 1
                block.cns = cmap.client_count
            else:
                block.cns += 1

    if block.cns == cmap.client_count:
        if p not in entry.psns:
            # unreachable while consolidation accounting holds; repair and count it
            cmap.sync_anomalies += 1
            owner = cmap.owner_of(p)
            if owner is not None:
                cmap.entries[owner].drop_position(p)
            insort(entry.psns, p)
        if p not in entry.vf:
            insort(entry.vf, p)
    return block


def prepare_write(bid: int, block: BlockPlain, data: bytes, clock) -> bytes | None:
    """Replace the fetched block's payload if the write is possible.

    Allowed when the fetched block is the one requested or a free one.
    Returns the payload on success (the block now carries cns=1 and a fresh
    timestamp) and None when the fetched block belongs to someone else.
    """
    if len(data) != len(block.data):
        raise CaosError(f"payload is {len(data)} bytes, block size is {len(block.data)}")
    if block.bid == bid or block.is_free:
        block.bid = bid
        block.data = data
        block.cns = 1
        block.ts = clock.next()
        return data
    return None


def duplicate_block(sblock: BlockPlain, dblock: BlockPlain, p: int, cmap: ClientMap) -> bool:
    """Copy sblock over the block at position p when reassignment is safe.

    A free destination is always reusable. A live destination may only be
    reassigned when every client has consolidated it and enough verified
    positions remain (strictly more than the client count), or when it is
    this client's own unconsolidated reassignment (cns=1) and the entry
    keeps another position. Guard bookkeeping uses the destination's block
    id as it was before the copy.

    Returns True when the duplicate was written into dblock.
    """
    assert not sblock.is_free, "cannot duplicate a free block"

    if sblock.ts != cmap.entry(sblock.bid).ts:
        # the source copy is superseded (possible for blocks parked in an
        # obfuscation buffer while the store moved on); spreading it would
        # plant dead data under a live map listing
        return False

    if dblock.is_free:
        dblock.bid = sblock.bid
        dblock.data = sblock.data
        dblock.ts = sblock.ts
        dblock.cns = 1
        owner = cmap.owner_of(p)
        if owner is not None:
            cmap.entries[owner].drop_position(p)
        tentry = cmap.entry(sblock.bid)
        if p not in tentry.psns:
            insort(tentry.psns, p)
        return True

    if dblock.bid == sblock.bid:
        # the random position already holds a copy of the source; rewriting
        # it would only reset its consolidation count
        return False

    old = dblock.bid
    oentry = cmap.entry(old)
    # the cns=1 route may only undo this client's own duplications; positions
    # in vf are commonly listed (verified, or this client's own write target),
    # so taking one would orphan other clients
    permitted = (
        dblock.cns == cmap.client_count and len(oentry.vf) > cmap.client_count
    ) or (dblock.cns == 1 and len(oentry.psns) > 1 and p not in oentry.vf)
    if not permitted:
        return False

    dblock.bid = sblock.bid
    dblock.data = sblock.data
    dblock.ts = sblock.ts
    dblock.cns = 1
    oentry.vf.clear()
    cmap.move_position(p, old, sblock.bid)
    return True


# -- access attempts ---------------------------------------------------------


@dataclass
class Attempt:
    """Outcome of one read/write round against the store."""

    ok: bool = False
    retry: bool = False
    reason: str | None = None
    out: bytes | None = None
    map_commit: ClientMap | None = None
    pattern: AccessPattern | None = None
    wrote: tuple[int, int, bytes] | None = None  # (bid, ts, data) on committed writes
    ret_ts: int | None = None  # timestamp of the returned block on reads
    buf_commit: object | None = None  # staged obfuscation buffer, when applicable


@dataclass
class AccessOutcome:
    """Result of a completed access: payload or ack, retry count, and the
    positions the final attempt touched."""

    result: bytes | None
    retried: int
    pattern: AccessPattern
    wrote: tuple[int, int, bytes] | None = None
    ret_ts: int | None = None
    attempts: list[AccessPattern] = field(default_factory=list)


def rw_attempt(bid: int, op: str, data: bytes | None, cmap: ClientMap, clock, rng,
               transactional: bool = True):
    """One attempt of the main access function, as a request generator.

    Yields ("read", p1, p2) and ("write", token, p1, blk1, p2, blk2);
    expects ("ok", token, blk1, blk2) / ("locked",) for the read and
    ("ok",) / ("stale",) for the write. Returns an Attempt.

    Position policy: reads draw uniformly from the entry's known positions.
    Writes prefer a position from vf — one every client is known to list —
    so the new version lands where laggards will still find it. An entry
    whose position set has been emptied by map corrections sends the attempt
    hunting at a uniformly random position; the block's current copy exists
    somewhere, and syncing random pairs rediscovers it while looking exactly
    like obfuscation traffic.
    """
    entry = cmap.entry(bid)
    if not entry.psns:
        req_p = rng.randrange(cmap.N)
    elif op == OP_WRITE and entry.vf:
        req_p = entry.vf[rng.randrange(len(entry.vf))]
    else:
        req_p = select_position(cmap, bid, rng)
    cpy_p = rng.randrange(cmap.N)
    while cpy_p == req_p:
        cpy_p = rng.randrange(cmap.N)

    req_first = bool(rng.getrandbits(1))
    p1, p2 = (req_p, cpy_p) if req_first else (cpy_p, req_p)

    resp = yield ("read", p1, p2)
    if resp[0] == "locked":
        return Attempt(retry=True, reason="locked")
    _, token, b1, b2 = resp
    req_blk, cpy_blk = (b1, b2) if req_first else (b2, b1)

    work = cmap.clone() if transactional else cmap
    sync(req_blk, req_p, work, clock)
    sync(cpy_blk, cpy_p, work, clock)

    out: bytes | None = None
    ok = False
    wrote = None
    ret_ts = None
    if op == OP_READ:
        if req_blk.bid == bid:
            out = req_blk.data
            ok = True
            ret_ts = req_blk.ts
    else:
        status = prepare_write(bid, req_blk, data, clock)
        if status is not None:
            out = status
            ok = True
            wrote = (bid, req_blk.ts, data)

    # sync may have reclaimed the fetched block (stale copy); there is then
    # nothing to duplicate and both slots go back re-encrypted as they are
    duplicated = False
    if not req_blk.is_free:
        duplicated = duplicate_block(req_blk, cpy_blk, cpy_p, work)

    if wrote is not None:
        # The new version exists only where this attempt writes it; positions
        # remembered for the old version would otherwise let the duplication
        # guard reassign the sole current copy away. The written position goes
        # into vf: it is the commonly-listed anchor the next write targets,
        # and the vf guard in duplicate_block keeps this client from
        # reassigning it while it is the only current copy.
        wentry = work.entry(bid)
        wentry.ts = req_blk.ts
        wentry.psns = sorted({req_p, cpy_p}) if duplicated else [req_p]
        wentry.vf = [req_p]

    wb1, wb2 = (req_blk, cpy_blk) if req_first else (cpy_blk, req_blk)
    resp = yield ("write", token, p1, wb1, p2, wb2)
    if resp[0] == "stale":
        return Attempt(retry=True, reason="stale")

    pattern = AccessPattern(reads=[p1, p2], writes=[p1, p2])
    return Attempt(
        ok=ok,
        retry=not ok,
        reason=None if ok else ("wrong-block" if op == OP_READ else "not-writable"),
        out=out,
        map_commit=work if transactional else None,
        pattern=pattern,
        wrote=wrote,
        ret_ts=ret_ts,
    )


def run_attempt(gen, session) -> Attempt:
    """Drive an attempt generator against a blocking session."""
    try:
        req = next(gen)
    except StopIteration as stop:  # attempt decided before any traffic
        return stop.value
    while True:
        if req[0] == "read":
            try:
                token, b1, b2 = session.read_pair(req[1], req[2])
                resp = ("ok", token, b1, b2)
            except LockedError:
                resp = ("locked",)
        else:
            try:
                session.write_pair(req[1], req[2], req[3], req[4], req[5])
                resp = ("ok",)
            except StaleTokenError:
                resp = ("stale",)
        try:
            req = gen.send(resp)
        except StopIteration as stop:
            return stop.value


def retry_cap_for(cmap: ClientMap, bid: int | None) -> int:
    """Default retry budget: generous multiple of the known positions."""
    psns = len(cmap.entry(bid).psns) if bid is not None else 2
    return 4 * psns + 8


def access_rw(bid: int, op: str, data: bytes | None, session, cmap: ClientMap,
              clock, rng, retry_cap: int | None = None) -> AccessOutcome:
    """Read or write one block, re-running the attempt on conflicts.

    A locked pair, a stale token after a lock timeout, a stale map pointing
    at a reassigned position, or an unwritable fetched block all trigger a
    full re-run with fresh random choices. Map changes from attempts whose
    write landed are kept even when the attempt did not achieve its goal:
    they are real observations of the store.
    """
    if op not in (OP_READ, OP_WRITE):
        raise CaosError(f"unknown op {op!r}")
    if op == OP_WRITE and cmap.role == Role.READ_ONLY:
        raise ConfigError("read-only client cannot write")
    if op == OP_WRITE and data is None:
        raise CaosError("write requires data")
    cmap.entry(bid)  # raises MapLookupError for unknown bids

    attempts: list[AccessPattern] = []
    attempt_no = 0
    cap = 0
    while True:
        attempt_no += 1
        # the budget may grow mid-access (hunting a lost block needs many
        # random probes) but never shrinks below attempts already spent
        if retry_cap is not None:
            cap = retry_cap
        elif not cmap.entry(bid).psns:
            cap = max(cap, 8 * cmap.N)
        else:
            cap = max(cap, retry_cap_for(cmap, bid))
        if attempt_no > cap:
            break
        res = run_attempt(rw_attempt(bid, op, data, cmap, clock, rng), session)
        if res.map_commit is not None:
            cmap.adopt(res.map_commit)
        if res.pattern is not None:
            attempts.append(res.pattern)
        if res.ok:
            return AccessOutcome(
                result=res.out,
                retried=attempt_no - 1,
                pattern=res.pattern,
                wrote=res.wrote,
                ret_ts=res.ret_ts,
                attempts=attempts,
            )
    raise AccessError(f"access of bid {bid} gave up after {cap} attempts")


# -- store initialization -----------------------------------------------------


def init_store(payloads: list[bytes], N: int, C: int, client_count: int,
               clock, rng, session, client_id: int = 0) -> ClientMap:
    """Seal and upload the initial database; returns the shared starting map.

    Each block gets C distinct positions drawn uniformly without
    replacement; every remaining position holds a free block. All blocks
    (free ones included) start fully consolidated, and the map lists every
    copy as verified, since every client departs from this same map.
    """
    n = len(payloads)
    if n == 0:
        raise ConfigError("empty database")
    block_size = len(payloads[0])
    if any(len(p) != block_size for p in payloads):
        raise ConfigError("payloads must share one block size")
    if C < client_count:
        raise ConfigError(f"redundancy {C} below client count {client_count}")
    if C * n > N:
        raise CapacityError(f"{C}*{n} copies exceed {N} positions")

    ts0 = clock.next()
    positions = rng.sample(range(N), C * n)
    blocks = [free_block(ts0, client_count, block_size) for _ in range(N)]
    cmap = ClientMap(n, N, client_count, client_id, Role.READ_WRITE)
    for bid, payload in enumerate(payloads):
        mine = positions[bid * C : (bid + 1) * C]
        for p in mine:
            blocks[p] = BlockPlain(bid, client_count, ts0, payload)
        cmap.entries[bid] = MapEntry(mine, ts0, mine)

    session.bulk_init(blocks)
    return cmap


# -- sessions -----------------------------------------------------------------


class BlockSession:
    """Block-level store session over a message transport.

    `transport` is any callable Message -> Message; the TCP session and the
    in-memory simulator supply different ones. Sealing and opening happen
    here, so the protocol logic above never touches ciphertext.
    """

    def __init__(self, transport, key: bytes, block_size: int, rng=None):
        self.transport = transport
        self.key = key
        self.block_size = block_size
        self.rng = rng

    def info(self) -> wire.InfoResp:
        resp = self.transport(wire.InfoReq())
        if not isinstance(resp, wire.InfoResp):
            raise ServerError(f"unexpected reply {resp!r}")
        return resp

    def read_pair(self, p1: int, p2: int) -> tuple[int, BlockPlain, BlockPlain]:
        resp = self.transport(wire.ReadReq(p1, p2))
        if isinstance(resp, wire.ReadResp):
            return (
                resp.token,
                codec.open_sealed(self.key, resp.sealed1, self.block_size),
                codec.open_sealed(self.key, resp.sealed2, self.block_size),
            )
        self._raise(resp)

    def write_pair(self, token: int, p1: int, b1: BlockPlain, p2: int, b2: BlockPlain) -> None:
        resp = self.transport(
            wire.WriteReq(
                token,
                p1, codec.seal(self.key, b1, self.block_size, self.rng),
                p2, codec.seal(self.key, b2, self.block_size, self.rng),
            )
        )
        if isinstance(resp, wire.WriteAck):
            return
        self._raise(resp)

    def bulk_init(self, blocks: list[BlockPlain]) -> None:
        per_frame = max(1, _BULK_CHUNK_BYTES // codec.sealed_size(self.block_size))
        for start in range(0, len(blocks), per_frame):
            chunk = blocks[start : start + per_frame]
            sealed = tuple(codec.seal(self.key, b, self.block_size, self.rng) for b in chunk)
            resp = self.transport(wire.BulkInit(start, sealed))
            if not isinstance(resp, wire.WriteAck):
                self._raise(resp)

    @staticmethod
    def _raise(resp):
        if isinstance(resp, wire.Err):
            if resp.code == wire.ErrCode.LOCKED:
                raise LockedError("positions locked")
            if resp.code == wire.ErrCode.STALE_TOKEN:
                raise StaleTokenError("write token stale")
            if resp.code == wire.ErrCode.NOT_INITIALIZED:
                raise ProtocolError("store not initialized")
            raise ProtocolError(f"server error {resp.code.name}")
        raise ServerError(f"unexpected reply {resp!r}")


class TcpTransport:
    """Framed request/response over one TCP connection, counting bytes."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.bytes_up = 0
        self.bytes_down = 0

    def __call__(self, msg: wire.Message) -> wire.Message:
        raw = wire.encode_message(msg)
        self.sock.sendall(raw)
        self.bytes_up += len(raw)
        frame = wire.read_frame(self._recv_exact)
        self.bytes_down += len(frame)
        return wire.decode_message(frame)

    def _recv_exact(self, n: int) -> bytes:
        data = bytearray()
        while len(data) < n:
            chunk = self.sock.recv(n - len(data))
            if not chunk:
                raise ConnectionError("server closed connection")
            data.extend(chunk)
        return bytes(data)

    def close(self) -> None:
        self.sock.close()


def connect(host: str, port: int, key: bytes, block_size: int | None = None,
            rng=None) -> tuple[BlockSession, TcpTransport]:
    """Open a TCP session, validating geometry against the server."""
    transport = TcpTransport(host, port)
    probe = BlockSession(transport, key, 0)
    info = probe.info()
    if block_size is not None and info.block_size != block_size:
        transport.close()
        raise ConfigError(f"server block size {info.block_size}, configured {block_size}")
    if info.ct_size != codec.sealed_size(info.block_size):
        transport.close()
        raise ConfigError("server record size does not match the sealed-block layout")
    return BlockSession(transport, key, info.block_size, rng), transport
